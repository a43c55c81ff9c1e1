"""Synthetic multimodal phantoms, histogram standardisation and volume files."""
import struct
from dataclasses import dataclass

import numpy as np

BACKGROUND, HEALTHY, NECROTIC, EDEMA, NON_ENHANCING, ENHANCING = range(6)
N_CLASSES = 6
NOISE_SIGMA = 0.05  # fraction of the [0, 1] dynamic range

# Mean intensity per (modality, class).  Row order mimics T1c, T1, FLAIR, T2:
# modality 0 highlights enhancing tumour, 1 necrosis, 2 edema, 3 non-enhancing.
# Necrotic and non-enhancing are iso-intense in modality 0.
CONTRAST = np.array(
    [
        [0.0, 0.40, 0.25, 0.40, 0.25, 0.90],
        [0.0, 0.50, 0.10, 0.40, 0.35, 0.45],
        [0.0, 0.35, 0.50, 0.85, 0.55, 0.50],
        [0.0, 0.40, 0.60, 0.70, 0.95, 0.60],
    ]
)

LANDMARK_PERCENTILES = (1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 99)
STANDARD_RANGE = (0.0, 100.0)
CLAMP_RANGE = (-20.0, 120.0)


class PhantomError(RuntimeError):
    pass


class VolumeFormatError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (n_modalities, D, H, W) float64
    labels: np.ndarray  # (D, H, W) uint8

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.image.ndim != 4 or self.image.shape[1:] != self.labels.shape:
            raise ValueError(f"image {self.image.shape} and labels {self.labels.shape} do not agree")

    @property
    def n_modalities(self):
        return self.image.shape[0]

    @property
    def shape(self):
        return self.labels.shape


def contrast_table(n_modalities):
    """Per-modality class means; rows repeat cyclically beyond four modalities."""
    return CONTRAST[np.arange(n_modalities) % len(CONTRAST)]


def _ellipsoid(grid, center, axes):
    z, y, x = grid
    return ((z - center[0]) / axes[0]) ** 2 + ((y - center[1]) / axes[1]) ** 2 + ((x - center[2]) / axes[2]) ** 2 <= 1.0


def generate_phantom(size, n_modalities, rng, max_attempts=100):
    """Brain ellipsoid of healthy tissue with a nested ellipsoidal tumour.

    Nesting: edema contains non-enhancing, which contains enhancing, which
    contains the necrotic core.
    """
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < 16:
        raise ValueError(f"phantom size must be three dims >= 16, got {size}")
    if n_modalities < 1:
        raise ValueError("n_modalities must be >= 1")
    dims = np.array(size, dtype=np.float64)
    grid = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in size), indexing="ij")

    brain_c = (dims - 1) / 2 + rng.uniform(-0.03, 0.03, 3) * dims
    brain_a = dims / 2 * rng.uniform(0.78, 0.9, 3)
    brain = _ellipsoid(grid, brain_c, brain_a)

    for _ in range(max_attempts):
        # radius ratios keep every shell about two voxels thick at 32^3
        ed_a = brain_a * rng.uniform(0.65, 0.75, 3)
        ed_c = brain_c + rng.uniform(-1, 1, 3) * (brain_a - ed_a) * 0.8
        edema = _ellipsoid(grid, ed_c, ed_a)
        if not edema.any() or np.any(edema & ~brain):
            continue
        ne_a = ed_a * rng.uniform(0.72, 0.78, 3)
        ne_c = ed_c + rng.uniform(-0.05, 0.05, 3) * ed_a
        en_a = ne_a * rng.uniform(0.67, 0.73, 3)
        en_c = ne_c + rng.uniform(-0.05, 0.05, 3) * ne_a
        nc_a = en_a * rng.uniform(0.57, 0.63, 3)
        nc_c = en_c + rng.uniform(-0.05, 0.05, 3) * en_a
        non_enh = edema & _ellipsoid(grid, ne_c, ne_a)
        enh = non_enh & _ellipsoid(grid, en_c, en_a)
        necrotic = enh & _ellipsoid(grid, nc_c, nc_a)

        labels = np.zeros(size, dtype=np.uint8)
        labels[brain] = HEALTHY
        labels[edema] = EDEMA
        labels[non_enh] = NON_ENHANCING
        labels[enh] = ENHANCING
        labels[necrotic] = NECROTIC
        if len(np.unique(labels)) == N_CLASSES:
            break
    else:
        raise PhantomError(f"could not place a tumour inside the brain after {max_attempts} attempts")

    means = contrast_table(n_modalities)
    image = means[:, labels] + rng.normal(0.0, NOISE_SIGMA, (n_modalities,) + size)
    image[:, labels == BACKGROUND] = 0.0
    return Sample(image, labels)


# ---------------------------------------------------------------------------
# histogram standardisation
# ---------------------------------------------------------------------------


@dataclass
class StandardScale:
    landmarks: np.ndarray  # standard-scale intensities at LANDMARK_PERCENTILES

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=np.float64)
        if self.landmarks.shape != (len(LANDMARK_PERCENTILES),):
            raise ValueError(f"expected {len(LANDMARK_PERCENTILES)} landmarks, got {self.landmarks.shape}")
        if np.any(np.diff(self.landmarks) <= 0):
            raise ValueError("standard landmarks must be strictly increasing")


def image_landmarks(channel, mask=None):
    """Nearest-rank intensity percentiles over ``mask`` (default: nonzero voxels)."""
    channel = np.asarray(channel, dtype=np.float64)
    mask = channel != 0 if mask is None else np.asarray(mask, dtype=bool)
    values = channel[mask]
    if values.size == 0:
        raise ValueError("no voxels to compute landmarks from")
    return np.percentile(values, LANDMARK_PERCENTILES, method="nearest")


def _channel(item, modality):
    if isinstance(item, Sample):
        return item.image[modality]
    arr = np.asarray(item, dtype=np.float64)
    return arr[modality] if arr.ndim == 4 else arr


def fit_standard_scale(images, modality=0, masks=None):
    """Average of each training image's landmarks after mapping its [p1, p99] onto [0, 100]."""
    images = list(images)
    if not images:
        raise ValueError("need at least one training image")
    masks = [None] * len(images) if masks is None else list(masks)
    lo, hi = STANDARD_RANGE
    mapped = []
    for img, mask in zip(images, masks):
        lm = image_landmarks(_channel(img, modality), mask)
        if lm[-1] <= lm[0]:
            raise ValueError("cannot standardise a constant image")
        mapped.append(lo + (lm - lm[0]) / (lm[-1] - lm[0]) * (hi - lo))
    return StandardScale(np.mean(mapped, axis=0))


def apply_standardisation(channel, scale, mask=None):
    """Piecewise-linear map of the image's landmarks onto the standard landmarks.

    Values beyond the first/last landmark follow the end segments and are
    clamped to [-20, 120].  Voxels outside ``mask`` (default: nonzero) stay 0.
    """
    channel = np.asarray(channel, dtype=np.float64)
    mask = channel != 0 if mask is None else np.asarray(mask, dtype=bool)
    src = image_landmarks(channel, mask)
    dst = scale.landmarks
    if np.any(np.diff(src) <= 0):
        raise ValueError("image landmarks are not strictly increasing")
    v = channel[mask]
    seg = np.clip(np.searchsorted(src, v, side="right") - 1, 0, len(src) - 2)
    slope = (dst[seg + 1] - dst[seg]) / (src[seg + 1] - src[seg])
    mapped = dst[seg] + (v - src[seg]) * slope
    out = np.zeros_like(channel)
    out[mask] = np.clip(mapped, *CLAMP_RANGE)
    return out


def standardise_sample(sample, scales):
    image = np.stack([apply_standardisation(sample.image[m], scales[m]) for m in range(sample.n_modalities)])
    return Sample(image, sample.labels)


# ---------------------------------------------------------------------------
# volume files
# ---------------------------------------------------------------------------

VOLUME_MAGIC = b"SNVL"
VOLUME_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


def volume_bytes(sample):
    n = sample.n_modalities
    D, H, W = sample.shape
    header = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, n, D, H, W)
    return header + sample.image.astype("<f8").tobytes() + sample.labels.astype(np.uint8).tobytes()


def write_volume(sample, path):
    with open(path, "wb") as fh:
        fh.write(volume_bytes(sample))


def parse_volume(buf):
    if len(buf) < _HEADER.size:
        raise VolumeFormatError(f"file too short for header ({len(buf)} bytes)")
    magic, version, n, D, H, W = _HEADER.unpack_from(buf)
    if magic != VOLUME_MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}")
    if version != VOLUME_VERSION:
        raise VolumeFormatError(f"unsupported version {version}")
    if min(n, D, H, W) < 1:
        raise VolumeFormatError(f"invalid header dims n={n} D={D} H={H} W={W}")
    voxels = D * H * W
    expected = _HEADER.size + 8 * n * voxels + voxels
    if len(buf) != expected:
        raise VolumeFormatError(f"payload length {len(buf)} does not match header dims (expected {expected})")
    off = _HEADER.size
    image = np.frombuffer(buf, dtype="<f8", count=n * voxels, offset=off).reshape(n, D, H, W)
    labels = np.frombuffer(buf, dtype=np.uint8, count=voxels, offset=off + 8 * n * voxels).reshape(D, H, W)
    return Sample(image.astype(np.float64), labels.copy())


def read_volume(path):
    with open(path, "rb") as fh:
        return parse_volume(fh.read())
