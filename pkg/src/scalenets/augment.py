"""Random small rotations of multimodal volumes."""
import numpy as np

from . import kernels
from .data import Sample

MAX_ANGLE_DEG = 10.0


def rotation_matrix(angles):
    """Rotation about x, then y, then z (radians), acting on (x, y, z) vectors."""
    ax, ay, az = angles
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def rotate_sample(sample, angles):
    """Rotate about the volume centre; images trilinear, labels nearest, zero fill."""
    if not np.any(angles):
        return Sample(sample.image.copy(), sample.labels.copy())
    D, H, W = sample.shape
    # array axes are (z, y, x); rotation acts on (x, y, z)
    zz, yy, xx = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    centre = np.array([(W - 1) / 2, (H - 1) / 2, (D - 1) / 2])
    pos = np.stack([xx.ravel(), yy.ravel(), zz.ravel()]).astype(np.float64) - centre[:, None]
    # inverse mapping: each output voxel samples the source at R^-1 (p - c) + c
    src = rotation_matrix(angles).T @ pos + centre[:, None]
    coords = np.ascontiguousarray(src[::-1])
    image = np.stack([kernels.trilinear(ch, coords).reshape(D, H, W) for ch in sample.image])
    labels = kernels.nearest(sample.labels, coords).reshape(D, H, W)
    return Sample(image, labels)


def augment_rotate(sample, rng, max_angle_deg=MAX_ANGLE_DEG):
    angles = np.deg2rad(rng.uniform(-max_angle_deg, max_angle_deg, size=3))
    return rotate_sample(sample, angles)
