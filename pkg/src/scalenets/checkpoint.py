"""Binary checkpoint format.

Layout (little-endian): magic ``SNCK``, u32 version, u64 length + UTF-8
ArchSpec JSON, u32 tensor count, then for each tensor a u16 name length,
the name, a u8 rank, one u32 per dim and the raw float64 values.
Adam moments are stored as ``<name>.m`` / ``<name>.v``; bookkeeping lives
in ``meta.*`` tensors.
"""
import struct
from dataclasses import dataclass, field

import numpy as np

from .arch import ArchSpec, ArchSpecError
from .model import param_shapes

MAGIC = b"SNCK"
VERSION = 1
META_STEP = "meta.step"
META_BEST = "meta.best_val"
META_SCALE = "meta.scale"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arch: ArchSpec
    step: int
    params: dict
    m: dict
    v: dict
    best_score: float
    scale: np.ndarray = field(default=None)  # (n_modalities, n_landmarks) or None

    def __post_init__(self):
        for name, p in self.params.items():
            for moments, tag in ((self.m, "m"), (self.v, "v")):
                if name not in moments or moments[name].shape != p.shape:
                    raise CheckpointError(f"moment {name}.{tag} missing or mis-shaped")


def _tensor_record(name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8").tobytes()


def checkpoint_bytes(ckpt):
    tensors = []
    for name in ckpt.params:
        tensors.append((name, ckpt.params[name]))
    for name in ckpt.params:
        tensors.append((f"{name}.m", ckpt.m[name]))
        tensors.append((f"{name}.v", ckpt.v[name]))
    tensors.append((META_STEP, np.array(float(ckpt.step))))
    tensors.append((META_BEST, np.array(float(ckpt.best_score))))
    if ckpt.scale is not None:
        tensors.append((META_SCALE, ckpt.scale))
    arch = ckpt.arch.to_json().encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(arch)), arch, struct.pack("<I", len(tensors))]
    out += [_tensor_record(n, a) for n, a in tensors]
    return b"".join(out)


def save_checkpoint(ckpt, path):
    data = checkpoint_bytes(ckpt)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes for {what} at offset {self.off}")
        chunk = self.buf[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def parse_checkpoint(buf):
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at offset 4")
    (n,) = r.unpack("<Q", "architecture length")
    start = r.off
    try:
        arch = ArchSpec.from_json(r.take(n, "architecture").decode("utf-8"))
    except (UnicodeDecodeError, ArchSpecError) as err:
        raise CheckpointError(f"bad architecture at offset {start}: {err}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        at = r.off
        (name_len,) = r.unpack("<H", "tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims)) if rank else 1
        raw = r.take(8 * size, f"values of {name}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r} at offset {at}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    if r.off != len(buf):
        raise CheckpointError(f"trailing bytes at offset {r.off}")

    params, m, v = {}, {}, {}
    for name, shape in param_shapes(arch).items():
        for key, store in ((name, params), (f"{name}.m", m), (f"{name}.v", v)):
            if key not in tensors:
                raise CheckpointError(f"missing tensor {key!r}")
            if tensors[key].shape != shape:
                raise CheckpointError(f"tensor {key!r} has shape {tensors[key].shape}, architecture expects {shape}")
            store[name] = tensors[key]
    for key in (META_STEP, META_BEST):
        if key not in tensors:
            raise CheckpointError(f"missing tensor {key!r}")
    return Checkpoint(
        arch,
        int(tensors[META_STEP]),
        params,
        m,
        v,
        float(tensors[META_BEST]),
        tensors.get(META_SCALE),
    )


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
