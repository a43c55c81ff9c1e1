"""Hot numeric kernels.

Every kernel has two implementations: a numba ``@njit`` path and a pure
numpy path.  The numba path is used when numba imports cleanly and the
environment variable ``SCALENETS_DISABLE_NUMBA`` is unset (or ``0``).
Both paths are always importable so tests and the benchmark can compare
them directly via :func:`get_backend`.
"""
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_DISABLED = os.environ.get("SCALENETS_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")
USE_NUMBA = HAVE_NUMBA and not _DISABLED


# ---------------------------------------------------------------------------
# grouped, dilated, same-padded 3D convolution
#
# x: (B, G, Ci, D, H, W)   w: (G, Co, Ci, k, k, k)   b: (G, Co)
# ---------------------------------------------------------------------------


def _check_conv_args(x, w, b):
    if x.ndim != 6 or w.ndim != 6:
        raise ValueError(f"expected rank-6 input and weights, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"group mismatch: input has {x.shape[1]} groups, weights {w.shape[0]}")
    if x.shape[2] != w.shape[2]:
        raise ValueError(f"channel mismatch: input has {x.shape[2]} channels, kernel expects {w.shape[2]}")
    k = w.shape[3]
    if w.shape[3:] != (k, k, k) or k % 2 == 0:
        raise ValueError(f"kernel must be cubic with odd size, got {w.shape[3:]}")
    if b.shape != w.shape[:2]:
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[:2]}")


def _pad(x, r):
    if r == 0:
        return x
    return np.pad(x, [(0, 0)] * (x.ndim - 3) + [(r, r)] * 3)


def conv_forward_numpy(x, w, b, dilation):
    _check_conv_args(x, w, b)
    B, G, Ci, D, H, W = x.shape
    Co, k = w.shape[1], w.shape[3]
    V = D * H * W
    xp = _pad(x, dilation * (k // 2))
    out = np.empty((B, G, Co, V))
    out[...] = b[None, :, :, None]
    tmp = np.empty((Co, V))
    xs = np.empty((Ci, D, H, W))
    for n in range(B):
        for g in range(G):
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        di, dj, dl = i * dilation, j * dilation, l * dilation
                        xs[...] = xp[n, g, :, di:di + D, dj:dj + H, dl:dl + W]
                        np.dot(w[g, :, :, i, j, l], xs.reshape(Ci, V), out=tmp)
                        out[n, g] += tmp
    return out.reshape(B, G, Co, D, H, W)


def conv_backward_numpy(x, w, gout, dilation, need_input_grad=True):
    B, G, Ci, D, H, W = x.shape
    Co, k = w.shape[1], w.shape[3]
    V = D * H * W
    r = dilation * (k // 2)
    xp = _pad(x, r)
    go = np.ascontiguousarray(gout).reshape(B, G, Co, V)
    gb = go.sum(axis=(0, 3))
    gw = np.zeros_like(w)
    gxp = np.zeros_like(xp) if need_input_grad else None
    xs = np.empty((Ci, D, H, W))
    for n in range(B):
        for g in range(G):
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        di, dj, dl = i * dilation, j * dilation, l * dilation
                        xs[...] = xp[n, g, :, di:di + D, dj:dj + H, dl:dl + W]
                        gw[g, :, :, i, j, l] += np.dot(go[n, g], xs.reshape(Ci, V).T)
                        if need_input_grad:
                            gi = np.dot(w[g, :, :, i, j, l].T, go[n, g])
                            gxp[n, g, :, di:di + D, dj:dj + H, dl:dl + W] += gi.reshape(Ci, D, H, W)
    gx = None
    if need_input_grad:
        gx = gxp[:, :, :, r:r + D, r:r + H, r:r + W] if r else gxp
        gx = np.ascontiguousarray(gx)
    return gx, gw, gb


if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col(x, k, dilation, cols):
        # x: (Ci, D, H, W) -> cols (Ci*k^3, D*H*W); every entry is written
        Ci, D, H, W = x.shape
        r = dilation * (k // 2)
        for c in range(Ci):
            for i in range(k):
                oz = i * dilation - r
                for j in range(k):
                    oy = j * dilation - r
                    for l in range(k):
                        ox = l * dilation - r
                        dst = cols[((c * k + i) * k + j) * k + l]
                        for z in range(D):
                            zs = z + oz
                            for y in range(H):
                                ys = y + oy
                                base = (z * H + y) * W
                                if zs < 0 or zs >= D or ys < 0 or ys >= H:
                                    for xx in range(W):
                                        dst[base + xx] = 0.0
                                else:
                                    for xx in range(W):
                                        xs = xx + ox
                                        if xs < 0 or xs >= W:
                                            dst[base + xx] = 0.0
                                        else:
                                            dst[base + xx] = x[c, zs, ys, xs]


_workspace = {}


def _scratch(tag, rows, cols):
    # grow-only scratch buffers; freshly allocated pages cost more than the gather itself
    buf = _workspace.get(tag)
    if buf is None or buf.size < rows * cols:
        buf = np.empty(rows * cols)
        _workspace[tag] = buf
    return buf[: rows * cols].reshape(rows, cols)


def release_workspace():
    """Drop cached scratch buffers used by the numba convolution path."""
    _workspace.clear()


def conv_forward_numba(x, w, b, dilation):
    _check_conv_args(x, w, b)
    B, G, Ci, D, H, W = x.shape
    Co, k = w.shape[1], w.shape[3]
    V = D * H * W
    K = Ci * k ** 3
    x = np.ascontiguousarray(x)
    wm = np.ascontiguousarray(w.reshape(G, Co, K))
    out = np.empty((B, G, Co, V))
    for n in range(B):
        for g in range(G):
            if k == 1:
                cols = x[n, g].reshape(Ci, V)
            else:
                cols = _scratch("cols", K, V)
                _im2col(x[n, g], k, dilation, cols)
            np.dot(wm[g], cols, out=out[n, g])
            out[n, g] += b[g][:, None]
    return out.reshape(B, G, Co, D, H, W)


def conv_backward_numba(x, w, gout, dilation, need_input_grad=True):
    B, G, Ci, D, H, W = x.shape
    Co, k = w.shape[1], w.shape[3]
    V = D * H * W
    K = Ci * k ** 3
    x = np.ascontiguousarray(x)
    go = np.ascontiguousarray(gout).reshape(B, G, Co, V)
    wm = np.ascontiguousarray(w.reshape(G, Co, K))
    gb = go.sum(axis=(0, 3))
    gw = np.zeros((G, Co, K))
    gx = np.empty((B, G, Ci, D, H, W)) if need_input_grad else None
    if need_input_grad and k > 1:
        wflip = np.ascontiguousarray(w[:, :, :, ::-1, ::-1, ::-1].transpose(0, 2, 1, 3, 4, 5)).reshape(G, Ci, Co * k ** 3)
    for n in range(B):
        for g in range(G):
            if k == 1:
                cols = x[n, g].reshape(Ci, V)
            else:
                cols = _scratch("cols", K, V)
                _im2col(x[n, g], k, dilation, cols)
            gw[g] += np.dot(go[n, g], cols.T)
            if need_input_grad:
                if k == 1:
                    gx[n, g] = np.dot(wm[g].T, go[n, g]).reshape(Ci, D, H, W)
                else:
                    # input gradient = same-padded conv of gout with the flipped, transposed kernel
                    gcols = _scratch("cols", Co * k ** 3, V)
                    _im2col(go[n, g].reshape(Co, D, H, W), k, dilation, gcols)
                    np.dot(wflip[g], gcols, out=gx[n, g].reshape(Ci, V))
    return gx, gw.reshape(w.shape), gb


# ---------------------------------------------------------------------------
# resampling at arbitrary coordinates, zero outside the volume
#
# vol: (D, H, W)   coords: (3, N) as (z, y, x) voxel positions
# ---------------------------------------------------------------------------


def trilinear_numpy(vol, coords):
    D, H, W = vol.shape
    z, y, x = coords
    z0 = np.floor(z).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    fz, fy, fx = z - z0, y - y0, x - x0
    out = np.zeros(z.shape)
    for dz in (0, 1):
        wz = fz if dz else 1.0 - fz
        zi = z0 + dz
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            yi = y0 + dy
            for dx in (0, 1):
                wx = fx if dx else 1.0 - fx
                xi = x0 + dx
                ok = (zi >= 0) & (zi < D) & (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
                vals = np.zeros(z.shape)
                vals[ok] = vol[zi[ok], yi[ok], xi[ok]]
                out += wz * wy * wx * vals
    return out


def nearest_numpy(vol, coords):
    D, H, W = vol.shape
    idx = np.floor(coords + 0.5).astype(np.int64)
    zi, yi, xi = idx
    ok = (zi >= 0) & (zi < D) & (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
    out = np.zeros(zi.shape, dtype=vol.dtype)
    out[ok] = vol[zi[ok], yi[ok], xi[ok]]
    return out


if HAVE_NUMBA:

    @njit(cache=True)
    def trilinear_numba(vol, coords):
        D, H, W = vol.shape
        n = coords.shape[1]
        out = np.zeros(n)
        for p in range(n):
            z = coords[0, p]
            y = coords[1, p]
            x = coords[2, p]
            z0 = int(np.floor(z))
            y0 = int(np.floor(y))
            x0 = int(np.floor(x))
            fz = z - z0
            fy = y - y0
            fx = x - x0
            acc = 0.0
            for dz in range(2):
                zi = z0 + dz
                if zi < 0 or zi >= D:
                    continue
                wz = fz if dz else 1.0 - fz
                for dy in range(2):
                    yi = y0 + dy
                    if yi < 0 or yi >= H:
                        continue
                    wy = fy if dy else 1.0 - fy
                    for dx in range(2):
                        xi = x0 + dx
                        if xi < 0 or xi >= W:
                            continue
                        wx = fx if dx else 1.0 - fx
                        acc += wz * wy * wx * vol[zi, yi, xi]
            out[p] = acc
        return out

    @njit(cache=True)
    def nearest_numba(vol, coords):
        D, H, W = vol.shape
        n = coords.shape[1]
        out = np.zeros(n, dtype=vol.dtype)
        for p in range(n):
            zi = int(np.floor(coords[0, p] + 0.5))
            yi = int(np.floor(coords[1, p] + 0.5))
            xi = int(np.floor(coords[2, p] + 0.5))
            if 0 <= zi < D and 0 <= yi < H and 0 <= xi < W:
                out[p] = vol[zi, yi, xi]
        return out


# ---------------------------------------------------------------------------
# signed-rank enumeration: W+ (in doubled-rank units) for all 2^n sign patterns
# ---------------------------------------------------------------------------


def signed_rank_sums_numpy(ranks2):
    n = ranks2.shape[0]
    patterns = np.arange(2 ** n, dtype=np.int64)
    bits = (patterns[:, None] >> np.arange(n, dtype=np.int64)[None, :]) & 1
    return bits @ ranks2


if HAVE_NUMBA:

    @njit(cache=True)
    def signed_rank_sums_numba(ranks2):
        n = ranks2.shape[0]
        total = 1 << n
        out = np.empty(total, dtype=np.int64)
        for pattern in range(total):
            s = 0
            for i in range(n):
                if (pattern >> i) & 1:
                    s += ranks2[i]
            out[pattern] = s
        return out


class _Backend:
    def __init__(self, name, conv_forward, conv_backward, trilinear, nearest, signed_rank_sums):
        self.name = name
        self.conv_forward = conv_forward
        self.conv_backward = conv_backward
        self.trilinear = trilinear
        self.nearest = nearest
        self.signed_rank_sums = signed_rank_sums

    def __repr__(self):
        return f"<kernel backend {self.name}>"


NUMPY = _Backend(
    "numpy", conv_forward_numpy, conv_backward_numpy, trilinear_numpy, nearest_numpy, signed_rank_sums_numpy
)
NUMBA = (
    _Backend(
        "numba", conv_forward_numba, conv_backward_numba, trilinear_numba, nearest_numba, signed_rank_sums_numba
    )
    if HAVE_NUMBA
    else None
)


def get_backend(name=None):
    """Return a kernel backend by name, or the active one when ``name`` is None."""
    if name is None:
        return NUMBA if USE_NUMBA else NUMPY
    if name == "numpy":
        return NUMPY
    if name == "numba":
        if NUMBA is None:
            raise RuntimeError("numba is not installed")
        return NUMBA
    raise ValueError(f"unknown kernel backend {name!r}")


def conv_forward(x, w, b, dilation):
    return get_backend().conv_forward(x, w, b, dilation)


def conv_backward(x, w, gout, dilation, need_input_grad=True):
    return get_backend().conv_backward(x, w, gout, dilation, need_input_grad)


def trilinear(vol, coords):
    return get_backend().trilinear(np.ascontiguousarray(vol, dtype=np.float64), np.ascontiguousarray(coords))


def nearest(vol, coords):
    return get_backend().nearest(np.ascontiguousarray(vol), np.ascontiguousarray(coords))


def signed_rank_sums(ranks2):
    return get_backend().signed_rank_sums(np.ascontiguousarray(ranks2, dtype=np.int64))
