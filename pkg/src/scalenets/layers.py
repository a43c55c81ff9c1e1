"""Layer vocabulary for factored multimodal networks.

Feature maps are rank-6 tensors ``(batch, M, F, depth, height, width)``:
``M`` indexes modality branches and ``F`` the features inside a branch.
A cross-F convolution mixes features independently inside each branch,
a cross-M convolution mixes branches independently for each feature, and
a merge collapses (or folds) the M axis so later layers no longer depend
on the number of modalities.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .numerics import ShapeError, Tensor, add, as_tensor, make_node, relu, reshape, tmax, tmean, transpose

MERGE_MODES = ("concat", "average", "maxout")
NORM_EPS = 1e-5


@dataclass
class ConvKernel:
    """Weights ``(C_out, C_in, k, k, k)`` (or a bank with a leading group axis), bias and dilation."""

    weight: Tensor
    bias: Tensor
    dilation: int = 1

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        self.bias = as_tensor(self.bias)
        w = self.weight.shape
        if len(w) not in (5, 6):
            raise ShapeError(f"kernel weight must be rank 5 or 6, got shape {w}")
        k = w[-1]
        if w[-3:] != (k, k, k) or k % 2 == 0:
            raise ShapeError(f"kernel must be cubic with odd size, got {w[-3:]}")
        if self.bias.shape != w[:-4]:
            raise ShapeError(f"bias shape {self.bias.shape} does not match output channels {w[:-4]}")
        if int(self.dilation) < 1:
            raise ValueError("dilation must be a positive integer")
        self.dilation = int(self.dilation)

    @property
    def k(self):
        return self.weight.shape[-1]

    @property
    def c_out(self):
        return self.weight.shape[-5]

    @property
    def c_in(self):
        return self.weight.shape[-4]

    @property
    def groups(self):
        return self.weight.shape[0] if self.weight.ndim == 6 else 1


def _as_bank(kernels_):
    if isinstance(kernels_, ConvKernel):
        if kernels_.weight.ndim != 6:
            raise ShapeError("expected a kernel bank with a leading branch axis")
        return kernels_
    kernels_ = list(kernels_)
    dil = {kk.dilation for kk in kernels_}
    ks = {kk.weight.shape for kk in kernels_}
    if len(dil) != 1 or len(ks) != 1:
        raise ShapeError("all kernels in a bank must share shape and dilation")
    return ConvKernel(
        np.stack([kk.weight.data for kk in kernels_]),
        np.stack([kk.bias.data for kk in kernels_]),
        dil.pop(),
    )


def grouped_conv3d(x, weight, bias, dilation=1):
    """Independent same-padded convolutions, one per group.

    ``x`` is ``(B, G, C_in, D, H, W)``, ``weight`` ``(G, C_out, C_in, k, k, k)``
    and ``bias`` ``(G, C_out)``.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 6:
        raise ShapeError(f"grouped_conv3d expects a rank-6 input, got shape {x.shape}")
    if weight.shape[0] != x.shape[1]:
        raise ShapeError(f"got {weight.shape[0]} kernel banks for {x.shape[1]} groups")
    if weight.shape[2] != x.shape[2]:
        raise ShapeError(f"channel mismatch: input has {x.shape[2]} channels, kernel expects {weight.shape[2]}")
    out = kernels.conv_forward(x.data, weight.data, bias.data, dilation)

    def grad(g):
        gx, gw, gb = kernels.conv_backward(x.data, weight.data, g, dilation, need_input_grad=x.requires_grad)
        return gx, gw, gb

    return make_node("conv3d", out, (x, weight, bias), grad)


def conv3d(x, kernel):
    """Same-padded stride-1 dilated convolution of a ``(B, C, D, H, W)`` tensor."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects a rank-5 input, got shape {x.shape}")
    if kernel.weight.ndim != 5:
        raise ShapeError("conv3d takes a single kernel, not a bank")
    if kernel.c_in != x.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]} channels, kernel expects {kernel.c_in}")
    B, C, D, H, W = x.shape
    w = reshape(kernel.weight, (1,) + kernel.weight.shape)
    b = reshape(kernel.bias, (1, kernel.c_out))
    y = grouped_conv3d(reshape(x, (B, 1, C, D, H, W)), w, b, kernel.dilation)
    return reshape(y, (B, kernel.c_out, D, H, W))


def cross_f_conv(x, kernels_):
    """Convolve across F-features inside each modality branch (block-diagonal in M)."""
    x = as_tensor(x)
    bank = _as_bank(kernels_)
    if x.ndim != 6:
        raise ShapeError(f"cross_f_conv expects a feature map (B, M, F, D, H, W), got shape {x.shape}")
    if bank.groups != x.shape[1]:
        raise ShapeError(f"cross_f_conv: {bank.groups} kernel banks for {x.shape[1]} modality branches")
    return grouped_conv3d(x, bank.weight, bank.bias, bank.dilation)


def cross_m_conv(x, kernels_):
    """Convolve across M-features separately for each F-feature (block-diagonal in F)."""
    x = as_tensor(x)
    bank = _as_bank(kernels_)
    if x.ndim != 6:
        raise ShapeError(f"cross_m_conv expects a feature map (B, M, F, D, H, W), got shape {x.shape}")
    if bank.groups != x.shape[2]:
        raise ShapeError(f"cross_m_conv: {bank.groups} kernel banks for {x.shape[2]} F-features")
    swapped = transpose(x, (0, 2, 1, 3, 4, 5))
    y = grouped_conv3d(swapped, bank.weight, bank.bias, bank.dilation)
    return transpose(y, (0, 2, 1, 3, 4, 5))


def merge(x, mode):
    """Collapse the M axis: ``average``/``maxout`` give (B,1,F,...), ``concat`` folds M into F."""
    x = as_tensor(x)
    if mode not in MERGE_MODES:
        raise ValueError(f"unknown merge mode {mode!r}; expected one of {MERGE_MODES}")
    if x.ndim != 6:
        raise ShapeError(f"merge expects a feature map (B, M, F, D, H, W), got shape {x.shape}")
    B, n, p = x.shape[:3]
    if mode == "concat":
        # modality-major: all F-features of branch 0, then branch 1, ...
        return reshape(x, (B, 1, n * p) + x.shape[3:])
    if mode == "average":
        return tmean(x, axis=1, keepdims=True)
    return tmax(x, axis=1, keepdims=True)


def residual_block(x, inner):
    """``x + inner(x)``; ``inner`` must preserve the shape of ``x``."""
    x = as_tensor(x)
    y = inner(x)
    if y.shape != x.shape:
        raise ShapeError(f"residual branch changed shape from {x.shape} to {y.shape}")
    return add(x, y)


def instance_norm(x, eps=NORM_EPS):
    """Zero-mean, unit-variance over the spatial axes, separately per (batch, M, F) channel."""
    x = as_tensor(x)
    if x.ndim != 6:
        raise ShapeError(f"instance_norm expects a feature map (B, M, F, D, H, W), got shape {x.shape}")
    axes = (3, 4, 5)
    xc = x.data - x.data.mean(axis=axes, keepdims=True)
    r = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    y = xc * r

    def grad(g):
        return (r * (g - g.mean(axis=axes, keepdims=True) - y * (g * y).mean(axis=axes, keepdims=True)),)

    return make_node("instance_norm", y, (x,), grad)


def activation(x, kind="relu"):
    if kind != "relu":
        raise ValueError(f"unknown activation {kind!r}")
    return relu(as_tensor(x))


def softmax_channels(x):
    """Softmax over axis 1 of a ``(B, C, ...)`` tensor, computed max-shifted."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs at least 2 channels, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return make_node("softmax", y, (x,), grad)
