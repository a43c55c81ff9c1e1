"""Parameter initialization and forward evaluation of an :class:`ArchSpec`."""
import numpy as np

from . import layers as L
from .arch import CONV_KINDS, MERGE_KINDS, layer_param_count
from .numerics import Tensor, reshape


def _param_layers(layers, n, p, prefix=""):
    """Yield (path, layer, n_in, p_in, residual_tail) for conv-type layers in evaluation order.

    ``residual_tail`` marks the last conv-type layer inside a residual block.
    """
    convs = [i for i, layer in enumerate(layers) if layer.kind in CONV_KINDS]
    tail = convs[-1] if prefix and convs else None
    for i, layer in enumerate(layers):
        path = f"{prefix}{i}"
        if layer.kind in CONV_KINDS:
            yield path, layer, n, p, i == tail
            _, _, n, p = layer_param_count(layer, n, p)
        elif layer.kind == "residual":
            yield from _param_layers(layer.inner, n, p, path + ".")
        elif layer.kind in MERGE_KINDS:
            p = n * p if layer.kind == "merge:concat" else p
            n = 1


def param_shapes(spec):
    """Ordered mapping ``name -> shape`` of every trainable tensor."""
    shapes = {}
    for path, layer, n, p, _ in _param_layers(spec.layers, spec.n_modalities, 1):
        shapes[f"{path}.weight"], shapes[f"{path}.bias"] = param_shapes_for(layer, n, p)
    return shapes


def weight_gain(layer, w_shape):
    """Runtime He constant sqrt(2 / fan_in) applied to the stored unit-scale weights.

    Keeping the stored weights at unit scale makes a fixed Adam step move
    every layer by the same relative amount regardless of its fan-in.
    """
    return float(np.sqrt(2.0 / (w_shape[-4] * layer.k ** 3)))


def init_params(spec, rng, class_prior=None):
    """Unit-normal weights, except that the last conv of every residual block starts at zero.

    Each residual block is therefore an identity map at initialization (for
    the scalable blocks this is the cross_m layer).  Zero-initialized layers
    draw nothing from ``rng``, so two specs that differ only by cross_m blocks
    receive identical remaining weights.  Biases start at zero, except that
    ``class_prior`` (class frequencies) sets the classifier bias to its log so
    the untrained network already predicts the label distribution.
    """
    params = {}
    for path, layer, n, p, tail in _param_layers(spec.layers, spec.n_modalities, 1):
        w_shape, b_shape = param_shapes_for(layer, n, p)
        if tail:
            params[f"{path}.weight"] = np.zeros(w_shape)
        else:
            params[f"{path}.weight"] = rng.standard_normal(w_shape)
        params[f"{path}.bias"] = np.zeros(b_shape)
    if class_prior is not None:
        prior = np.asarray(class_prior, dtype=np.float64)
        if prior.shape != params[f"{path}.bias"].shape or np.any(prior <= 0):
            raise ValueError(f"class_prior must be {spec.n_classes} positive frequencies")
        params[f"{path}.bias"] = np.log(prior / prior.sum())
    return params


def param_shapes_for(layer, n, p):
    k, c = layer.k, layer.channels_out
    if layer.kind == "cross_f":
        return (n, c, p, k, k, k), (n, c)
    if layer.kind == "cross_m":
        return (p, c, n, k, k, k), (p, c)
    return (c, p, k, k, k), (c,)


def _run(layers, x, params, prefix=""):
    for i, layer in enumerate(layers):
        path = f"{prefix}{i}"
        kind = layer.kind
        if kind in CONV_KINDS:
            w = params[f"{path}.weight"]
            kernel = L.ConvKernel(w * weight_gain(layer, w.shape), params[f"{path}.bias"], layer.dilation)
            if kind == "cross_f":
                x = L.cross_f_conv(x, kernel)
            elif kind == "cross_m":
                x = L.cross_m_conv(x, kernel)
            else:
                w = reshape(kernel.weight, (1,) + kernel.weight.shape)
                b = reshape(kernel.bias, (1, kernel.c_out))
                x = L.grouped_conv3d(x, w, b, layer.dilation)
        elif kind == "residual":
            x = L.residual_block(x, lambda t, inner=layer.inner, pre=path + ".": _run(inner, t, params, pre))
        elif kind == "norm":
            x = L.instance_norm(x)
        elif kind == "activation":
            x = L.activation(x)
        elif kind in MERGE_KINDS:
            x = L.merge(x, layer.merge_mode)
        elif kind == "softmax":
            B = x.shape[0]
            x = L.softmax_channels(reshape(x, (B, x.shape[2]) + x.shape[3:]))
            x = reshape(x, (B, 1) + x.shape[1:])
    return x


def forward(spec, params, image):
    """Class probabilities ``(B, C, D, H, W)`` for images ``(B, n_modalities, D, H, W)``.

    ``params`` maps names to arrays or :class:`Tensor` values; pass Tensors
    with ``requires_grad=True`` to differentiate through the network.
    """
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim != 5 or image.shape[1] != spec.n_modalities:
        raise ValueError(
            f"expected images of shape (B, {spec.n_modalities}, D, H, W), got {image.shape}"
        )
    params = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    B = image.shape[0]
    x = reshape(image, (B, spec.n_modalities, 1) + image.shape[2:])
    x = _run(spec.layers, x, params)
    # x is (B, 1, C, D, H, W) after the merge
    return reshape(x, (B, x.shape[2]) + x.shape[3:])
