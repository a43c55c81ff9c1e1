"""Declarative architecture descriptions and their static analysis.

An :class:`ArchSpec` is a flat, ordered list of :class:`LayerSpec` values
with exactly one merge layer.  Layers before the merge form the
modality-dependent backend; the trailing standard frontend (see
:func:`build_frontend`) is shared verbatim by every named variant.
"""
import json
import re
from dataclasses import dataclass, field

__all__ = [
    "LayerSpec",
    "ArchSpec",
    "ArchSpecError",
    "VARIANTS",
    "build_variant",
    "build_frontend",
    "count_params",
    "layer_param_count",
    "receptive_field",
    "ParamItem",
    "ParamCount",
]

VARIANTS = ("SN31Ave1", "SN31Ave2", "SN31Ave3", "SN33Ave2", "SN31Max2", "HeMIS-like", "Classic")

CONV_KINDS = ("conv", "cross_f", "cross_m")
MERGE_KINDS = ("merge:concat", "merge:average", "merge:maxout")
KINDS = CONV_KINDS + MERGE_KINDS + ("residual", "norm", "activation", "softmax")

# number of dilation-1 residual blocks in the backend; SN blocks attach to the first B of them
_D1_BLOCKS = 3


class ArchSpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    k: int = 1
    dilation: int = 1
    channels_out: int = 0
    inner: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArchSpecError(f"unknown layer kind {self.kind!r}")
        if self.k < 1 or self.k % 2 == 0:
            raise ArchSpecError(f"kernel size must be odd and positive, got {self.k}")
        if self.dilation < 1:
            raise ArchSpecError(f"dilation must be positive, got {self.dilation}")
        if self.kind in CONV_KINDS and self.channels_out < 1:
            raise ArchSpecError(f"{self.kind} layer needs channels_out >= 1")
        if self.kind == "residual":
            if not self.inner:
                raise ArchSpecError("residual layer needs a non-empty inner sequence")
            object.__setattr__(self, "inner", tuple(self.inner))
        elif self.inner:
            raise ArchSpecError(f"only residual layers carry an inner sequence, not {self.kind}")

    @property
    def merge_mode(self):
        return self.kind.split(":", 1)[1] if self.kind in MERGE_KINDS else None

    def to_dict(self):
        d = {"kind": self.kind, "k": self.k, "dilation": self.dilation, "channels_out": self.channels_out}
        if self.kind == "residual":
            d["inner"] = [layer.to_dict() for layer in self.inner]
        return d

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ArchSpecError(f"layer must be an object, got {type(d).__name__}")
        allowed = {"kind", "k", "dilation", "channels_out", "inner"}
        unknown = set(d) - allowed
        if unknown:
            raise ArchSpecError(f"unknown layer fields {sorted(unknown)}")
        missing = {"kind", "k", "dilation", "channels_out"} - set(d)
        if missing:
            raise ArchSpecError(f"missing layer fields {sorted(missing)}")
        for key in ("k", "dilation", "channels_out"):
            if not isinstance(d[key], int) or isinstance(d[key], bool):
                raise ArchSpecError(f"layer field {key!r} must be an integer")
        inner = tuple(cls.from_dict(x) for x in d.get("inner", ()))
        return cls(d["kind"], d["k"], d["dilation"], d["channels_out"], inner)


def _conv(k, channels, dilation=1):
    return LayerSpec("conv", k, dilation, channels)


def _cross_f(k, channels):
    return LayerSpec("cross_f", k, 1, channels)


def _cross_m(k, channels):
    return LayerSpec("cross_m", k, 1, channels)


NORM = LayerSpec("norm")
ACT = LayerSpec("activation")
SOFTMAX = LayerSpec("softmax")


def _residual(*inner):
    return LayerSpec("residual", inner=tuple(inner))


def build_frontend(n_classes, f_width):
    """Modality-agnostic layers shared by every variant."""
    if f_width < 1:
        raise ArchSpecError("f_width must be >= 1")
    w2, w4 = 2 * f_width, 4 * f_width
    layers = []
    for _ in range(3):
        layers += [_residual(_conv(3, w2, 2), NORM, ACT, _conv(3, w2, 2)), NORM, ACT]
    layers += [_conv(1, w4), NORM, ACT]
    for _ in range(3):
        layers += [_residual(_conv(3, w4, 4), NORM, ACT, _conv(3, w4, 4)), NORM, ACT]
    layers += [_conv(1, n_classes), SOFTMAX]
    return tuple(layers)


@dataclass(frozen=True)
class ArchSpec:
    name: str
    n_modalities: int
    n_classes: int
    f_width: int
    layers: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.n_modalities < 1 or self.n_classes < 1 or self.f_width < 1:
            raise ArchSpecError("n_modalities, n_classes and f_width must be positive")
        merges = [i for i, layer in enumerate(self.layers) if layer.kind in MERGE_KINDS]
        if len(merges) != 1:
            raise ArchSpecError(f"expected exactly one merge layer, found {len(merges)}")
        m = merges[0]
        for layer in _flatten(self.layers[m + 1:]):
            if layer.kind in ("cross_f", "cross_m") or layer.kind in MERGE_KINDS:
                raise ArchSpecError(f"{layer.kind} layer after the merge")
        for layer in _flatten(self.layers[:m]):
            if layer.kind == "conv":
                raise ArchSpecError("joint conv layer before the merge; use cross_f/cross_m")
        for layer in _flatten(self.frontend):
            if layer.kind in ("cross_f", "cross_m"):
                raise ArchSpecError("frontend must not contain modality-dependent layers")
        _walk(self)  # channel bookkeeping, residual shape preservation

    @property
    def merge_index(self):
        return next(i for i, layer in enumerate(self.layers) if layer.kind in MERGE_KINDS)

    @property
    def merge(self):
        return self.layers[self.merge_index].merge_mode

    @property
    def frontend_start(self):
        front = build_frontend(self.n_classes, self.f_width)
        n = len(front)
        if len(self.layers) - n > self.merge_index and self.layers[-n:] == front:
            return len(self.layers) - n
        return len(self.layers)

    @property
    def backend(self):
        """Modality-dependent layers: everything before the frontend except the merge."""
        m = self.merge_index
        return tuple(layer for i, layer in enumerate(self.layers[: self.frontend_start]) if i != m)

    @property
    def frontend(self):
        return self.layers[self.frontend_start:]

    def to_dict(self):
        return {
            "name": self.name,
            "n_modalities": self.n_modalities,
            "n_classes": self.n_classes,
            "f_width": self.f_width,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ArchSpecError("architecture must be a JSON object")
        expected = {"name", "n_modalities", "n_classes", "f_width", "layers"}
        if set(d) != expected:
            extra, missing = set(d) - expected, expected - set(d)
            raise ArchSpecError(f"bad architecture fields: unknown {sorted(extra)}, missing {sorted(missing)}")
        if not isinstance(d["name"], str):
            raise ArchSpecError("name must be a string")
        for key in ("n_modalities", "n_classes", "f_width"):
            if not isinstance(d[key], int) or isinstance(d[key], bool):
                raise ArchSpecError(f"{key} must be an integer")
        if not isinstance(d["layers"], list):
            raise ArchSpecError("layers must be a list")
        layers = tuple(LayerSpec.from_dict(x) for x in d["layers"])
        return cls(d["name"], d["n_modalities"], d["n_classes"], d["f_width"], layers)

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as err:
            raise ArchSpecError(f"invalid architecture JSON: {err}") from None
        return cls.from_dict(d)


def _flatten(layers):
    for layer in layers:
        yield layer
        if layer.kind == "residual":
            yield from _flatten(layer.inner)


_SN_NAME = re.compile(r"^SN3([13])(Ave|Max)([1-3])$")


def build_variant(name, n_modalities, n_classes, f_width=16):
    """Build one of the named model variants (see ``VARIANTS``)."""
    if n_modalities < 1 or f_width < 1:
        raise ArchSpecError("n_modalities and f_width must be positive")
    fw, n = f_width, n_modalities
    if name == "Classic":
        width = n * fw
        backend = [LayerSpec("merge:concat"), _conv(3, width), NORM, ACT]
        for _ in range(_D1_BLOCKS):
            backend += [_residual(_conv(3, width), NORM, ACT, _conv(3, width)), NORM, ACT]
        backend += [_conv(1, 2 * fw), NORM, ACT]
        return ArchSpec(name, n, n_classes, fw, tuple(backend) + build_frontend(n_classes, fw))

    if name == "HeMIS-like":
        m_kernel, mode, blocks = None, "average", 0
    else:
        match = _SN_NAME.match(name)
        if not match:
            raise ArchSpecError(f"unknown variant {name!r}; expected one of {VARIANTS}")
        m_kernel = int(match.group(1))
        mode = "average" if match.group(2) == "Ave" else "maxout"
        blocks = int(match.group(3))

    backend = [_cross_f(3, fw), NORM, ACT]
    for i in range(_D1_BLOCKS):
        backend += [_residual(_cross_f(3, fw), NORM, ACT, _cross_f(3, fw)), NORM, ACT]
        if i < blocks:
            backend.append(_residual(_cross_m(m_kernel, n)))
    backend += [_cross_f(1, 2 * fw), NORM, ACT, LayerSpec(f"merge:{mode}")]
    return ArchSpec(name, n, n_classes, fw, tuple(backend) + build_frontend(n_classes, fw))


# ---------------------------------------------------------------------------
# static analysis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamItem:
    path: str
    kind: str
    section: str
    weights: int
    biases: int

    @property
    def total(self):
        return self.weights + self.biases


@dataclass(frozen=True)
class ParamCount:
    items: tuple

    @property
    def weights(self):
        return sum(i.weights for i in self.items)

    @property
    def biases(self):
        return sum(i.biases for i in self.items)

    @property
    def total(self):
        return self.weights + self.biases

    def section_total(self, section):
        return sum(i.total for i in self.items if i.section == section)


def layer_param_count(layer, n, p):
    """(weights, biases, n_out, p_out) for one conv-type layer on an (n, p) feature map."""
    k3 = layer.k ** 3
    c = layer.channels_out
    if layer.kind == "cross_f":
        return n * c * p * k3, n * c, n, c
    if layer.kind == "cross_m":
        return p * c * n * k3, p * c, c, p
    if layer.kind == "conv":
        if n != 1:
            raise ArchSpecError(f"joint conv needs a merged map (n == 1), got n = {n}")
        return c * p * k3, c, 1, c
    raise ArchSpecError(f"{layer.kind} has no parameters")


def _walk_layers(layers, n, p, prefix, section_of, visit):
    for i, layer in enumerate(layers):
        path = f"{prefix}{i}"
        if layer.kind in CONV_KINDS:
            w, b, n2, p2 = layer_param_count(layer, n, p)
            visit(path, layer, section_of(i), n, p, w, b)
            n, p = n2, p2
        elif layer.kind == "residual":
            n2, p2 = _walk_layers(layer.inner, n, p, path + ".", lambda _: section_of(i), visit)
            if (n2, p2) != (n, p):
                raise ArchSpecError(f"residual {path} changes (M, F) from {(n, p)} to {(n2, p2)}")
        elif layer.kind in MERGE_KINDS:
            p = n * p if layer.kind == "merge:concat" else p
            n = 1
        elif layer.kind == "softmax" and p < 2:
            raise ArchSpecError(f"softmax at {path} needs at least 2 channels, got {p}")
    return n, p


def _walk(spec, visit=None, input_features=1):
    visit = visit or (lambda *a: None)
    m, front = spec.merge_index, spec.frontend_start

    def section_of(i):
        if i < m:
            return "backend"
        if i == m:
            return "merge"
        return "frontend" if i >= front else "backend"

    return _walk_layers(spec.layers, spec.n_modalities, input_features, "", section_of, visit)


def count_params(spec, input_features=1):
    """Itemized weight and bias counts of every conv-type layer in ``spec``."""
    items = []

    def visit(path, layer, section, n, p, w, b):
        items.append(ParamItem(path, layer.kind, section, w, b))

    _walk(spec, visit, input_features)
    return ParamCount(tuple(items))


def _rf_extent(layers):
    total = 0
    for layer in layers:
        if layer.kind in CONV_KINDS:
            total += (layer.k - 1) * layer.dilation
        elif layer.kind == "residual":
            # skip path has extent 0, so the conv path is the deepest
            total += max(_rf_extent(layer.inner), 0)
    return total


def receptive_field(spec):
    """Receptive field (voxels per axis) of a stride-1 same-padded network."""
    layers = spec.layers if isinstance(spec, ArchSpec) else tuple(spec)
    r = 1 + _rf_extent(layers)
    return (r, r, r)
