import numpy as np
import pytest

from scalenets.arch import build_variant, count_params
from scalenets.model import forward, init_params, param_shapes
from scalenets.numerics import Graph, forward_eval, grad_check, tsum


def test_param_shapes_match_count():
    for v in ("SN31Ave1", "SN33Ave2", "Classic", "HeMIS-like"):
        spec = build_variant(v, 3, 6, 4)
        total = sum(int(np.prod(s)) for s in param_shapes(spec).values())
        assert total == count_params(spec).total


def test_init_is_seeded_and_cross_m_starts_at_zero():
    spec = build_variant("SN33Ave2", 4, 6, 4)
    a = init_params(spec, np.random.default_rng(3))
    b = init_params(spec, np.random.default_rng(3))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    # cross_m weights are (p, f, n, k, k, k) with n=4 modalities on axis 2
    cross_m = [i for i, layer in enumerate(spec.layers) if layer.kind == "residual" and layer.inner[0].kind == "cross_m"]
    assert len(cross_m) == 2
    assert all(not np.any(a[f"{i}.0.weight"]) for i in cross_m)
    assert all(not np.any(a[k]) for k in a if k.endswith(".bias"))


def test_residual_blocks_start_as_identity():
    spec = build_variant("SN31Ave2", 2, 3, 2)
    params = init_params(spec, np.random.default_rng(0))
    tails = [k for k in params if k.endswith(".weight") and k.count(".") == 2 and not np.any(params[k])]
    # every residual block has its last conv zeroed
    n_blocks = sum(1 for layer in spec.layers if layer.kind == "residual")
    assert len(tails) == n_blocks


def test_forward_probabilities(rng):
    spec = build_variant("SN31Max2", 2, 4, 2)
    params = init_params(spec, rng)
    p = forward(spec, params, rng.uniform(size=(2, 2, 6, 6, 6))).data
    assert p.shape == (2, 4, 6, 6, 6)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


def test_forward_rejects_wrong_modalities(rng):
    spec = build_variant("SN31Ave1", 3, 6, 2)
    with pytest.raises(ValueError, match="modalities|shape"):
        forward(spec, init_params(spec, rng), np.zeros((1, 2, 4, 4, 4)))


def _cross_m_path(spec):
    i = next(i for i, layer in enumerate(spec.layers) if layer.kind == "residual" and layer.inner[0].kind == "cross_m")
    return f"{i}.0"


def test_hemis_equivalence_at_init(rng):
    sn = build_variant("SN31Ave1", 2, 6, 2)
    he = build_variant("HeMIS-like", 2, 6, 2)
    ps = init_params(sn, np.random.default_rng(9))
    ph = init_params(he, np.random.default_rng(9))
    cm = _cross_m_path(sn)
    nonzero_sn = [k for k in param_shapes(sn) if not k.startswith(cm + ".")]
    assert [ps[k].shape for k in nonzero_sn] == [v.shape for v in ph.values()]
    for k_sn, k_he in zip(nonzero_sn, ph):
        np.testing.assert_array_equal(ps[k_sn], ph[k_he])
    x = rng.uniform(size=(1, 2, 6, 6, 6))
    assert forward(sn, ps, x).data.tobytes() == forward(he, ph, x).data.tobytes()


def test_network_grad_check_on_small_parameter(rng):
    spec = build_variant("SN31Ave1", 2, 3, 1)
    params = init_params(spec, rng)
    cm = _cross_m_path(spec) + ".weight"
    params[cm] = rng.normal(size=params[cm].shape)
    x = rng.uniform(size=(1, 2, 4, 4, 4))
    small = {k: v for k, v in params.items() if k in (cm, "0.weight")}
    fixed = {k: v for k, v in params.items() if k not in small}

    def fn(x, **p):
        return tsum(forward(spec, {**fixed, **p}, x) * np.linspace(0, 1, 3)[None, :, None, None, None])

    g = Graph(fn, {"x": x.shape}, small)
    forward_eval(g, {"x": x})
    for name in small:
        assert grad_check(g, name) <= 1e-5


def test_class_prior_sets_classifier_bias():
    spec = build_variant("SN31Ave1", 2, 6, 2)
    prior = np.array([0.5, 0.3, 0.05, 0.05, 0.05, 0.05])
    params = init_params(spec, np.random.default_rng(0), class_prior=prior)
    plain = init_params(spec, np.random.default_rng(0))
    last = list(param_shapes(spec))[-1]
    np.testing.assert_allclose(params[last], np.log(prior))
    for k in plain:
        if k != last:
            np.testing.assert_array_equal(params[k], plain[k])
    with pytest.raises(ValueError):
        init_params(spec, np.random.default_rng(0), class_prior=np.ones(5))
