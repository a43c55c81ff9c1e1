import numpy as np
import pytest

from scalenets.arch import build_variant
from scalenets.checkpoint import (
    Checkpoint, CheckpointError, checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint,
)
from scalenets.model import forward, init_params


@pytest.fixture
def ckpt():
    spec = build_variant("SN31Max2", 2, 6, 2)
    rng = np.random.default_rng(0)
    params = init_params(spec, rng)
    m = {k: rng.normal(size=v.shape) for k, v in params.items()}
    v = {k: rng.uniform(size=v.shape) for k, v in params.items()}
    return Checkpoint(spec, 17, params, m, v, 0.625, rng.uniform(size=(2, 11)).cumsum(axis=1))


def test_round_trip_exact(ckpt, tmp_path):
    path = tmp_path / "c.snck"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.arch == ckpt.arch and back.step == 17 and back.best_score == 0.625
    for k in ckpt.params:
        assert back.params[k].tobytes() == ckpt.params[k].tobytes()
        assert back.m[k].tobytes() == ckpt.m[k].tobytes()
        assert back.v[k].tobytes() == ckpt.v[k].tobytes()
    np.testing.assert_array_equal(back.scale, ckpt.scale)
    assert checkpoint_bytes(back) == path.read_bytes()
    x = np.random.default_rng(1).uniform(size=(1, 2, 6, 6, 6))
    assert forward(back.arch, back.params, x).data.tobytes() == forward(ckpt.arch, ckpt.params, x).data.tobytes()


def test_no_scale(ckpt):
    ckpt.scale = None
    assert parse_checkpoint(checkpoint_bytes(ckpt)).scale is None


def test_truncation_reports_offset(ckpt):
    buf = checkpoint_bytes(ckpt)
    with pytest.raises(CheckpointError, match="offset"):
        parse_checkpoint(buf[: len(buf) // 2])


def test_bad_magic_and_trailing_bytes(ckpt):
    buf = checkpoint_bytes(ckpt)
    with pytest.raises(CheckpointError, match="magic"):
        parse_checkpoint(b"NOPE" + buf[4:])
    with pytest.raises(CheckpointError, match="trailing"):
        parse_checkpoint(buf + b"x")


def test_missing_moment_rejected(ckpt):
    with pytest.raises(CheckpointError):
        Checkpoint(ckpt.arch, 0, ckpt.params, {}, ckpt.v, 0.0)
