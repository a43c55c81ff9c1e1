import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def direct_conv(x, w, b, dilation):
    """Reference same-padded dilated conv by explicit loops over taps: x (C,D,H,W), w (Co,C,k,k,k)."""
    co, ci, k = w.shape[0], w.shape[1], w.shape[-1]
    r = (k // 2) * dilation
    D, H, W = x.shape[1:]
    xp = np.zeros((ci, D + 2 * r, H + 2 * r, W + 2 * r))
    xp[:, r:r + D, r:r + H, r:r + W] = x
    out = np.zeros((co, D, H, W)) + b[:, None, None, None]
    for a in range(k):
        for bb in range(k):
            for c in range(k):
                patch = xp[:, a * dilation:a * dilation + D, bb * dilation:bb * dilation + H, c * dilation:c * dilation + W]
                out += np.einsum("oi,idhw->odhw", w[:, :, a, bb, c], patch)
    return out
