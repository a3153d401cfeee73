import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240117)


def conv2d_reference(x, w, stride=(1, 1), pad=(0, 0), group=1, bias=None,
                     relu=False):
    """Naive NCHW convolution oracle: explicit loops over output pixels.

    Deliberately independent of the engine's kernels; used as ground truth.
    """
    n, c, h, wd = x.shape
    out_c, icg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    ocg = out_c // group
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    oh, ow = max(oh, 0), max(ow, 0)
    xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=np.float64)
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    y = np.zeros((n, out_c, oh, ow), dtype=np.float64)
    for img in range(n):
        for o in range(out_c):
            g = o // ocg
            xg = xp[img, g * icg:(g + 1) * icg]
            for i in range(oh):
                for j in range(ow):
                    patch = xg[:, i * sh:i * sh + kh, j * sw:j * sw + kw]
                    y[img, o, i, j] = np.sum(patch * w[o])
    if bias is not None:
        y += bias.reshape(1, out_c, 1, 1)
    if relu:
        y = np.maximum(y, 0.0)
    return y


def valid_corr2d(x, w):
    """Direct valid 2-d correlation (no kernel flip), float64."""
    k = w.shape[0]
    n = x.shape[0] - k + 1
    y = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(n):
            y[i, j] = np.sum(x[i:i + k, j:j + k] * w)
    return y


def rel_err(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = np.max(np.abs(want)) + 1e-12
    return float(np.max(np.abs(got - want)) / scale) if got.size else 0.0
