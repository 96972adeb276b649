"""Zero-padded 3x3 convolutions with explicit backward passes.

Layout is (batch, channels, h, w) throughout, weights are
(c_out, c_in, 3, 3), and padding keeps spatial size fixed.  Forward and
backward are both einsum contractions over sliding windows, so nothing
here allocates more than the padded activations.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x):
    # (B, C, H, W) -> view (B, C, H, W, 3, 3) over the zero-padded array
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(xp, (3, 3), axis=(-2, -1))


def conv2d_fwd(x, w, b):
    """y[b,o] = sum_c x[b,c] * w[o,c] + b[o], same-size output."""
    win = _windows(x)
    y = np.einsum("bchwij,ocij->bohw", win, w, optimize=True) + b[:, None, None]
    return y, (x, w)


def conv2d_bwd(dy, cache):
    """Returns (dx, dw, db) for the cached forward call."""
    x, w = cache
    db = dy.sum(axis=(0, 2, 3))
    dw = np.einsum("bchwij,bohw->ocij", _windows(x), dy, optimize=True)
    # transposed conv: correlate dy with the 180-degree rotated kernels
    dx = np.einsum(
        "bohwij,ocij->bchw", _windows(dy), w[:, :, ::-1, ::-1], optimize=True
    )
    return dx, dw, db


def xavier_conv_weight(rng, c_out, c_in, k=3):
    """Uniform init on [-a, a], a = sqrt(6 / (fan_in + fan_out))."""
    fan_in = c_in * k * k
    fan_out = c_out * k * k
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    u = rng.uniform(c_out * c_in * k * k).reshape(c_out, c_in, k, k)
    return limit * (2.0 * u - 1.0)
