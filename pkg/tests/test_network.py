"""Unrolled network blocks: shrinkage, descent step, transforms, stages."""

import numpy as np
import pytest

from unrollpr.cdp import MaskSet, OperatorParams, make_cdp_masks, measure
from unrollpr.field import SeededRng
from unrollpr.network import (
    ConvStack,
    StageParams,
    init_net,
    net_forward,
    ppm_forward,
    sgd_step,
    soft_threshold,
    softplus,
    transform_forward,
    transform_inverse,
)


def _zero_stage(h, w, channels=2, mode="fixed", thresh_raw=0.0, step=0.01):
    net = init_net(h, w, num_stages=1, channels=channels, num_masks=1,
                   mode=mode, rng=SeededRng(0))
    st = net.stages[0]
    for blk in (st.ana, st.syn):
        blk.w1[...] = 0
        blk.b1[...] = 0
        blk.w2[...] = 0
        blk.b2[...] = 0
    st.thresh_raw[...] = thresh_raw
    st.step_size[...] = step
    return st


# ---------------------------------------------------------------------------
# soft threshold

def test_soft_threshold_shrinks():
    assert soft_threshold(2.0, 0.5) == 1.5


def test_soft_threshold_dead_zone():
    assert soft_threshold(-0.3, 0.5) == 0.0


def test_soft_threshold_zero_tau_is_identity():
    z = SeededRng(1).normal(50)
    assert np.array_equal(soft_threshold(z, 0.0), z)


def test_soft_threshold_negative_tau_rejected():
    with pytest.raises(ValueError):
        soft_threshold(np.ones(3), -0.1)


def test_soft_threshold_nonexpansive():
    rng = SeededRng(2)
    for _ in range(20):
        a = rng.normal(30)
        b = rng.normal(30)
        tau = rng.uniform(1)[0] * 2
        lhs = np.linalg.norm(soft_threshold(a, tau) - soft_threshold(b, tau))
        assert lhs <= np.linalg.norm(a - b) + 1e-12


def test_soft_threshold_is_prox_of_l1():
    # brute-force the scalar prox objective 0.5(u-z)^2 + tau|u| on a grid
    rng = SeededRng(3)
    for _ in range(10):
        z = float(rng.normal(1)[0]) * 2
        tau = float(rng.uniform(1)[0]) * 1.5
        grid = np.linspace(-5, 5, 20001)  # resolution 5e-4
        obj = 0.5 * (grid - z) ** 2 + tau * np.abs(grid)
        best = grid[np.argmin(obj)]
        assert abs(float(soft_threshold(z, tau)) - best) <= 5.01e-4


# ---------------------------------------------------------------------------
# descent step

def test_sgd_step_scalar_case():
    # 1x1 image,dense transform [1], mask 1: r = 2 - 0.5*(2 - 1*(2/2)) = 1.5
    mask = MaskSet(masks=np.ones((1, 1, 1), dtype=np.complex128))
    stage = StageParams(
        step_size=np.array(0.5), thresh_raw=np.array(0.0),
        op=OperatorParams.dense(1, 1),
        ana=ConvStack(*(np.zeros(s) for s in ((1, 1, 3, 3), 1, (1, 1, 3, 3), 1))),
        syn=ConvStack(*(np.zeros(s) for s in ((1, 1, 3, 3), 1, (1, 1, 3, 3), 1))),
    )
    x = np.array([[2.0]])
    y = np.array([[[1.0]]])
    r = sgd_step(x, stage, y, mask)
    assert abs(r[0, 0] - 1.5) <= 1e-15


def test_sgd_step_consistent_point_is_fixed():
    ms = make_cdp_masks(SeededRng(10), 4, 8, 8)
    x = SeededRng(11).uniform(64).reshape(8, 8) + 0.1
    y = measure(x, ms, 0.0, SeededRng(12))
    for t in (0.01, 0.5, 2.0):
        st = _zero_stage(8, 8, step=t)
        r = sgd_step(x, st, y.values, ms)
        assert np.max(np.abs(r - x)) <= 1e-12


def test_sgd_step_zero_step_is_identity():
    ms = make_cdp_masks(SeededRng(13), 4, 8, 8)
    x = SeededRng(14).uniform(64).reshape(8, 8)
    y = measure(x, ms, 27.0, SeededRng(15))
    st = _zero_stage(8, 8, step=0.0)
    assert np.array_equal(sgd_step(x, st, y.values, ms), x)


# ---------------------------------------------------------------------------
# transforms

def _conv_brute(x, w, b):
    # naive sliding-window convolution oracle, zero padding, 3x3
    co, ci, _, _ = w.shape
    h, ww = x.shape[1], x.shape[2]
    out = np.zeros((co, h, ww))
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    for o in range(co):
        for r in range(h):
            for c in range(ww):
                acc = 0.0
                for i in range(ci):
                    for dr in range(3):
                        for dc in range(3):
                            acc += xp[i, r + dr, c + dc] * w[o, i, dr, dc]
                out[o, r, c] = acc + b[o]
    return out


def test_transform_forward_zero_weights():
    st = _zero_stage(4, 4)
    out = transform_forward(np.ones((4, 4)), st.ana)
    assert out.shape == (2, 4, 4)
    assert np.all(out == 0)


def test_transform_forward_identity_kernel():
    # center-tap kernels pass nonnegative images through unchanged
    stack = ConvStack(
        w1=np.zeros((1, 1, 3, 3)), b1=np.zeros(1),
        w2=np.zeros((1, 1, 3, 3)), b2=np.zeros(1),
    )
    stack.w1[0, 0, 1, 1] = 1.0
    stack.w2[0, 0, 1, 1] = 1.0
    r = SeededRng(20).uniform(16).reshape(4, 4)  # nonnegative
    out = transform_forward(r, stack)
    assert np.allclose(out[0], r, atol=1e-15)


def test_transform_forward_matches_brute_force():
    rng = SeededRng(21)
    stack = ConvStack(
        w1=rng.normal(2 * 1 * 9).reshape(2, 1, 3, 3), b1=rng.normal(2),
        w2=rng.normal(2 * 2 * 9).reshape(2, 2, 3, 3), b2=rng.normal(2),
    )
    r = rng.uniform(16).reshape(4, 4)
    out = transform_forward(r, stack)
    mid = np.maximum(_conv_brute(r[None], stack.w1, stack.b1), 0.0)
    ref = _conv_brute(mid, stack.w2, stack.b2)
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_transform_inverse_zero_weights():
    st = _zero_stage(4, 4)
    out = transform_inverse(np.ones((2, 4, 4)), st.syn)
    assert out.shape == (4, 4)
    assert np.all(out == 0)


def test_transform_inverse_zero_input_zero_bias():
    rng = SeededRng(22)
    stack = ConvStack(
        w1=rng.normal(2 * 2 * 9).reshape(2, 2, 3, 3), b1=np.zeros(2),
        w2=rng.normal(1 * 2 * 9).reshape(1, 2, 3, 3), b2=np.zeros(1),
    )
    out = transform_inverse(np.zeros((2, 4, 4)), stack)
    assert np.all(out == 0)


def test_transform_inverse_matches_brute_force():
    rng = SeededRng(23)
    stack = ConvStack(
        w1=rng.normal(2 * 2 * 9).reshape(2, 2, 3, 3), b1=rng.normal(2),
        w2=rng.normal(1 * 2 * 9).reshape(1, 2, 3, 3), b2=rng.normal(1),
    )
    code = rng.normal(2 * 16).reshape(2, 4, 4)
    out = transform_inverse(code, stack)
    mid = np.maximum(_conv_brute(code, stack.w1, stack.b1), 0.0)
    ref = _conv_brute(mid, stack.w2, stack.b2)[0]
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_transform_channel_mismatch_rejected():
    st = _zero_stage(4, 4)
    with pytest.raises(ValueError):
        transform_forward(np.ones((4, 4)), st.syn)  # syn expects c channels
    with pytest.raises(ValueError):
        transform_inverse(np.ones((3, 4, 4)), st.syn)  # stack built for c=2


# ---------------------------------------------------------------------------
# proximal projection

def test_ppm_zero_weights_is_identity():
    st = _zero_stage(8, 8)
    r = SeededRng(30).uniform(64).reshape(8, 8)
    assert np.array_equal(ppm_forward(r, st), r)


def test_ppm_saturated_threshold_is_identity():
    net = init_net(8, 8, num_stages=1, channels=4, num_masks=1,
                   mode="fixed", rng=SeededRng(31))
    st = net.stages[0]
    st.thresh_raw[...] = 1000.0  # tau so large every feature is shrunk away
    r = SeededRng(32).uniform(64).reshape(8, 8)
    assert np.allclose(ppm_forward(r, st), r, atol=1e-15)


def test_ppm_matches_hand_composition():
    net = init_net(2, 2, num_stages=1, channels=1, num_masks=1,
                   mode="fixed", rng=SeededRng(33))
    st = net.stages[0]
    st.thresh_raw[...] = np.log(np.expm1(0.1))  # tau = 0.1
    st.ana.b1[...] = 0.05
    st.syn.b1[...] = -0.02
    r = np.array([[0.3, 0.8], [0.1, 0.6]])
    tau = float(softplus(st.thresh_raw))
    expected = r + transform_inverse(
        soft_threshold(transform_forward(r, st.ana), tau), st.syn
    )
    assert np.max(np.abs(ppm_forward(r, st) - expected)) <= 1e-14
    assert abs(tau - 0.1) <= 1e-12


# ---------------------------------------------------------------------------
# full forward

def test_net_forward_zero_transforms_is_pure_descent():
    net = init_net(8, 8, num_stages=3, channels=2, num_masks=4,
                   mode="fixed", rng=SeededRng(40))
    for st in net.stages:
        for blk in (st.ana, st.syn):
            blk.w1[...] = 0
            blk.w2[...] = 0
    ms = make_cdp_masks(SeededRng(41), 4, 8, 8)
    truth = SeededRng(42).uniform(64).reshape(8, 8)
    y = measure(truth, ms, 27.0, SeededRng(43))
    out, _ = net_forward(y, ms, net)
    x = np.ones((8, 8))
    for st in net.stages:
        x = sgd_step(x, st, y.values, ms)
    assert np.max(np.abs(out - x)) <= 1e-13


def test_net_forward_consistent_start_is_fixed_point():
    net = init_net(8, 8, num_stages=5, channels=2, num_masks=4,
                   mode="fixed", rng=SeededRng(44))
    for st in net.stages:
        for blk in (st.ana, st.syn):
            blk.w1[...] = 0
            blk.w2[...] = 0
        st.step_size[...] = 0.7
    ms = make_cdp_masks(SeededRng(45), 4, 8, 8)
    truth = SeededRng(46).uniform(64).reshape(8, 8) + 0.1
    y = measure(truth, ms, 0.0, SeededRng(47))
    out, _ = net_forward(y, ms, net, x0=truth)
    assert np.max(np.abs(out - truth)) <= 1e-11


def test_net_forward_scalar_chain():
    # one stage, 1x1: descent example composed with an identity projection
    mask = MaskSet(masks=np.ones((1, 1, 1), dtype=np.complex128))
    net = init_net(1, 1, num_stages=1, channels=1, num_masks=1,
                   mode="dense", rng=SeededRng(48))
    st = net.stages[0]
    st.step_size[...] = 0.5
    for blk in (st.ana, st.syn):
        blk.w1[...] = 0
        blk.w2[...] = 0
    out, _ = net_forward(np.array([[[1.0]]]), mask, net, x0=np.array([[2.0]]))
    assert abs(out[0, 0] - 1.5) <= 1e-15


def test_net_forward_shape_and_finiteness():
    for s in range(100):
        net = init_net(8, 8, num_stages=7, channels=8, num_masks=4,
                       rng=SeededRng(1000 + s))
        ms = make_cdp_masks(SeededRng(2000 + s), 4, 8, 8)
        truth = SeededRng(3000 + s).uniform(64).reshape(8, 8)
        y = measure(truth, ms, [9.0, 27.0, 81.0][s % 3], SeededRng(4000 + s))
        out, _ = net_forward(y, ms, net)
        assert out.shape == (8, 8)
        assert np.all(np.isfinite(out))


def test_net_forward_batched_matches_single():
    net = init_net(8, 8, num_stages=2, channels=2, num_masks=2,
                   rng=SeededRng(50))
    ms1 = make_cdp_masks(SeededRng(51), 2, 8, 8)
    ms2 = make_cdp_masks(SeededRng(52), 2, 8, 8)
    t1 = SeededRng(53).uniform(64).reshape(8, 8)
    t2 = SeededRng(54).uniform(64).reshape(8, 8)
    y1 = measure(t1, ms1, 27.0, SeededRng(55))
    y2 = measure(t2, ms2, 27.0, SeededRng(56))
    ys = np.stack([y1.values, y2.values])
    msb = np.stack([ms1.masks, ms2.masks])
    batch, _ = net_forward(ys, msb, net)
    a, _ = net_forward(y1, ms1, net)
    b, _ = net_forward(y2, ms2, net)
    assert np.max(np.abs(batch[0] - a)) <= 1e-13
    assert np.max(np.abs(batch[1] - b)) <= 1e-13


def test_net_forward_rejects_mismatched_shapes():
    net = init_net(8, 8, num_stages=1, channels=2, num_masks=4,
                   rng=SeededRng(57))
    ms = make_cdp_masks(SeededRng(58), 4, 8, 8)
    with pytest.raises(ValueError):
        net_forward(np.zeros((2, 8, 8)), ms, net)  # J mismatch
    with pytest.raises(ValueError):
        net_forward(np.zeros((4, 4, 4)), ms, net)  # spatial mismatch
