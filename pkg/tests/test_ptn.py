import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import store_from, tiny_ptn
from ptnlab import autodiff as ad
from ptnlab import ptn as P

W2 = P.IntensityWindow(0.0, 1.0, 2)


def h_oracle(x, S, u, v, K):
    """Literal three-branch evaluation, one pixel at a time."""
    t = (v - u) / K
    out = np.empty_like(np.asarray(x, dtype=float))
    for i, xi in np.ndenumerate(np.asarray(x, dtype=float)):
        if xi < u:
            out[i] = u + S[0] * (xi - u)
        elif xi >= v:
            out[i] = u + sum(S[l] * t for l in range(1, K + 1)) + S[K + 1] * (xi - v)
        else:
            k = min(int(math.floor((xi - u) / t)) + 1, K)
            lo = u + (k - 1) * t
            out[i] = u + sum(S[l] * t for l in range(1, k)) + S[k] * (xi - lo)
    return out


def test_worked_example_k2():
    S = np.array([2.0, 1.0, 2.0, 1.0])
    x = np.array([-0.25, 0.25, 0.75, 1.25])
    np.testing.assert_allclose(P.apply_h(x, S, W2), [-0.5, 0.25, 1.0, 1.75], rtol=0, atol=1e-12)


def test_worked_example_gradient():
    S = np.array([2.0, 1.0, 2.0, 1.0])
    gs, gx = P.h_backward(np.ones(1), np.array([0.75]), S, W2)
    np.testing.assert_allclose(gs, [0.0, 0.5, 0.25, 0.0], atol=1e-12)
    assert gx[0] == 2.0


def test_boundary_value_from_both_branches():
    S = np.array([2.0, 1.0, 2.0, 1.0])
    # T_1 formula at its right end and T_2 formula at its left end
    left = 0.0 + S[1] * 0.5
    right = 0.0 + S[1] * 0.5 + S[2] * 0.0
    assert P.apply_h(np.array([0.5]), S, W2)[0] == pytest.approx(left) == pytest.approx(right)


@pytest.mark.parametrize("seed", range(5))
def test_matches_branch_oracle(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 12))
    u = float(rng.uniform(-1, 0.5))
    v = u + float(rng.uniform(0.2, 3))
    S = rng.uniform(0.01, 3, K + 2)
    x = rng.uniform(u - 1, v + 1, size=(7, 9))
    np.testing.assert_allclose(P.apply_h(x, S, P.IntensityWindow(u, v, K)), h_oracle(x, S, u, v, K),
                               rtol=0, atol=1e-12)


@given(st.integers(1, 16), st.floats(-5, 5), st.floats(0.01, 10),
       st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=40))
def test_identity_at_unit_slopes_is_exact(K, u, width, xs):
    x = np.array(xs)
    out = P.apply_h(x, np.ones(K + 2), P.IntensityWindow(u, u + width, K))
    assert np.array_equal(out, x)


@pytest.mark.parametrize("K", [1, 2, 5, 10])
def test_continuity_at_boundaries(K):
    rng = np.random.default_rng(K)
    w = P.IntensityWindow(-0.3, 1.7, K)
    for _ in range(20):
        S = rng.uniform(0.01, 4, K + 2)
        for b in w.boundaries():
            lo, hi = P.apply_h(np.array([b - 1e-12, b]), S, w)
            assert abs(hi - lo) <= 1e-9


def test_strict_monotonicity_many_slope_sets():
    rng = np.random.default_rng(7)
    eps = 1e-2
    for _ in range(1000):
        K = int(rng.integers(1, 12))
        w = P.IntensityWindow(0.0, 1.0, K)
        S = eps + rng.exponential(1.0, K + 2)
        x = np.sort(rng.uniform(-0.5, 1.5, 64))
        x = x[np.diff(x, prepend=-np.inf) > 0]
        assert np.all(np.diff(P.apply_h(x, S, w)) > 0)


def test_slope_count_mismatch_raises():
    with pytest.raises(ValueError):
        P.apply_h(np.zeros(3), np.ones(5), W2)


def test_window_validation():
    with pytest.raises(ValueError):
        P.IntensityWindow(1.0, 1.0, 3)
    with pytest.raises(ValueError):
        P.IntensityWindow(0.0, 1.0, 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_h_op_gradients(seed):
    rng = np.random.default_rng(seed)
    K = 4
    x = rng.uniform(-0.4, 1.4, (2, 5, 5))
    # keep probes off the boundaries, where h is not differentiable in x
    t = 0.25
    frac = np.mod(x / t, 1.0)
    x = np.where((frac < 1e-3) | (frac > 1 - 1e-3), x + 0.01, x)
    S = rng.uniform(0.2, 2.0, (2, K + 2))
    err = ad.grad_check(lambda x, s: P.h_op(x, s, np.zeros(2), np.ones(2), K), {"x": x, "s": S}, seed=seed)
    assert max(err.values()) < 1e-4


def test_h_op_matches_apply_h_per_image(rng):
    x = rng.uniform(-0.2, 1.2, (3, 4, 4))
    S = rng.uniform(0.1, 2, (3, 6))
    u = np.array([0.0, -0.1, 0.2])
    v = np.array([1.0, 0.9, 1.5])
    out = P.h_op(x, S, u, v, 4).data
    for i in range(3):
        np.testing.assert_array_equal(out[i], P.apply_h(x[i], S[i], P.IntensityWindow(u[i], v[i], 4)))


def test_hinge_examples():
    assert P.hinge_regularizer(np.ones(5), 0.01, 1.0)[0] == 0.0
    pen, grad = P.hinge_regularizer(np.array([1, 1, -0.5, 1]), 0.01, 1.0)
    assert pen == pytest.approx(0.51, abs=1e-12)
    np.testing.assert_array_equal(grad, [0, 0, -1, 0])


def test_printed_hinge_never_positive():
    S = np.linspace(-2, 2, 41)
    pen, _ = P.hinge_regularizer(S, 0.01, 1.0, printed=True)
    assert pen <= 0.0


@given(st.floats(-3, 3), st.floats(1e-3, 0.5), st.floats(1e-6, 5))  # subnormal lam underflows lam*penalty
def test_hinge_zero_iff_all_above_eps(s, eps, lam):
    pen, _ = P.hinge_regularizer(np.array([s, 1.0]), eps, lam)
    assert (pen == 0) == (s >= eps)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_hinge_op_gradients(seed):
    rng = np.random.default_rng(seed)
    S = rng.uniform(-1, 1, (3, 6))
    S = np.where(np.abs(S - 0.01) < 1e-3, 0.5, S)
    err = ad.grad_check(lambda s: P.hinge_op(s, 0.01, 1.3), {"s": S}, seed=seed)
    assert max(err.values()) < 1e-4


def test_instance_norm_single_channel():
    x = np.arange(12.0).reshape(3, 4)
    y = P.instance_norm(x, gain=2.0, bias=0.5)
    assert y.mean() == pytest.approx(0.5)
    assert y.std() == pytest.approx(2.0, rel=1e-3)
    with pytest.raises(ValueError):
        P.instance_norm(np.ones(1))


def test_untrained_predictor_gives_unit_slopes(rng):
    cfg = tiny_ptn()
    params = P.init_ptn_params(ad.ParameterStore(), cfg, rng)
    S = P.predict_slopes(rng.uniform(0, 1, (2, 8, 8)), params, cfg)
    assert S.shape == (2, cfg.n_slopes)
    np.testing.assert_allclose(S, 1.0, atol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_slope_predictor_gradients(seed):
    rng = np.random.default_rng(seed)
    cfg = tiny_ptn()
    params = P.init_ptn_params(ad.ParameterStore(), cfg, rng)
    probe = {n: params[n].data + 0.1 * rng.standard_normal(params[n].shape) for n in params}
    x = rng.uniform(0, 1, (2, 8, 8, 1))

    def fn(**leaves):
        return P.slope_graph(x, store_from(leaves), cfg)

    err = ad.grad_check(fn, probe, seed=seed)
    assert max(err.values()) < 1e-4, err


def test_offset_images_run_through_predictor(rng):
    cfg = tiny_ptn()
    params = P.init_ptn_params(ad.ParameterStore(), cfg, rng)
    for n in params:
        params[n].data[...] += 0.2 * rng.standard_normal(params[n].shape)
    x = rng.uniform(0, 0.5, (8, 8))
    a, b = P.predict_slopes(x, params, cfg), P.predict_slopes(x + 0.3, params, cfg)
    assert np.all(np.isfinite(a)) and np.all(np.isfinite(b))
    assert np.all(a > 0) and np.all(b > 0)


def test_normalization_spread_identity_and_single_image(rng):
    imgs = [rng.uniform(0.1, 1, (6, 6)) * (i + 1) / 3 for i in range(4)]
    ws = [P.IntensityWindow(0, 1, 3)] * 4
    before, after = P.normalization_spread(imgs, ws, np.ones((4, 5)))
    assert before == after
    assert P.normalization_spread(imgs[:1], ws[:1], np.ones((1, 5))) == (0.0, 0.0)
    with pytest.raises(ValueError):
        P.normalization_spread([], [], [])


def test_normalization_spread_rescale_cancels_common_factor(rng):
    imgs = [rng.uniform(0.1, 1, (6, 6)) for _ in range(5)]
    ws = [P.IntensityWindow(0, 1, 3)] * 5
    plain = P.normalization_spread(imgs, ws, np.ones((5, 5)), rescale=True)
    scaled = P.normalization_spread(imgs, ws, np.full((5, 5), 2.5), rescale=True)
    assert plain[1] == pytest.approx(scaled[1], abs=1e-12)


def test_slopes_csv_has_k_plus_2_columns(tmp_path):
    path = tmp_path / "s.csv"
    P.dump_slopes_csv(path, ["a", "b"], np.ones((2, 12)))
    header = path.read_text().splitlines()[0].split(",")
    assert len(header) == 13 and header[1] == "s_0" and header[-1] == "s_11"


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_h_backward_matches_oracle_differences(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 8))
    w = P.IntensityWindow(0.0, 1.0, K)
    S = rng.uniform(0.1, 3, K + 2)
    x = rng.uniform(-0.5, 1.5, 5)
    frac = np.mod(x * K, 1.0)
    x = x[(frac > 1e-3) & (frac < 1 - 1e-3)]
    if x.size == 0:
        return
    g = rng.standard_normal(x.shape)
    gs, gx = P.h_backward(g, x, S, w)
    h = 1e-6
    for i in range(K + 2):
        d = np.zeros(K + 2)
        d[i] = h
        num = np.sum(g * (h_oracle(x, S + d, 0, 1, K) - h_oracle(x, S - d, 0, 1, K))) / (2 * h)
        assert gs[i] == pytest.approx(num, abs=1e-6)
    num_x = (h_oracle(x + h, S, 0, 1, K) - h_oracle(x - h, S, 0, 1, K)) / (2 * h)
    np.testing.assert_allclose(gx, g * num_x, atol=1e-6)
