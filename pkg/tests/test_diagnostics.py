"""Trajectory and correlation probes.

The chord test is cross-checked against the discrete second-difference
criterion; the nonconvex example is a hand-derived two-layer sign flip
whose losses are known in closed form.
"""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ptqsearch import (
    ArgumentError,
    CorrelationReport,
    QuantizableLayerSet,
    clip_mse,
    correlation_study,
    find_convexity_violations,
    forward,
    interpolate_trajectory,
    pearson_r,
    plan_weight_set,
    run_baseline,
)
from ptqsearch.diagnostics import _calib_loss, second_difference_convex

from conftest import make_calib, make_fc_model


def single_layer_problem(seed=3, n=48):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((3, 4)).astype(np.float32)
    model = make_fc_model([w])
    x = rng.standard_normal((n, 4)).astype(np.float32)
    logits, _ = forward(model, x)
    calib = make_calib(x, logits.argmax(axis=1), 3)
    return model, calib, w


# -- chord test ------------------------------------------------------------------


def test_bump_is_flagged_with_chord_position():
    violations = find_convexity_violations([0.0, 0.5, 1.0], [0.0, 1.0, 0.0])
    assert violations == [(0.5, 0, 2)]


def test_convex_points_pass():
    assert find_convexity_violations([0.0, 0.5, 1.0], [1.0, 0.0, 1.0]) == []
    alphas = [i / 10 for i in range(11)]
    losses = [(a - 0.4) ** 2 for a in alphas]
    assert find_convexity_violations(alphas, losses) == []


def test_chord_test_input_validation():
    with pytest.raises(ArgumentError, match="length"):
        find_convexity_violations([0.0, 1.0], [0.0, 1.0, 2.0])
    with pytest.raises(ArgumentError, match="increasing"):
        find_convexity_violations([1.0, 0.5, 0.0], [0.0, 1.0, 2.0])


loss_lists = st.lists(
    st.floats(min_value=-10.0, max_value=10.0, allow_nan=False),
    min_size=3,
    max_size=9,
)


@given(loss_lists)
def test_chord_and_second_difference_agree_on_uniform_grids(losses):
    alphas = [i / (len(losses) - 1) for i in range(len(losses))]
    tol = 1e-9
    violations = find_convexity_violations(alphas, losses, tol)
    if second_difference_convex(losses, 0.0):
        # discrete convexity implies the chord condition everywhere
        assert violations == []
    if not violations:
        # an adjacent-triple chord gap of tol bounds d2 by 2 tol
        assert second_difference_convex(losses, 2.0 * tol)


@given(st.floats(min_value=0.0, max_value=5.0), st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
def test_quadratics_are_convex_iff_curvature_nonneg(a, b, c):
    alphas = [i / 8 for i in range(9)]
    losses = [a * t * t + b * t + c for t in alphas]
    assert find_convexity_violations(alphas, losses) == []
    if a > 1e-6:
        flipped = [-a * t * t + b * t + c for t in alphas]
        assert find_convexity_violations(alphas, flipped) != []


# -- trajectories -----------------------------------------------------------------


def test_endpoints_reproduce_endpoint_losses_exactly():
    model, calib, w = single_layer_problem()
    rng = np.random.default_rng(8)
    w2 = {1: (w + rng.standard_normal(w.shape).astype(np.float32) * 0.5)}
    rep = interpolate_trajectory(model, {1: w}, w2, 5, calib)
    assert rep.alphas == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert rep.losses[0] == _calib_loss(model, {1: w}, calib)
    assert rep.losses[-1] == _calib_loss(model, w2, calib)


def test_single_layer_interpolation_is_convex():
    # logits are affine in the weights of a one-layer model, so the
    # cross-entropy along any straight line between weight sets is convex
    model, calib, w = single_layer_problem()
    rng = np.random.default_rng(8)
    w2 = {1: (w + rng.standard_normal(w.shape).astype(np.float32) * 0.8)}
    rep = interpolate_trajectory(model, {1: w}, w2, 9, calib)
    assert rep.violations == []


def test_sign_flip_through_zero_is_nonconvex():
    # two chained scalar layers: logit0 = (2 - 4a)^2 along the path, so the
    # loss peaks at log 2 in the middle and the chord test must fire
    w1 = {1: np.array([[2.0]], np.float32), 2: np.array([[2.0], [0.0]], np.float32)}
    w2 = {1: np.array([[-2.0]], np.float32), 2: np.array([[-2.0], [0.0]], np.float32)}
    model = make_fc_model([w1[1], w1[2]], relu_between=False)
    calib = make_calib(np.ones((4, 1), np.float32), np.zeros(4, np.int64), 2)
    rep = interpolate_trajectory(model, w1, w2, 5, calib)
    assert rep.losses[2] == pytest.approx(math.log(2.0), abs=1e-6)
    assert rep.losses[0] == pytest.approx(math.log(1.0 + math.exp(-4.0)), abs=1e-6)
    assert rep.losses[0] == pytest.approx(rep.losses[-1], abs=1e-12)
    assert rep.violations
    lams = {round(v[0], 6) for v in rep.violations}
    assert any(0.0 < l < 1.0 for l in lams)


def test_trajectory_validation():
    model, calib, w = single_layer_problem()
    with pytest.raises(ArgumentError, match="n_points"):
        interpolate_trajectory(model, {1: w}, {1: w}, 1, calib)
    with pytest.raises(ArgumentError, match="only one endpoint"):
        interpolate_trajectory(model, {1: w}, {}, 3, calib)
    with pytest.raises(ArgumentError, match="shapes"):
        interpolate_trajectory(model, {1: w}, {1: w[:2]}, 3, calib)


def test_plan_weight_set_materializes_quantized_layers(mlp_model, mlp_calib):
    plan = run_baseline(
        mlp_model, mlp_calib, clip_mse, layers=QuantizableLayerSet.build(mlp_model, only=[3]), q_w=4
    )
    ws = plan_weight_set(mlp_model, plan)
    assert set(ws) == {1, 3}
    assert np.array_equal(ws[1], mlp_model.layer(1).weights)  # not planned: original
    assert np.array_equal(ws[3], plan.weight(3))
    assert not np.array_equal(ws[3], mlp_model.layer(3).weights)
    fp = plan_weight_set(mlp_model, None, layers=[1])
    assert set(fp) == {1}


def test_fp_to_quantized_trajectory_runs(mlp_model, mlp_calib):
    fp = plan_weight_set(mlp_model, None)
    plan = run_baseline(mlp_model, mlp_calib, clip_mse, q_w=3)
    quant = plan_weight_set(mlp_model, plan)
    rep = interpolate_trajectory(mlp_model, fp, quant, 5, mlp_calib)
    assert len(rep.losses) == 5
    assert all(np.isfinite(rep.losses))
    assert rep.losses[0] == _calib_loss(mlp_model, fp, mlp_calib)
    assert rep.losses[-1] == _calib_loss(mlp_model, quant, mlp_calib)


# -- correlation -------------------------------------------------------------------


def test_pearson_exact_lines():
    x = [1.0, 2.0, 5.0, 9.0]
    assert pearson_r(x, [2 * v + 1 for v in x]) == pytest.approx(1.0, abs=1e-14)
    assert pearson_r(x, [-v for v in x]) == pytest.approx(-1.0, abs=1e-14)
    assert pearson_r(x, [3.0, 3.0, 3.0, 3.0]) is None
    with pytest.raises(ArgumentError):
        pearson_r([1.0], [2.0])
    with pytest.raises(ArgumentError):
        pearson_r([1.0, 2.0], [1.0, 2.0, 3.0])


@given(
    st.lists(st.floats(-100.0, 100.0), min_size=3, max_size=12),
    st.floats(0.1, 10.0),
    st.floats(-5.0, 5.0),
)
def test_pearson_affine_invariance(xs, scale, shift):
    ys = [math.sin(v) + 0.3 * v for v in xs]
    r0 = pearson_r(xs, ys)
    r1 = pearson_r([scale * v + shift for v in xs], ys)
    if r0 is None:
        assert r1 is None
    else:
        assert r1 == pytest.approx(r0, abs=1e-9)


def test_correlation_study_duplicated_pair_is_exactly_linear():
    model, calib, _ = single_layer_problem()
    coarse = {"q": 2, "gamma_c": 0.3, "gamma_n": 0.0, "gamma_s": 0.0, "order": "rtn"}
    fine = {"q": 8, "gamma_c": 1.0, "gamma_n": 0.0, "gamma_s": 0.0, "order": "rtn"}
    rep = correlation_study(model, 1, [coarse, fine, dict(coarse)], calib)
    assert rep.qerrs[0] == rep.qerrs[2] and rep.losses[0] == rep.losses[2]
    assert rep.qerrs[0] != rep.qerrs[1]
    # two distinct points duplicated: perfectly collinear
    assert abs(rep.r) == pytest.approx(1.0, abs=1e-12)


def test_correlation_study_zero_variance_note():
    model, calib, _ = single_layer_problem()
    cfg = {"q": 4, "gamma_c": 0.5, "gamma_n": 0.0, "gamma_s": 0.0, "order": "rtn"}
    rep = correlation_study(model, 1, [dict(cfg), dict(cfg), dict(cfg)], calib)
    assert rep.r is None
    assert "zero variance" in rep.note


def test_correlation_study_shape_and_determinism():
    model, calib, _ = single_layer_problem()
    configs = [
        {"q": 4, "gamma_c": g, "gamma_n": 0.2, "gamma_s": 0.5, "order": "second"}
        for g in (0.3, 0.5, 0.7, 0.9, 1.0)
    ]
    rep = correlation_study(model, 1, configs, calib)
    assert isinstance(rep, CorrelationReport)
    assert len(rep.qerrs) == len(rep.losses) == len(rep.configs) == 5
    assert rep.configs == configs
    assert -1.0 <= rep.r <= 1.0
    again = correlation_study(model, 1, configs, calib)
    assert (rep.qerrs, rep.losses, rep.r) == (again.qerrs, again.losses, again.r)


def test_correlation_study_validation(mlp_model, mlp_calib):
    cfg = {"q": 4, "gamma_c": 0.5}
    with pytest.raises(ArgumentError, match="at least 3"):
        correlation_study(mlp_model, 1, [cfg, cfg], mlp_calib)
    with pytest.raises(ArgumentError, match="relu"):
        correlation_study(mlp_model, 2, [cfg, cfg, cfg], mlp_calib)
