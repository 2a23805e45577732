import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazekit.errors import (DegenerateGeometry, InsufficientFrames, MissingCalibrationDots,
                            SolverNonConvergence)
from gazekit.personalize import (CalibrationSplitSpec, SimilarityTransform, UserData, apply_affine,
                                 build_calibration_split, fit_affine, fit_scalar_svr, fit_svr,
                                 peripheral_dots, personalize_user, predict_svr, rbf_kernel,
                                 run_personalization, select_users)
from gazekit.personalize.svr import EPSILON_GRID, kfold_indices, solve_dual

from oracles import random_svr_problem as random_problem, svr_dual_qp


# --- kernel -----------------------------------------------------------------------

def test_rbf_kernel_values():
    assert rbf_kernel([[1.0, 2, 3, 4]], [[1.0, 2, 3, 4]], 0.6)[0, 0] == 1.0
    k = rbf_kernel([[0.0, 0, 0, 0]], [[1.0, 0, 0, 0]], 0.6)[0, 0]
    assert k == pytest.approx(math.exp(-0.6)) and round(k, 6) == 0.548812


def test_epsilon_grid_spans_stated_range():
    assert EPSILON_GRID[0] == 0.01 and EPSILON_GRID[-1] == 1000 and len(EPSILON_GRID) == 11


# --- dual solver -------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_solver_matches_qp_oracle(seed):
    x, y, eps, xt = random_problem(seed)
    K = rbf_kernel(x, x, 0.6)
    beta, bias, _, viol = solve_dual(K, y, eps, C=20.0, tol=1e-10)
    ob, obias, obj = svr_dual_qp(K, y, eps, 20.0)
    assert np.all(np.abs(beta) <= 20.0 + 1e-12) and abs(beta.sum()) < 1e-9
    np.testing.assert_allclose(K @ beta + bias, K @ ob + obias, atol=1e-6)
    kt = rbf_kernel(xt, x, 0.6)
    np.testing.assert_allclose(kt @ beta + bias, kt @ ob + obias, atol=1e-6)
    mine = 0.5 * beta @ K @ beta + eps * np.abs(beta).sum() - y @ beta
    assert mine == pytest.approx(obj, abs=1e-7)


def test_default_tolerance_meets_kkt_bound():
    x, y, eps, _ = random_problem(7)
    m = fit_scalar_svr(x, y, eps)
    assert m.max_violation < 1e-3
    assert np.all(np.abs(m.dual_coef) <= 20.0)


def test_iteration_cap_raises_with_violation():
    x, y, eps, _ = random_problem(3)
    with pytest.raises(SolverNonConvergence) as info:
        solve_dual(rbf_kernel(x, x, 0.6), y, eps, max_iter=1, tol=1e-12)
    assert info.value.max_violation > 0


def test_epsilon_tube_on_noise_free_linear_data():
    r = np.random.default_rng(5)
    x = r.uniform(-1, 1, (40, 4))
    y = x @ np.array([0.5, -0.3, 0.2, 0.1])
    m = fit_scalar_svr(x, y, epsilon=0.1)
    resid = np.abs(m.predict(x) - y)
    assert np.all(resid <= 0.1 + 1e-3)


def test_linear_targets_fit_closely():
    r = np.random.default_rng(1)
    x = r.uniform(-1, 1, (60, 4))
    t = np.stack([x @ [1.0, 0.5, 0, 0], x @ [0, 0, -1.0, 0.3]], axis=1)
    model = fit_svr(x, t, epsilon_grid=(0.01,))
    assert np.mean(np.hypot(*(predict_svr(model, x) - t).T)) < 0.05


def test_constant_targets_give_constant_predictor():
    x = np.random.default_rng(0).standard_normal((12, 4))
    t = np.tile([2.5, -1.0], (12, 1))
    model = fit_svr(x, t)
    np.testing.assert_allclose(predict_svr(model, np.random.default_rng(1).standard_normal((5, 4))),
                               np.tile([2.5, -1.0], (5, 1)))
    assert all(o.constant for o in model.outputs)


def test_grid_search_ties_go_to_smaller_epsilon():
    # constant targets tie every epsilon at zero error
    x = np.random.default_rng(0).standard_normal((9, 4))
    model = fit_svr(x, np.ones((9, 2)), epsilon_grid=(5.0, 0.5, 50.0))
    assert model.epsilon == 0.5


def test_kfold_contiguous_partition():
    parts = kfold_indices(10, 3)
    assert [p.tolist() for p in parts] == [[0, 1, 2, 3], [4, 5, 6], [7, 8, 9]]
    with pytest.raises(InsufficientFrames):
        fit_svr(np.zeros((2, 4)), np.zeros((2, 2)), folds=3)


# --- similarity transform -------------------------------------------------------------

def test_affine_identity_and_shift():
    p = np.random.default_rng(0).standard_normal((10, 2))
    tf = fit_affine(p, p)
    assert (tf.scale, tf.theta, tf.tx, tf.ty) == pytest.approx((1, 0, 0, 0), abs=1e-12)
    tf = fit_affine(p, p + [1, -2])
    assert (tf.scale, tf.theta, tf.tx, tf.ty) == pytest.approx((1, 0, 1, -2), abs=1e-12)


def test_apply_affine_examples():
    assert apply_affine(SimilarityTransform(2, 0, 0, 0), [[1, 1]]).tolist() == [[2, 2]]
    p = np.array([[1.0, 0.0]])
    np.testing.assert_allclose(apply_affine(SimilarityTransform(1, math.pi / 2, 0, 0), p), [[0, 1]], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.5, 2.0), st.floats(-math.pi + 1e-6, math.pi), st.floats(-5, 5), st.floats(-5, 5),
       st.integers(0, 2**31 - 1))
def test_affine_recovers_and_inverts(s, theta, tx, ty, seed):
    p = np.random.default_rng(seed).uniform(-4, 4, (15, 2))
    tf = SimilarityTransform(s, theta, tx, ty)
    fit = fit_affine(p, tf.apply(p))
    assert abs(fit.scale - s) < 1e-9 and abs(fit.tx - tx) < 1e-9 and abs(fit.ty - ty) < 1e-9
    assert abs(math.remainder(fit.theta - theta, 2 * math.pi)) < 1e-9
    np.testing.assert_allclose(tf.inverse().apply(tf.apply(p)), p, atol=1e-9)


def test_affine_never_reflects():
    p = np.random.default_rng(0).standard_normal((20, 2))
    mirrored = p * [-1, 1]
    tf = fit_affine(p, mirrored)
    assert np.linalg.det(tf.rotation) == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_affine_fit_sse_not_worse_than_identity(seed):
    r = np.random.default_rng(seed)
    p = r.standard_normal((12, 2))
    y = r.standard_normal((12, 2))
    tf = fit_affine(p, y)
    assert ((tf.apply(p) - y) ** 2).sum() <= ((p - y) ** 2).sum() + 1e-9


def test_affine_degenerate_inputs():
    with pytest.raises(DegenerateGeometry):
        fit_affine(np.ones((5, 2)), np.random.default_rng(0).standard_normal((5, 2)))
    with pytest.raises(DegenerateGeometry):
        fit_affine([[0, 0], [1, 1]], [[0, 0], [1, 1]])


# --- calibration splits ------------------------------------------------------------------

def test_random_ratio_counts():
    fit, ev = build_calibration_split(100, CalibrationSplitSpec("random_ratio", 0.7, True, 3))
    assert len(fit) == 70 and len(ev) == 30
    assert sorted(np.concatenate([fit, ev]).tolist()) == list(range(100))
    fit2, _ = build_calibration_split(100, CalibrationSplitSpec("random_ratio", 2 / 3, True, 3))
    assert len(fit2) == 67


def test_no_shuffle_keeps_temporal_order():
    fit, ev = build_calibration_split(100, CalibrationSplitSpec.parse("0.7:noshuffle"))
    assert fit.tolist() == list(range(70)) and ev.tolist() == list(range(70, 100))


def test_unique_ground_truth_one_frame_per_dot():
    dots = np.repeat(np.arange(30), 4)
    fit, ev = build_calibration_split(120, CalibrationSplitSpec("unique_ground_truth", seed=1), dot_ids=dots)
    assert len(fit) == 30 and sorted(dots[fit].tolist()) == list(range(30))
    assert len(ev) == 90


def test_calibration_13_uses_peripheral_dots():
    r = np.random.default_rng(0)
    pos = r.uniform(-5, 5, (20, 2))
    dots = np.repeat(np.arange(20), 3)
    truth = pos[dots]
    cal = peripheral_dots(dots.tolist(), truth)
    d = np.hypot(*(pos - pos.mean(axis=0)).T)
    assert sorted(cal) == sorted(np.argsort(-d)[:13].tolist())
    fit, ev = build_calibration_split(60, CalibrationSplitSpec("calibration_13"), dot_ids=dots, truth=truth)
    assert len(fit) == 39 and set(dots[fit]) == set(cal)
    with pytest.raises(MissingCalibrationDots):
        build_calibration_split(60, CalibrationSplitSpec("calibration_13"))


def test_too_few_frames():
    with pytest.raises(InsufficientFrames):
        build_calibration_split(9, CalibrationSplitSpec())


@pytest.mark.parametrize("text, name", [("0.7:shuffle", "0.7:shuffle"), ("2/3:noshuffle", "2/3:noshuffle"),
                                        ("unique", "unique"), ("cal13", "cal13")])
def test_variant_names_roundtrip(text, name):
    assert CalibrationSplitSpec.parse(text).name == name


# --- per-user pipeline ----------------------------------------------------------------------

def make_user(uid="u", n_dots=30, per_dot=3, distort=None, noise=0.0, seed=0):
    r = np.random.default_rng(seed)
    pos = np.stack([r.uniform(-3, 3, n_dots), r.uniform(1, 11, n_dots)], axis=1)
    dots = np.repeat(np.arange(n_dots), per_dot)
    truth = pos[dots]
    base = truth if distort is None else distort.inverse().apply(truth)
    base = base + noise * r.standard_normal(base.shape)
    feats = np.column_stack([base, base[:, ::-1]]) / 5.0
    return UserData(user_id=uid, keys=[f"{uid}/{i:05d}" for i in range(len(dots))], dot_ids=dots.tolist(),
                    features=feats, base_pred=base, truth=truth)


def test_perfect_base_predictions_stay_perfect():
    rep = personalize_user(make_user(), method="svr", spec=CalibrationSplitSpec())
    assert rep.med_before == 0.0
    assert rep.med_after <= 0.05 + 1e-3  # limited by the smallest tube width


def test_affine_corrects_constructed_distortion():
    tf = SimilarityTransform(1.15, 0.2, 0.8, -0.6)
    rep = personalize_user(make_user(distort=tf, noise=0.1 / 1.15), method="affine",
                           spec=CalibrationSplitSpec())
    assert rep.med_before > 0.5 and rep.med_after < 0.15
    assert rep.enhancement == pytest.approx(rep.med_before - rep.med_after)
    assert rep.n_fit + rep.n_eval == rep.n_frames


def test_svr_improves_distorted_user():
    tf = SimilarityTransform(1.1, 0.1, 0.5, 0.5)
    rep = personalize_user(make_user(distort=tf, noise=0.05), method="svr", spec=CalibrationSplitSpec())
    assert rep.med_after < rep.med_before


def test_run_personalization_ordering_and_worker_invariance():
    users = [make_user(f"u{i}", n_dots=15, seed=i) for i in range(3)]
    variants = [CalibrationSplitSpec.parse("0.7:shuffle"), CalibrationSplitSpec.parse("cal13")]
    a = run_personalization(users, method="affine", variants=variants, workers=1)
    b = run_personalization(users, method="affine", variants=variants, workers=2)
    assert a.to_json() == b.to_json()
    assert [(r.user_id, r.variant) for r in a.reports] == [
        (u, v) for u in ("u0", "u1", "u2") for v in ("0.7:shuffle", "cal13")]
    text = a.to_text()
    assert "seed=0" in text and "LEAKAGE-PRONE" not in text
    assert "LEAKAGE-PRONE" in run_personalization(users[:1], method="affine", base_split="google",
                                                  workers=1).to_text()


def test_infeasible_users_are_reported_not_fatal():
    small = make_user("tiny", n_dots=3, per_dot=2)
    errors = []
    s = run_personalization([small, make_user("ok")], method="affine",
                            variants=[CalibrationSplitSpec()], workers=1,
                            on_error=lambda *a: errors.append(a))
    assert [r.user_id for r in s.reports] == ["ok"]
    assert errors[0][0] == "tiny"


def test_summary_aggregate_is_frame_weighted():
    users = [make_user("a", n_dots=10, seed=1, distort=SimilarityTransform(1.2, 0, 0, 0)),
             make_user("b", n_dots=20, seed=2, distort=SimilarityTransform(1.2, 0, 0, 0))]
    s = run_personalization(users, method="affine", workers=1)
    agg = s.aggregate("0.7:shuffle")
    w = [r.n_eval for r in s.reports]
    assert agg["med_before"] == pytest.approx(np.average([r.med_before for r in s.reports], weights=w))


def test_select_users_by_frame_count():
    users = [make_user("a", n_dots=10), make_user("b", n_dots=12), make_user("c", n_dots=12)]
    assert [u.user_id for u in select_users(users, top=2)] == ["b", "c"]
