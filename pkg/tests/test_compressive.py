import numpy as np
import pytest

from cpisim.compressive import (CsProblem, build_cs_problem, cross_validate_lambda,
                                cs_reconstruct, dct2, idct2, lasso_cd,
                                lasso_lambda_max, soft_threshold)
from cpisim.core import (MaskPlane, ObjectScene, OpticalConfig, ValidationError)
from cpisim.forward import build_plan, propagate_frame
from cpisim.pipeline import simulate_stream
from cpisim.speckle import SpeckleGrid, generate_speckle
from cpisim.frames import FramePairStream


class TestDct:
    def test_orthonormal_round_trip(self):
        rng = np.random.default_rng(0)
        x = rng.random((16, 16))
        assert np.abs(idct2(dct2(x)) - x).max() < 1e-10

    def test_parseval(self):
        rng = np.random.default_rng(1)
        c = rng.standard_normal((12, 12))
        assert np.linalg.norm(c) == pytest.approx(np.linalg.norm(idct2(c)), rel=1e-10)


class TestSoftThreshold:
    def test_against_brute_force_prox(self):
        rng = np.random.default_rng(2)
        grid = np.linspace(-5, 5, 200001)
        for _ in range(20):
            z = rng.uniform(-3, 3)
            t = rng.uniform(0, 2)
            objective = 0.5 * (grid - z) ** 2 + t * np.abs(grid)
            brute = grid[np.argmin(objective)]
            assert soft_threshold(z, t) == pytest.approx(brute, abs=1e-4)


def synthetic_problem(m=40, n_side=8, k=5, seed=7, noise=0.0):
    rng = np.random.default_rng(seed)
    n = n_side * n_side
    design = rng.standard_normal((m, n))
    design /= np.linalg.norm(design, axis=0)[None, :]
    coef = np.zeros(n)
    support = rng.choice(n, size=k, replace=False)
    coef[support] = rng.uniform(1.0, 2.0, size=k) * rng.choice([-1.0, 1.0], size=k)
    y = design @ coef + noise * rng.standard_normal(m)
    return CsProblem.from_arrays(y, design, (n_side, n_side)), coef, support


class TestLassoCd:
    def test_zero_solution_at_lambda_max(self):
        prob, _, _ = synthetic_problem()
        lam_max = lasso_lambda_max(prob.design, prob.y)
        res = lasso_cd(prob, lam=lam_max * 1.0001)
        assert np.all(res.coef == 0)

    def test_nonzero_below_lambda_max(self):
        prob, _, _ = synthetic_problem()
        lam_max = lasso_lambda_max(prob.design, prob.y)
        res = lasso_cd(prob, lam=0.5 * lam_max)
        assert np.any(res.coef != 0)

    def test_objective_non_increasing_each_sweep(self):
        prob, _, _ = synthetic_problem(m=60, n_side=10, k=8, noise=0.3)
        res = lasso_cd(prob, lam=1e-3)
        diffs = np.diff(res.objectives)
        assert np.all(diffs <= 1e-12 * max(1.0, res.objectives[0]))

    def test_sparse_recovery_support_and_values(self):
        prob, coef, support = synthetic_problem(m=40, n_side=8, k=5, seed=7)
        lam_max = lasso_lambda_max(prob.design, prob.y)
        res = lasso_cd(prob, lam=1e-3 * lam_max)
        recovered = np.flatnonzero(np.abs(res.coef) > 0.05)
        assert set(recovered) == set(support)
        assert np.allclose(res.coef[support], coef[support], rtol=0.10)

    def test_lambda_zero_least_squares(self):
        rng = np.random.default_rng(9)
        n_side = 5
        n = n_side * n_side
        design = rng.standard_normal((n, n)) + np.eye(n) * 3.0
        coef = rng.standard_normal(n)
        y = design @ coef
        prob = CsProblem.from_arrays(y, design, (n_side, n_side))
        res = lasso_cd(prob, lam=0.0, max_sweeps=4000, tol=1e-13)
        centered = design - design.mean(axis=0)
        resid = (y - y.mean()) - centered @ res.coef
        grad0 = np.abs(centered.T @ (y - y.mean())).max()
        assert np.abs(centered.T @ resid).max() < 1e-8 * grad0

    def test_budget_overrun_flagged(self):
        prob, _, _ = synthetic_problem(m=60, n_side=10, k=8, noise=0.5, seed=11)
        res = lasso_cd(prob, lam=1e-9, max_sweeps=2, tol=1e-14)
        assert not res.converged
        assert res.sweeps == 2

    def test_negative_lambda_rejected(self):
        prob, _, _ = synthetic_problem()
        with pytest.raises(ValidationError):
            lasso_cd(prob, lam=-1.0)


class TestCrossValidation:
    def test_single_point_grid_returns_it(self):
        prob, _, _ = synthetic_problem()
        lam, _ = cross_validate_lambda(prob, 4, [0.123])
        assert lam == 0.123

    def test_pure_noise_selects_largest(self):
        rng = np.random.default_rng(13)
        design = rng.standard_normal((60, 36))
        y = rng.standard_normal(60)
        prob = CsProblem.from_arrays(y, design, (6, 6))
        lam_max = lasso_lambda_max(design, y)
        grid = np.geomspace(1e-3 * lam_max, lam_max, 8)
        lam, errs = cross_validate_lambda(prob, 5, grid, seed=0)
        assert lam == pytest.approx(grid[-1])

    def test_leave_one_out_accepted(self):
        prob, _, _ = synthetic_problem(m=12, n_side=4, k=2)
        lam, _ = cross_validate_lambda(prob, 12, [0.01, 0.1])
        assert lam in (0.01, 0.1)

    def test_more_folds_than_rows_rejected(self):
        prob, _, _ = synthetic_problem(m=10, n_side=4, k=2)
        with pytest.raises(ValidationError, match="folds"):
            cross_validate_lambda(prob, 11, [0.1])

    def test_reproducible_given_seed(self):
        prob, _, _ = synthetic_problem(m=50, n_side=8, k=5, noise=0.2)
        grid = [1e-4, 1e-3, 1e-2]
        lam1, err1 = cross_validate_lambda(prob, 5, grid, seed=3)
        lam2, err2 = cross_validate_lambda(prob, 5, grid, seed=3)
        assert lam1 == lam2
        assert np.array_equal(err1, err2)


def exact_toy():
    """Geometry where object pixels map exactly onto speckle cells and Db
    pixels coincide with them, making y = Phi x hold to float precision."""
    cfg = OpticalConfig(s_o=100.0, M=-2.0, M_L=0.5, n_paths=1, pitch_a=10.0,
                        pitch_b=2.5, dims_a=(4, 4), dims_b=(10, 10))
    s_target = 200.0
    grid = SpeckleGrid((10, 10), 5.0)
    rng = np.random.default_rng(5)
    mask_vals = rng.uniform(0.2, 1.0, size=(4, 4))
    scene = ObjectScene(masks=(MaskPlane(s_target, mask_vals, 5.0),))
    return cfg, s_target, grid, scene, mask_vals


class TestBuildProblem:
    def test_forward_agreement_on_aligned_toy(self):
        cfg, s_target, grid, scene, mask_vals = exact_toy()
        plan = build_plan(scene, cfg, grid)
        frames_a, frames_b = [], []
        for i in range(3):
            spk = generate_speckle(21, i, grid, sigma_c=6.0, mean_intensity=1.0)
            fa, fb = propagate_frame(spk, scene, cfg, plan, index=i)
            frames_a.append(fa)
            frames_b.append(fb)
        stream = FramePairStream(tuple(frames_a), tuple(frames_b),
                                 {"speckle_pitch_um": grid.pitch})
        prob = build_cs_problem(stream, cfg, s_target, max_rows=48)
        x = mask_vals.ravel()
        for i in range(prob.n_rows):
            phi = prob.phi_row(i).ravel()
            assert prob.y[i] == pytest.approx(float(phi @ x), rel=1e-4)

    def test_design_is_dct_of_rows(self):
        cfg, s_target, grid, scene, mask_vals = exact_toy()
        plan = build_plan(scene, cfg, grid)
        spk = generate_speckle(22, 0, grid, 6.0, 1.0)
        fa, fb = propagate_frame(spk, scene, cfg, plan)
        stream = FramePairStream((fa,), (fb,), {"speckle_pitch_um": grid.pitch})
        prob = build_cs_problem(stream, cfg, s_target, max_rows=16)
        x = mask_vals
        lhs = prob.design @ dct2(x).ravel()
        rhs = np.array([float(prob.phi_row(i).ravel() @ x.ravel())
                        for i in range(prob.n_rows)])
        assert np.allclose(lhs, rhs, rtol=1e-9, atol=1e-12)

    def test_transparent_object_consistency(self):
        cfg, s_target, grid, scene, _ = exact_toy()
        ones = ObjectScene(masks=(MaskPlane(s_target, np.ones((4, 4)), 5.0),))
        plan = build_plan(ones, cfg, grid)
        spk = generate_speckle(23, 0, grid, 6.0, 1.0)
        fa, fb = propagate_frame(spk, ones, cfg, plan)
        stream = FramePairStream((fa,), (fb,), {"speckle_pitch_um": grid.pitch})
        prob = build_cs_problem(stream, cfg, s_target, max_rows=16)
        x = np.ones(16)
        resid = prob.y - np.array([prob.phi_row(i).ravel() @ x
                                   for i in range(prob.n_rows)])
        assert np.abs(resid).max() < 1e-4 * prob.y.max()

    def test_bucket_mode_at_focused_depth(self):
        cfg, _, grid, scene, _ = exact_toy()
        focused = ObjectScene(masks=(MaskPlane(100.0, scene.masks[0].values, 5.0),))
        plan = build_plan(focused, cfg, grid)
        frames_a, frames_b = [], []
        for i in range(4):
            spk = generate_speckle(24, i, grid, 6.0, 1.0)
            fa, fb = propagate_frame(spk, focused, cfg, plan, index=i)
            frames_a.append(fa)
            frames_b.append(fb)
        stream = FramePairStream(tuple(frames_a), tuple(frames_b), {})
        prob = build_cs_problem(stream, cfg, 100.0)
        assert prob.bucket_mode
        assert prob.n_rows == 4
        assert prob.y[0] == pytest.approx(frames_a[0].values().mean())

    def test_empty_stream_rejected(self):
        cfg, s_target, grid, scene, _ = exact_toy()
        with pytest.raises(ValidationError):
            build_cs_problem(FramePairStream((), (), {}), cfg, s_target)

    def test_photon_rows_cover_all_events(self):
        cfg, s_target, grid, scene, _ = exact_toy()
        plan = build_plan(scene, cfg, grid)
        stream = simulate_stream(scene, cfg, grid, 6.0, 0.5, 40, seed=3,
                                 plan=plan, binary=True)
        prob = build_cs_problem(stream, cfg, s_target, max_rows=400,
                                row_select="photon")
        total_photons = sum(int(f.values().sum()) for f in stream.frames_a)
        assert int((prob.y > 0).sum()) == total_photons


class TestReconstruct:
    def test_cv_path_runs_and_reports_r(self):
        cfg, s_target, grid, scene, _ = exact_toy()
        plan = build_plan(scene, cfg, grid)
        stream = simulate_stream(scene, cfg, grid, 6.0, 1.0, 30, seed=4, plan=plan)
        reference = np.random.default_rng(1).random((4, 4))
        result = cs_reconstruct(stream, cfg, s_target, lam="cv",
                                reference=reference, max_rows=200,
                                k_folds=3, cv_grid=[1e-4, 1e-2])
        assert result.image.shape == (4, 4)
        assert -1.0 <= result.r_vs_reference <= 1.0

    def test_reproducible(self):
        cfg, s_target, grid, scene, _ = exact_toy()
        plan = build_plan(scene, cfg, grid)
        stream = simulate_stream(scene, cfg, grid, 6.0, 1.0, 20, seed=5, plan=plan)
        r1 = cs_reconstruct(stream, cfg, s_target, lam=1e-3, max_rows=100)
        r2 = cs_reconstruct(stream, cfg, s_target, lam=1e-3, max_rows=100)
        assert np.array_equal(r1.image, r2.image)
