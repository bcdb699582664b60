"""Functionals, ensemble engine, and the Monte Carlo estimators."""

import math
import os

import numpy as np
import pytest

from rspde.coefficients import CoefficientModel, constant_model, standard_model
from rspde.grid_noise import NoisePlan, l2_norm, make_grid, with_stream
from rspde.heat import heat_apply, spectral_basis
from rspde.semigroup import (
    FunctionalContractError,
    bootstrap_variance_positive,
    bounded_cylinder,
    clipped_affine,
    direction_dictionary,
    estimate_grad_Pt,
    estimate_Pt,
    estimate_Pt_grad_sq,
    estimate_Pt_log,
    estimate_variance,
    exp_neg_pair,
    functional_from_config,
    run_ensemble,
)
from rspde.solver import BlowUpError, solve_path, step_reflected, ReflectionLedger


@pytest.fixture(scope="module")
def small():
    grid = make_grid(31, 1e-3, 0.05)
    model = standard_model()
    e1 = spectral_basis(31).modes[0]
    h = np.maximum(0.5 * e1, 0.0)
    return grid, model, e1, h


class TestFunctionalCatalogue:
    def test_clipped_affine_value_and_grad(self, small):
        grid, _, e1, h = small
        phi = clipped_affine(e1, grid.dx, offset=0.2, lo=0.0, hi=1.0)
        s = grid.dx * float(e1 @ h)
        assert phi.value(h) == pytest.approx(min(max(0.2 + s, 0.0), 1.0))
        assert phi.grad_norm(h) == pytest.approx(phi.phi_l2)
        low = np.zeros(grid.n_space)
        # offset 0.2 sits strictly inside (0, 1): gradient |phi| there too
        assert phi.grad_norm(low) == pytest.approx(phi.phi_l2)

    def test_clipped_affine_saturated_grad_zero(self, small):
        grid, _, e1, _ = small
        phi = clipped_affine(e1, grid.dx, offset=2.0, lo=0.0, hi=1.0)
        assert phi.grad_norm(np.zeros(grid.n_space)) == 0.0

    def test_exp_neg_pair_bounds(self, small):
        grid, _, e1, h = small
        phi = exp_neg_pair(e1, grid.dx, lo=0.1, hi=1.0)
        assert phi.strictly_positive
        vals = phi.value(np.stack([h, 5 * h, 0 * h], axis=1))
        assert np.all(vals >= 0.1) and np.all(vals <= 1.0)
        assert phi.value(0 * h) == 1.0

    def test_cylinder_smooth_and_step(self, small):
        grid, _, e1, h = small
        smooth = bounded_cylinder(e1, grid.dx, center=0.2, lo=0.1, hi=0.9, sharpness=4.0)
        step = bounded_cylinder(e1, grid.dx, center=0.2, lo=0.0, hi=1.0, smooth=False)
        assert smooth.is_c1 and not step.is_c1
        assert 0.1 < float(smooth.value(h)) < 0.9
        assert float(step.value(h)) in (0.0, 1.0)
        assert np.isinf(step.grad_norm(h)) or step.grad_norm(h) == 0.0

    def test_from_config(self, small):
        grid, _, e1, h = small
        phi = functional_from_config(grid, {
            "kind": "exp_neg_pair", "direction_modes": [1.0], "lo": 0.2, "hi": 1.0,
        })
        assert phi.kind == "exp_neg_pair"
        assert phi.value(h) == pytest.approx(0.2 + 0.8 * math.exp(-float(grid.dx * (e1 @ h)) ** 2))

    def test_unknown_kind_rejected(self, small):
        grid, _, _, _ = small
        with pytest.raises(ValueError):
            functional_from_config(grid, {"kind": "mystery", "direction_modes": [1.0]})


class TestRunEnsemble:
    def test_columns_match_solve_path_bitwise(self, small):
        grid, model, _, h = small
        U = run_ensemble(h[None, :], grid.n_steps, "reflected", model, grid,
                         seed=5, n_paths=4)
        for stream in range(4):
            traj = solve_path(h, "reflected", model, grid, NoisePlan(5, stream))
            assert np.array_equal(U[0, :, stream], traj.fields[-1])

    def test_threads_do_not_change_results(self, small, monkeypatch):
        grid, model, _, h = small
        results = {}
        for nt in ("1", "4"):
            monkeypatch.setenv("RSPDE_THREADS", nt)
            results[nt] = run_ensemble(np.stack([h, 0.5 * h]), grid.n_steps,
                                       "reflected", model, grid, seed=9, n_paths=600)
        assert np.array_equal(results["1"], results["4"])

    def test_variants_share_noise(self, small):
        grid, model, _, h = small
        U = run_ensemble(np.stack([h, h]), grid.n_steps, "reflected", model, grid,
                         seed=7, n_paths=3)
        assert np.array_equal(U[0], U[1])

    def test_sup_tracking_includes_t0(self, small):
        grid, model, _, h = small
        h2 = 0.5 * h
        _, sups = run_ensemble(np.stack([h, h2]), 1, "reflected", model, grid,
                               seed=7, n_paths=3, track_sup_pairs=[(0, 1)])
        assert np.all(sups >= np.max(np.abs(h - h2)) - 1e-15)

    def test_blow_up_reports_stream(self, small):
        grid, _, _, h = small
        explosive = CoefficientModel(
            name="explosive", b=lambda u: np.full_like(u, np.inf),
            sigma=lambda u: np.zeros_like(u), L_b=0.0, L_sigma=0.0,
            kappa1=0.0, kappa2=0.0,
        )
        with pytest.raises(BlowUpError) as exc:
            run_ensemble(h[None, :], 3, "penalized", explosive, grid, seed=1,
                         n_paths=4, eps=1.0)
        assert getattr(exc.value, "stream", None) == 0


class TestEstimatePt:
    def test_t_zero_is_identity(self, small):
        grid, model, e1, h = small
        phi = clipped_affine(e1, grid.dx, lo=-10, hi=10)
        est = estimate_Pt(phi, h, 0.0, "reflected", model, grid, 100, seed=1)
        assert est.mean == float(phi.value(h))
        assert est.std_error == 0.0

    def test_constant_functional(self, small):
        grid, model, e1, h = small
        phi = clipped_affine(e1, grid.dx, offset=0.7, lo=0.7, hi=0.7)
        est = estimate_Pt(phi, h, 0.05, "reflected", model, grid, 50, seed=1)
        # every path value is exactly 0.7; the mean picks up only summation
        # rounding and the spread estimate is at the same scale
        assert est.mean == pytest.approx(0.7, rel=1e-15)
        assert est.std_error <= 1e-15

    def test_linear_case_matches_heat_oracle(self):
        # tiny constant diffusion, no drift: while the trajectory stays
        # inside the cone the first-mode pairing evolves by the heat factor
        grid = make_grid(31, 1e-3, 0.05)
        model = constant_model(0.0, 0.02, kappa1=0.01, kappa2=0.03)
        e1 = spectral_basis(31).modes[0]
        h = np.maximum(0.5 * e1, 0.0)
        phi = clipped_affine(e1, grid.dx, lo=-100.0, hi=100.0)
        est = estimate_Pt(phi, h, 0.05, "reflected", model, grid, 400, seed=12)
        target = grid.dx * float(e1 @ heat_apply(h, 0.05))
        slack = 3 * est.std_error + 5 * (grid.dt + grid.dx**2) * abs(target)
        assert abs(est.mean - target) <= slack

    def test_linear_case_positivity_window(self):
        # the oracle above is valid because clipping is empirically rare:
        # fewer than 1 in 1000 paths touch the constraint
        grid = make_grid(31, 1e-3, 0.05)
        model = constant_model(0.0, 0.02, kappa1=0.01, kappa2=0.03)
        h = np.maximum(0.5 * spectral_basis(31).modes[0], 0.0)
        n_paths = 1000
        ledger = ReflectionLedger.empty(grid.dx, (grid.n_space, n_paths))
        U = np.broadcast_to(h[:, None], (grid.n_space, n_paths)).copy()
        plan = NoisePlan(12)
        from rspde.grid_noise import increments_matrix

        for m in range(grid.n_steps):
            dW = increments_matrix(plan, grid, m, np.arange(n_paths))
            U = step_reflected(U, model, grid, dW, ledger)
        clipped_paths = np.count_nonzero(np.sum(ledger.node_mass, axis=0) > 0)
        assert clipped_paths / n_paths < 0.001

    def test_monotone_in_functional(self, small):
        grid, model, e1, h = small
        lo = clipped_affine(e1, grid.dx, offset=0.0, lo=-5, hi=5)
        hi = clipped_affine(e1, grid.dx, offset=1.0, lo=-4, hi=6)
        a = estimate_Pt(lo, h, 0.05, "reflected", model, grid, 64, seed=3)
        b = estimate_Pt(hi, h, 0.05, "reflected", model, grid, 64, seed=3)
        assert a.mean <= b.mean  # pointwise Phi1 <= Phi2 with shared paths

    def test_positive_functional_nonnegative_mean(self, small):
        grid, model, e1, h = small
        phi = exp_neg_pair(e1, grid.dx, lo=0.0, hi=1.0)
        est = estimate_Pt(phi, h, 0.05, "reflected", model, grid, 64, seed=4)
        assert est.mean >= 0.0

    def test_bitwise_reproducible(self, small):
        grid, model, e1, h = small
        phi = clipped_affine(e1, grid.dx, lo=-5, hi=5)
        a = estimate_Pt(phi, h, 0.05, "reflected", model, grid, 128, seed=11)
        b = estimate_Pt(phi, h, 0.05, "reflected", model, grid, 128, seed=11)
        assert (a.mean, a.std_error) == (b.mean, b.std_error)

    def test_json_record_provenance(self, small):
        grid, model, e1, h = small
        phi = clipped_affine(e1, grid.dx, lo=-5, hi=5)
        est = estimate_Pt(phi, h, 0.05, "reflected", model, grid, 16, seed=11)
        record = est.to_json()
        assert set(record) >= {"functional", "h_id", "t", "mean", "std_error",
                               "n_paths", "seed"}
        assert record["functional"] == "clipped_affine"
        assert record["t"] == 0.05
        assert len(record["h_id"]) == 12

    def test_rejects_off_mesh_time(self, small):
        grid, model, e1, h = small
        phi = clipped_affine(e1, grid.dx)
        with pytest.raises(ValueError):
            estimate_Pt(phi, h, 0.0505, "reflected", model, grid, 16, seed=0)

    def test_two_stage_semigroup_consistency(self):
        grid = make_grid(31, 2e-3, 0.12)
        model = standard_model()
        e1 = spectral_basis(31).modes[0]
        h = np.maximum(0.8 * e1, 0.0)
        phi = exp_neg_pair(e1, grid.dx, lo=0.1, hi=1.0)
        direct = estimate_Pt(phi, h, 0.12, "reflected", model, grid, 2048, seed=21)
        n_outer, n_inner = 32, 64
        mid = run_ensemble(h[None, :], grid.step_of(0.06), "reflected", model, grid,
                           seed=21, n_paths=n_outer)[0]
        inner = run_ensemble(mid.T, grid.step_of(0.06), "reflected", model, grid,
                             seed=21, n_paths=n_inner, stream_offset=10_000)
        per_outer = np.mean(phi.value(inner.transpose(1, 0, 2)), axis=1)
        nested = float(np.mean(per_outer))
        se_nested = float(np.std(per_outer, ddof=1) / math.sqrt(n_outer))
        gap = abs(direct.mean - nested)
        assert gap <= 3.0 * math.sqrt(direct.std_error**2 + se_nested**2) + 5e-3


class TestEstimateLogAndVariance:
    def test_log_constant(self, small):
        grid, model, e1, h = small
        phi = clipped_affine(e1, grid.dx, offset=0.5, lo=0.5, hi=0.5)
        est = estimate_Pt_log(phi, h, 0.05, "reflected", model, grid, 32, seed=2)
        assert est.mean == pytest.approx(math.log(0.5), rel=1e-12)

    def test_log_t_zero(self, small):
        grid, model, e1, h = small
        phi = exp_neg_pair(e1, grid.dx, lo=0.1, hi=1.0)
        est = estimate_Pt_log(phi, h, 0.0, "reflected", model, grid, 32, seed=2)
        assert est.mean == pytest.approx(math.log(float(phi.value(h))), rel=1e-12)

    def test_jensen_inequality(self, small):
        grid, model, e1, h = small
        phi = exp_neg_pair(e1, grid.dx, lo=0.1, hi=1.0)
        log_est = estimate_Pt_log(phi, h, 0.05, "reflected", model, grid, 256, seed=6)
        mean_est = estimate_Pt(phi, h, 0.05, "reflected", model, grid, 256, seed=6)
        # shared paths make this a sure inequality, no slack needed
        assert log_est.mean <= math.log(mean_est.mean) + 1e-12

    def test_log_requires_strict_positivity(self, small):
        grid, model, e1, h = small
        phi = clipped_affine(e1, grid.dx, lo=0.0, hi=1.0)
        with pytest.raises(ValueError):
            estimate_Pt_log(phi, h, 0.05, "reflected", model, grid, 16, seed=0)

    def test_functional_contract_error(self, small):
        from rspde.semigroup import Functional

        class LyingFunctional(Functional):
            # declares a floor its values do not honour
            @property
            def lower_bound(self):
                return 0.45

            @property
            def strictly_positive(self):
                return True

        grid, model, _, h = small
        e2 = spectral_basis(31).modes[1]  # sign-changing pairing direction
        phi = LyingFunctional("clipped_affine", e2, grid.dx, offset=0.5, lo=0.0, hi=2.0)
        with pytest.raises(FunctionalContractError):
            estimate_Pt_log(phi, h, 0.05, "reflected", model, grid, 256, seed=8)

    def test_variance_constant_zero(self, small):
        grid, model, e1, h = small
        phi = clipped_affine(e1, grid.dx, offset=0.3, lo=0.3, hi=0.3)
        est = estimate_variance(phi, h, 0.05, "reflected", model, grid, 64, seed=2)
        assert est.mean == 0.0

    def test_variance_t_zero(self, small):
        grid, model, e1, h = small
        phi = clipped_affine(e1, grid.dx)
        est = estimate_variance(phi, h, 0.0, "reflected", model, grid, 64, seed=2)
        assert est.mean == 0.0 and est.std_error == 0.0

    def test_variance_positive_with_bootstrap(self, small):
        grid, model, e1, h = small
        phi = clipped_affine(e1, grid.dx, lo=-5, hi=5)
        fields = run_ensemble(h[None, :], grid.n_steps, "reflected", model, grid,
                              seed=14, n_paths=400)[0]
        values = phi.value(fields)
        est = estimate_variance(phi, h, 0.05, "reflected", model, grid, 400, seed=14)
        assert est.mean > 0.0
        assert bootstrap_variance_positive(values, seed=14)


class TestEstimateGrad:
    def test_constant_functional_zero(self, small):
        grid, model, e1, h = small
        phi = clipped_affine(e1, grid.dx, offset=0.4, lo=0.4, hi=0.4)
        est = estimate_grad_Pt(phi, h, 0.05, "reflected", model, grid, 32, seed=2)
        assert est.value == 0.0

    def test_t_zero_recovers_functional_gradient(self, small):
        grid, model, e1, h = small
        phi = clipped_affine(e1, grid.dx, offset=0.2, lo=-10, hi=10)
        labels, fields = direction_dictionary(grid, 1, include_parts=False)
        est = estimate_grad_Pt(phi, h, 0.0, "reflected", model, grid, 32, seed=2,
                               directions=(labels, fields))
        assert est.value == pytest.approx(float(phi.grad_norm(h)), rel=1e-10)

    def test_direction_dictionary_shapes(self, small):
        grid, _, _, _ = small
        labels, fields = direction_dictionary(grid, 8, include_parts=False)
        assert labels == [f"e{i}" for i in range(1, 9)]
        labels_p, fields_p = direction_dictionary(grid, 8, include_parts=True)
        assert len(labels_p) == 8 + 7 * 2  # first-mode parts are degenerate
        for f in fields_p:
            assert l2_norm(f, grid.dx) == pytest.approx(1.0, rel=1e-12)

    def test_boundary_directions_rejected(self, small):
        grid, model, e1, _ = small
        phi = clipped_affine(e1, grid.dx, lo=-5, hi=5)
        # field supported on the left half: probes into the dead zone move
        # h - delta*k outside the cone and get rejected, in-support probes stay
        h_half = np.maximum(spectral_basis(31).modes[1], 0.0)
        est = estimate_grad_Pt(phi, h_half, 0.0, "reflected", model, grid, 16, seed=2)
        rejected = {lbl for lbl, _ in est.rejected}
        kept = {lbl for lbl, _, _ in est.per_direction}
        assert "e1" in rejected
        assert "e2+" in kept

    def test_all_directions_rejected_raises(self, small):
        grid, model, e1, _ = small
        phi = clipped_affine(e1, grid.dx, lo=-5, hi=5)
        with pytest.raises(ValueError):
            estimate_grad_Pt(phi, np.zeros(grid.n_space), 0.0, "reflected", model,
                             grid, 16, seed=2)

    def test_accepts_bare_direction_list(self, small):
        grid, model, e1, h = small
        phi = clipped_affine(e1, grid.dx, offset=0.2, lo=-10, hi=10)
        est = estimate_grad_Pt(phi, h, 0.0, "reflected", model, grid, 16, seed=2,
                               directions=[e1])
        assert est.best_direction == "k0"
        assert est.value == pytest.approx(float(phi.grad_norm(h)), rel=1e-10)

    def test_coupled_beats_uncoupled_stderror(self, small):
        grid, model, e1, h = small
        phi = clipped_affine(e1, grid.dx, lo=-5, hi=5)
        delta = 1e-3
        est = estimate_grad_Pt(phi, h, 0.05, "reflected", model, grid, 1000, seed=5,
                               directions=(["e1"], [e1]), delta=delta)
        hp = np.maximum(h + delta * e1, 0.0)
        hm = np.maximum(h - delta * e1, 0.0)
        up = estimate_Pt(phi, hp, 0.05, "reflected", model, grid, 1000, seed=5)
        um = estimate_Pt(phi, hm, 0.05, "reflected", model, grid, 1000, seed=987_654)
        se_uncoupled = math.sqrt(up.std_error**2 + um.std_error**2) / (2 * delta)
        assert est.std_error < se_uncoupled
