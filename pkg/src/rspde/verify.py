"""Pass/fail experiments for the semigroup smoothing bounds.

Every checker is one-sided: it can confirm that an upper bound holds with
margin, never that a constant is sharp.  Gates allow 3 combined standard
errors of Monte Carlo slack plus a discretization allowance
5*(dt + dx^2)*scale, since the target inequalities hold for the continuum
dynamics and the artifact tests a discretized proxy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coefficients import BoundProfile, CoefficientModel, harnack_rhs
from .grid_noise import NoisePlan, SpaceTimeGrid, increments_matrix, l2_norm, sup_norm
from .heat import _cached_solver
from .semigroup import (
    Functional,
    estimate_grad_Pt,
    estimate_Pt,
    estimate_Pt_grad_sq,
    estimate_Pt_log,
    estimate_variance,
    run_ensemble,
)
from .solver import ReflectionLedger, penalty_resolvent

__all__ = [
    "CheckReport",
    "check_gradient_estimate",
    "check_log_harnack",
    "check_variance_bound",
    "check_lipschitz_Pt",
    "check_initial_continuity",
    "check_eps_monotonicity",
    "check_eps_convergence",
    "gronwall_bound",
    "reports_to_csv",
]


@dataclass
class CheckReport:
    check: str
    passed: bool
    lhs: float
    rhs: float
    std_errors: dict
    margin_ratio: float
    inputs: dict
    seed: int
    config_hash: str = ""
    notes: list[str] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_json(self) -> dict:
        return {
            "check": self.check,
            "verdict": self.verdict,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "std_errors": self.std_errors,
            "margin_ratio": self.margin_ratio,
            "inputs": self.inputs,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "notes": self.notes,
        }

    def __str__(self) -> str:
        return (
            f"{self.check}: {self.verdict}  lhs={self.lhs:.6g}  rhs={self.rhs:.6g}  "
            f"margin_ratio={self.margin_ratio:.3g}"
        )


def reports_to_csv(reports) -> str:
    """Summary table for a parameter sweep, one row per check report."""
    lines = ["check,verdict,lhs,rhs,margin_ratio,seed,config_hash"]
    for r in reports:
        lines.append(
            f"{r.check},{r.verdict},{r.lhs:.17g},{r.rhs:.17g},"
            f"{r.margin_ratio:.17g},{r.seed},{r.config_hash}"
        )
    return "\n".join(lines) + "\n"


def _combined_se(*ses: float) -> float:
    return math.sqrt(sum(s * s for s in ses))


def _allowance(grid: SpaceTimeGrid, *magnitudes: float) -> float:
    scale = max(abs(m) for m in magnitudes)
    return 5.0 * (grid.dt + grid.dx ** 2) * scale


def _margin(lhs: float, rhs: float) -> float:
    if lhs <= 0.0:
        return math.inf
    return rhs / lhs


def check_gradient_estimate(phi: Functional, h, t, mode, model: CoefficientModel,
                            grid: SpaceTimeGrid, n_paths: int, seed: int, eps=None,
                            directions=None, delta=None, m_scale: float = 1.0) -> CheckReport:
    """Gate |grad P_t Phi|^2 <= 2 M e^{zeta(t)} P_t |grad Phi|^2.

    The left side uses the coupled finite-difference proxy (a lower bound,
    which is what a one-sided upper-bound check needs).  ``m_scale``
    rescales M for fail-injection tests.
    """
    if not phi.is_c1:
        raise ValueError("gradient estimate check needs a C1 catalogue functional")
    if t <= 0:
        raise ValueError("t must be > 0")
    grad = estimate_grad_Pt(phi, h, t, mode, model, grid, n_paths, seed,
                            eps=eps, directions=directions, delta=delta)
    pgs = estimate_Pt_grad_sq(phi, h, t, mode, model, grid, n_paths, seed, eps=eps)
    profile = BoundProfile(model.L_b, model.L_sigma)
    factor = 2.0 * m_scale * profile.M * math.exp(profile.zeta(t))
    lhs = grad.value ** 2
    se_lhs = 2.0 * grad.value * grad.std_error
    rhs = factor * pgs.mean
    se_rhs = factor * pgs.std_error
    slack = 3.0 * _combined_se(se_lhs, se_rhs) + _allowance(grid, lhs, rhs)
    return CheckReport(
        check="gradient",
        passed=lhs <= rhs + slack,
        lhs=lhs,
        rhs=rhs,
        std_errors={"lhs": se_lhs, "rhs": se_rhs},
        margin_ratio=_margin(lhs, rhs),
        inputs={"t": t, "n_paths": n_paths, "model": model.name, "m_scale": m_scale,
                "best_direction": grad.best_direction, "delta": grad.delta,
                "rejected_directions": [lbl for lbl, _ in grad.rejected]},
        seed=seed,
    )


def check_log_harnack(phi: Functional, h1, h2, t, mode, model: CoefficientModel,
                      grid: SpaceTimeGrid, n_paths: int, seed: int, eps=None,
                      m_scale: float = 1.0) -> CheckReport:
    """Gate P_t log Phi(h1) <= log P_t Phi(h2) + M |h1-h2|^2 / (k1^2 int_0^t e^{-zeta}).

    The log of the h2-side mean gets a delta-method standard error.
    """
    if t <= 0:
        raise ValueError("t must be > 0")
    if not phi.strictly_positive:
        raise ValueError("log-Harnack check needs a strictly positive functional")
    h1 = np.asarray(h1, float)
    h2 = np.asarray(h2, float)
    left = estimate_Pt_log(phi, h1, t, mode, model, grid, n_paths, seed, eps=eps)
    right = estimate_Pt(phi, h2, t, mode, model, grid, n_paths, seed, eps=eps)
    profile = BoundProfile(model.L_b, model.L_sigma)
    dist2 = float(l2_norm(h1 - h2, grid.dx)) ** 2
    additive = m_scale * harnack_rhs(t, dist2, profile, model.kappa1) if dist2 > 0 else 0.0
    lhs = left.mean
    rhs = math.log(right.mean) + additive
    se_rhs = right.std_error / right.mean
    slack = 3.0 * _combined_se(left.std_error, se_rhs) + _allowance(grid, lhs, math.log(right.mean))
    return CheckReport(
        check="log-harnack",
        passed=lhs <= rhs + slack,
        lhs=lhs,
        rhs=rhs,
        std_errors={"lhs": left.std_error, "rhs": se_rhs},
        margin_ratio=_margin(abs(lhs), abs(rhs)) if lhs != 0 else math.inf,
        inputs={"t": t, "n_paths": n_paths, "model": model.name, "dist2": dist2,
                "additive_term": additive, "m_scale": m_scale},
        seed=seed,
    )


def check_variance_bound(phi: Functional, h, t, mode, model: CoefficientModel,
                         grid: SpaceTimeGrid, n_paths: int, seed: int, eps=None,
                         m_scale: float = 1.0) -> CheckReport:
    """Gate P_t Phi^2 - (P_t Phi)^2 <= 2 M k2^2 P_t |grad Phi|^2 int_0^t e^{zeta}."""
    if t <= 0:
        raise ValueError("t must be > 0")
    if not phi.is_c1:
        raise ValueError("variance bound check needs a C1 catalogue functional")
    var = estimate_variance(phi, h, t, mode, model, grid, n_paths, seed, eps=eps)
    pgs = estimate_Pt_grad_sq(phi, h, t, mode, model, grid, n_paths, seed, eps=eps)
    profile = BoundProfile(model.L_b, model.L_sigma)
    factor = 2.0 * m_scale * profile.M * model.kappa2 ** 2 * profile.int_exp_zeta(t)
    lhs = var.mean
    rhs = factor * pgs.mean
    se_rhs = factor * pgs.std_error
    slack = 3.0 * _combined_se(var.std_error, se_rhs) + _allowance(grid, lhs, rhs)
    return CheckReport(
        check="variance",
        passed=lhs <= rhs + slack,
        lhs=lhs,
        rhs=rhs,
        std_errors={"lhs": var.std_error, "rhs": se_rhs},
        margin_ratio=_margin(lhs, rhs),
        inputs={"t": t, "n_paths": n_paths, "model": model.name, "m_scale": m_scale},
        seed=seed,
    )


def check_lipschitz_Pt(phi: Functional, h, t, mode, model: CoefficientModel,
                       grid: SpaceTimeGrid, n_paths: int, seed: int, eps=None,
                       directions=None, delta=None, m_scale: float = 1.0) -> CheckReport:
    """Gate |grad P_t Phi|^2 <= (2M / (k1^2 int_0^t e^{-zeta})) * variance.

    Works for merely bounded Phi, so it doubles as the empirical
    strong-Feller check: the finite-difference proxy stays finite at t > 0
    even when |grad Phi| is unbounded.
    """
    if t <= 0:
        raise ValueError("t must be > 0")
    grad = estimate_grad_Pt(phi, h, t, mode, model, grid, n_paths, seed,
                            eps=eps, directions=directions, delta=delta)
    var = estimate_variance(phi, h, t, mode, model, grid, n_paths, seed, eps=eps)
    profile = BoundProfile(model.L_b, model.L_sigma)
    factor = 2.0 * m_scale * profile.M / (model.kappa1 ** 2 * profile.int_exp_neg_zeta(t))
    lhs = grad.value ** 2
    se_lhs = 2.0 * grad.value * grad.std_error
    rhs = factor * var.mean
    se_rhs = factor * var.std_error
    slack = 3.0 * _combined_se(se_lhs, se_rhs) + _allowance(grid, lhs, rhs)
    return CheckReport(
        check="lipschitz",
        passed=lhs <= rhs + slack,
        lhs=lhs,
        rhs=rhs,
        std_errors={"lhs": se_lhs, "rhs": se_rhs},
        margin_ratio=_margin(lhs, rhs),
        inputs={"t": t, "n_paths": n_paths, "model": model.name, "m_scale": m_scale,
                "best_direction": grad.best_direction},
        seed=seed,
    )


def check_initial_continuity(h1, h2, p, mode, model: CoefficientModel,
                             grid: SpaceTimeGrid, n_paths: int, seed: int, eps=None,
                             ladder=(1.0, 0.5, 0.25)) -> CheckReport:
    """Initial-data continuity: E[sup_{[0,T]x[0,1]} |u(h1) - u(h2_s)|^p]
    should scale like |h1 - h2_s|_inf^p along a geometric ladder.

    The ladder interpolates h2_s = h1 + s (h2 - h1) (a convex combination,
    so it stays in the cone); all runs share noise.  Passes when the ratio
    estimate / |h1-h2_s|_inf^p varies by less than 2x across the ladder.
    """
    h1 = np.asarray(h1, float)
    h2 = np.asarray(h2, float)
    if p < 1:
        raise ValueError("p must be >= 1")
    diff = h2 - h1
    if float(sup_norm(diff)) == 0.0:
        raise ValueError("h1 and h2 coincide; the ladder is degenerate")
    variants = [h1] + [h1 + s * diff for s in ladder]
    pairs = [(0, 1 + j) for j in range(len(ladder))]
    _, sups = run_ensemble(np.stack(variants), grid.n_steps, mode, model, grid,
                           seed, n_paths, eps=eps, track_sup_pairs=pairs)
    ratios = []
    ses = {}
    for j, s in enumerate(ladder):
        denom = float(sup_norm(s * diff)) ** p
        vals = sups[j] ** p / denom
        ratios.append(float(np.mean(vals)))
        ses[f"s={s:g}"] = float(np.std(vals, ddof=1) / math.sqrt(n_paths))
    spread = max(ratios) / min(ratios)
    return CheckReport(
        check="continuity",
        passed=spread < 2.0,
        lhs=spread,
        rhs=2.0,
        std_errors=ses,
        margin_ratio=2.0 / spread if spread > 0 else math.inf,
        inputs={"p": p, "ladder": list(ladder), "ratios": ratios,
                "sup_diffs": [float(sup_norm(s * diff)) for s in ladder],
                "n_paths": n_paths, "model": model.name},
        seed=seed,
    )


def check_eps_monotonicity(h, model: CoefficientModel, grid: SpaceTimeGrid,
                           eps_big: float, eps_small: float, n_paths: int, seed: int,
                           max_violation_fraction: float = 1e-3) -> CheckReport:
    """Pathwise ordering under shared noise: the harder-penalized solution
    (smaller eps) should dominate, up to discretization slack.

    Counts grid points over all steps, nodes, and paths where
    u_small < u_big - 5 (dt + dx^2) * (running max |u|); passes when the
    violating fraction stays below ``max_violation_fraction``.
    """
    if not eps_small < eps_big:
        raise ValueError("need eps_small < eps_big")
    h = np.asarray(h, float)
    plan = NoisePlan(seed)
    solver = _cached_solver(grid.n_space, grid.dx, grid.dt)
    streams = np.arange(n_paths)
    u_big = np.broadcast_to(h[:, None], (grid.n_space, n_paths)).copy()
    u_small = u_big.copy()
    q_big = grid.dt / eps_big
    q_small = grid.dt / eps_small
    running_scale = np.maximum(np.max(np.abs(u_big), axis=0), 1e-300)
    violations = 0
    worst = 0.0
    for m in range(grid.n_steps):
        dW = increments_matrix(plan, grid, m, streams)
        xi = dW / grid.dx
        for which in ("big", "small"):
            u = u_big if which == "big" else u_small
            w = u + grid.dt * model.b(u) + model.sigma(u) * xi
            v = solver.solve(w)
            out = penalty_resolvent(v, q_big if which == "big" else q_small, model.penalty_kind)
            if which == "big":
                u_big = out
            else:
                u_small = out
        running_scale = np.maximum(running_scale, np.max(np.abs(u_big), axis=0))
        running_scale = np.maximum(running_scale, np.max(np.abs(u_small), axis=0))
        tol = 5.0 * (grid.dt + grid.dx ** 2) * running_scale
        gap = u_big - u_small - tol
        violations += int(np.count_nonzero(gap > 0.0))
        if gap.size:
            worst = max(worst, float(np.max(gap)))
    total = grid.n_steps * grid.n_space * n_paths
    fraction = violations / total
    return CheckReport(
        check="comparison",
        passed=fraction < max_violation_fraction,
        lhs=fraction,
        rhs=max_violation_fraction,
        std_errors={},
        margin_ratio=max_violation_fraction / fraction if fraction > 0 else math.inf,
        inputs={"eps_big": eps_big, "eps_small": eps_small, "n_paths": n_paths,
                "worst_violation": worst, "points_checked": total, "model": model.name},
        seed=seed,
    )


def check_eps_convergence(h, model: CoefficientModel, grid: SpaceTimeGrid,
                          eps_ladder, n_paths: int, seed: int) -> CheckReport:
    """Penalized-to-reflected convergence: under shared noise the sup
    distance E[sup_{t,x} |u_eps - u_reflected|] must decrease along a
    decreasing eps ladder, and the reflected run must stay exactly
    nonnegative."""
    eps_ladder = sorted(eps_ladder, reverse=True)
    h = np.asarray(h, float)
    plan = NoisePlan(seed)
    solver = _cached_solver(grid.n_space, grid.dx, grid.dt)
    streams = np.arange(n_paths)
    n_eps = len(eps_ladder)
    U = np.broadcast_to(h[:, None, None], (grid.n_space, n_eps + 1, n_paths)).copy()
    qs = [grid.dt / e for e in eps_ladder]
    sup_dist = np.zeros((n_eps, n_paths))
    ledger = ReflectionLedger.empty(grid.dx, (grid.n_space, n_paths))
    min_reflected = 0.0
    for m in range(grid.n_steps):
        dW = increments_matrix(plan, grid, m, streams)
        xi = (dW / grid.dx)[:, None, :]
        W = U + grid.dt * model.b(U) + model.sigma(U) * xi
        Vmid = solver.solve(W.reshape(grid.n_space, (n_eps + 1) * n_paths)).reshape(U.shape)
        for j, q in enumerate(qs):
            U[:, j, :] = penalty_resolvent(Vmid[:, j, :], q, model.penalty_kind)
        v_ref = Vmid[:, n_eps, :]
        u_ref = np.maximum(v_ref, 0.0)
        ledger.record(np.maximum(-v_ref, 0.0) * grid.dx, u_ref)
        U[:, n_eps, :] = u_ref
        min_reflected = min(min_reflected, float(np.min(u_ref)))
        for j in range(n_eps):
            np.maximum(sup_dist[j], np.max(np.abs(U[:, j, :] - u_ref), axis=0), out=sup_dist[j])
    means = [float(np.mean(sup_dist[j])) for j in range(n_eps)]
    decreasing = all(means[j + 1] < means[j] for j in range(n_eps - 1))
    nonneg = min_reflected >= 0.0
    return CheckReport(
        check="eps-convergence",
        passed=decreasing and nonneg,
        lhs=means[-1],
        rhs=means[0],
        std_errors={f"eps={e:g}": float(np.std(sup_dist[j], ddof=1) / math.sqrt(n_paths))
                    for j, e in enumerate(eps_ladder)},
        margin_ratio=means[0] / means[-1] if means[-1] > 0 else math.inf,
        inputs={"eps_ladder": list(eps_ladder), "sup_distances": means,
                "reflected_min": min_reflected, "n_paths": n_paths, "model": model.name,
                "ledger_total": ledger.total,
                "complementarity_sum": ledger.complementarity_sum},
        seed=seed,
        notes=["sup distances must decrease along the ladder; reflected run must stay >= 0"],
    )


def gronwall_bound(alpha, beta, gamma, t: float, n_nodes: int = 2001) -> float:
    """alpha(t) + beta(t) * int_0^t alpha(s) gamma(s) exp(int_s^t beta gamma) ds.

    This is the closed envelope implied by psi <= alpha + beta * int gamma psi;
    inputs are callables sampled on a uniform quadrature mesh and must be
    nonnegative there.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    a_t = float(alpha(t))
    b_t = float(beta(t))
    if t == 0:
        return a_t
    s = np.linspace(0.0, t, n_nodes)
    a = np.array([float(alpha(v)) for v in s])
    b = np.array([float(beta(v)) for v in s])
    g = np.array([float(gamma(v)) for v in s])
    if np.any(a < 0) or np.any(b < 0) or np.any(g < 0):
        raise ValueError("alpha, beta, gamma must be nonnegative on [0, t]")
    bg = b * g
    h = s[1] - s[0]
    cum = np.concatenate(([0.0], np.cumsum(0.5 * (bg[1:] + bg[:-1]) * h)))
    integrand = a * g * np.exp(cum[-1] - cum)
    return a_t + b_t * float(np.trapezoid(integrand, s))
