"""Time integrators: penalized, reflected (with reflection ledger), tangent.

All three share the same splitting per step: explicit drift + noise, implicit
half-Laplacian solve, then a nodewise nonlinear stage (penalty resolvent or
projection onto the nonnegative cone).  The step functions accept fields of
shape (n_space,) or (n_space, n_paths); every operation is elementwise per
path, so batched results match single-path runs bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientModel
from .grid_noise import NoisePlan, SpaceTimeGrid, sample_increments
from .heat import _cached_solver

__all__ = [
    "BlowUpError",
    "UnsupportedModelError",
    "ReflectionLedger",
    "Trajectory",
    "penalty_resolvent",
    "penalty_resolvent_deriv",
    "step_penalized",
    "step_reflected",
    "solve_path",
    "solve_tangent",
    "deterministic_obstacle",
]


class BlowUpError(RuntimeError):
    """Integrator produced NaN/inf; carries the failing step index."""

    def __init__(self, step, max_abs):
        super().__init__(f"blow-up at step {step}: max |u| = {max_abs}")
        self.step = step
        self.max_abs = max_abs


class UnsupportedModelError(ValueError):
    """Tangent integration asked for on a model without derivatives."""


@dataclass
class ReflectionLedger:
    """Accumulated nonnegative reflection mass (discrete constraint measure).

    ``node_mass`` aggregates cell masses per node (or per node and path for
    batched runs); ``complementarity_sum`` accumulates sum(u_new * d_eta)
    across steps, which the projection keeps at exactly 0.0 because mass is
    recorded only at nodes where the projected value is exactly zero.
    """

    dx: float
    node_mass: np.ndarray
    total: float = 0.0
    complementarity_sum: float = 0.0
    steps_recorded: int = 0
    per_step: list | None = None

    @classmethod
    def empty(cls, dx: float, shape, record_full: bool = False) -> "ReflectionLedger":
        return cls(
            dx=dx,
            node_mass=np.zeros(shape),
            per_step=[] if record_full else None,
        )

    def record(self, d_eta: np.ndarray, u_new: np.ndarray) -> None:
        self.node_mass += d_eta
        self.total += float(np.sum(d_eta))
        self.complementarity_sum += float(np.sum(u_new * d_eta))
        self.steps_recorded += 1
        if self.per_step is not None:
            self.per_step.append(d_eta.copy())


@dataclass
class Trajectory:
    """Snapshots of one run plus enough metadata to regenerate it."""

    times: np.ndarray
    fields: np.ndarray
    initial: np.ndarray
    ledger: ReflectionLedger | None
    meta: dict = field(default_factory=dict)

    def at(self, t: float) -> np.ndarray:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"no snapshot at t={t}; stored times {self.times}")
        return self.fields[idx]


# ---------------------------------------------------------------------------
# nonlinear stages
# ---------------------------------------------------------------------------

def penalty_resolvent(v: np.ndarray, dt_over_eps: float, kind: str) -> np.ndarray:
    """Solve u = v + (dt/eps) f(u) nodewise.

    For f(u) = max(-u,0) the solve is closed form: u = v where v >= 0, else
    v/(1 + dt/eps).  For the arctan penalty a safeguarded Newton sweep runs
    to 1e-12 on the negative branch.
    """
    if kind == "negative_part":
        return np.where(v >= 0.0, v, v / (1.0 + dt_over_eps))
    if kind == "arctan_square":
        u = np.array(v, dtype=float, copy=True)
        neg = v < 0.0
        if np.any(neg):
            vn = v[neg]
            # root lies in [vn, 0]; Newton with a bisection safeguard so the
            # iteration cannot cycle when dt/eps is large
            lo = vn.copy()
            hi = np.zeros_like(vn)
            un = 0.5 * (lo + hi)
            for _ in range(300):
                g = un - dt_over_eps * np.arctan(un * un) - vn
                if np.max(np.abs(g) / (1.0 + np.abs(vn))) < 1e-12:
                    break
                np.copyto(lo, un, where=g < 0.0)
                np.copyto(hi, un, where=g >= 0.0)
                gp = 1.0 - dt_over_eps * 2.0 * un / (1.0 + un ** 4)
                nxt = un - g / gp
                outside = (nxt <= lo) | (nxt >= hi) | ~np.isfinite(nxt)
                np.copyto(nxt, 0.5 * (lo + hi), where=outside)
                un = nxt
            else:
                raise RuntimeError("arctan penalty resolvent did not converge")
            u[neg] = un
        return u
    raise ValueError(f"unknown penalty kind {kind!r}")


def penalty_resolvent_deriv(u_new: np.ndarray, dt_over_eps: float, kind: str) -> np.ndarray:
    """Derivative of the resolvent map v -> u through the stored output u_new.

    Equals 1/(1 - (dt/eps) f'(u_new)); the a.e. convention f'(0) = 0 makes
    the factor 1 on {u_new >= 0}.
    """
    if kind == "negative_part":
        return np.where(u_new < 0.0, 1.0 / (1.0 + dt_over_eps), 1.0)
    if kind == "arctan_square":
        w = np.minimum(u_new, 0.0)
        return 1.0 / (1.0 - dt_over_eps * 2.0 * w / (1.0 + w ** 4))
    raise ValueError(f"unknown penalty kind {kind!r}")


def _drift_noise_stage(u, model, grid, dW):
    return u + grid.dt * model.b(u) + model.sigma(u) * (dW / grid.dx)


def _check_finite(u, step):
    if not np.all(np.isfinite(u)):
        finite = u[np.isfinite(u)]
        raise BlowUpError(step, float(np.max(np.abs(finite), initial=np.inf)))


def step_penalized(u, eps, model, grid, dW, solver=None, step=None):
    """One step of the penalized scheme: drift+noise, implicit heat, resolvent."""
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if solver is None:
        solver = _cached_solver(u.shape[0], grid.dx, grid.dt)
    v = solver.solve(_drift_noise_stage(u, model, grid, dW))
    out = penalty_resolvent(v, grid.dt / eps, model.penalty_kind)
    _check_finite(out, step)
    return out


def step_reflected(u, model, grid, dW, ledger, solver=None, step=None):
    """One projected step; cell mass (v_i)^- * dx goes to the ledger."""
    if solver is None:
        solver = _cached_solver(u.shape[0], grid.dx, grid.dt)
    v = solver.solve(_drift_noise_stage(u, model, grid, dW))
    out = np.maximum(v, 0.0)
    ledger.record(np.maximum(-v, 0.0) * grid.dx, out)
    _check_finite(out, step)
    return out


# ---------------------------------------------------------------------------
# full paths
# ---------------------------------------------------------------------------

def _resolve_save_steps(grid: SpaceTimeGrid, save_at) -> list[int]:
    if save_at is None:
        return [grid.n_steps]
    steps = sorted({grid.step_of(t) for t in save_at})
    return steps or [grid.n_steps]


def solve_path(h, mode, model, grid, plan: NoisePlan, save_at=None, eps=None,
               record_full_ledger=False) -> Trajectory:
    """Integrate one trajectory from h; snapshots at the requested times.

    ``mode`` is "penalized" (requires eps) or "reflected".  The output is a
    pure function of (master_seed, stream_id, grid, model, eps, h).
    """
    h = np.asarray(h, dtype=float)
    if h.shape != (grid.n_space,):
        raise ValueError(f"h has shape {h.shape}, expected ({grid.n_space},)")
    if np.any(h < 0.0):
        raise ValueError("initial field must be entrywise >= 0")
    if mode == "penalized":
        if eps is None or eps <= 0:
            raise ValueError("penalized mode needs eps > 0")
        ledger = None
    elif mode == "reflected":
        ledger = ReflectionLedger.empty(grid.dx, h.shape, record_full_ledger)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    save_steps = _resolve_save_steps(grid, save_at)
    solver = _cached_solver(grid.n_space, grid.dx, grid.dt)
    snapshots = {}
    u = h.copy()
    if 0 in save_steps:
        snapshots[0] = u.copy()
    for m in range(grid.n_steps):
        dW = sample_increments(plan, grid, m)
        if mode == "penalized":
            u = step_penalized(u, eps, model, grid, dW, solver, step=m)
        else:
            u = step_reflected(u, model, grid, dW, ledger, solver, step=m)
        if m + 1 in save_steps:
            snapshots[m + 1] = u.copy()

    times = np.array([s * grid.dt for s in save_steps])
    fields = np.stack([snapshots[s] for s in save_steps])
    meta = {
        "mode": mode,
        "eps": eps,
        "master_seed": plan.master_seed,
        "stream_id": plan.stream_id,
        "counter": plan.counter,
        "model": model.name,
        "n_space": grid.n_space,
        "dt": grid.dt,
        "n_steps": grid.n_steps,
    }
    return Trajectory(times=times, fields=fields, initial=h.copy(), ledger=ledger, meta=meta)


def solve_tangent(u_path: Trajectory, k, eps, model: CoefficientModel,
                  grid: SpaceTimeGrid, plan: NoisePlan) -> Trajectory:
    """Integrate the derivative flow along the stored penalized path.

    The base path is regenerated from (initial, plan) step by step -- by
    determinism this reproduces u_path exactly -- while the linearized update
    runs in lockstep with the same noise increments.  The result is the exact
    derivative of the discrete one-step map, with the penalty stage
    differentiated through the resolvent.
    """
    if not model.differentiable:
        raise UnsupportedModelError(
            f"model {model.name!r} has no declared derivatives; tangent flow unavailable"
        )
    if u_path.meta.get("mode") != "penalized":
        raise ValueError("tangent flow is defined along penalized paths")
    if eps is None or eps <= 0:
        raise ValueError("eps must be > 0")
    k = np.asarray(k, dtype=float)
    solver = _cached_solver(grid.n_space, grid.dx, grid.dt)
    q = grid.dt / eps
    save_steps = [grid.step_of(t) for t in u_path.times]
    snapshots = {}
    u = u_path.initial.copy()
    v = k.copy()
    if 0 in save_steps:
        snapshots[0] = v.copy()
    for m in range(grid.n_steps):
        dW = sample_increments(plan, grid, m)
        xi = dW / grid.dx
        w_u = u + grid.dt * model.b(u) + model.sigma(u) * xi
        w_v = v + grid.dt * model.db(u) * v + model.dsigma(u) * v * xi
        u = penalty_resolvent(solver.solve(w_u), q, model.penalty_kind)
        v = solver.solve(w_v) * penalty_resolvent_deriv(u, q, model.penalty_kind)
        _check_finite(v, m)
        if m + 1 in save_steps:
            snapshots[m + 1] = v.copy()
    times = np.array([s * grid.dt for s in save_steps])
    fields = np.stack([snapshots[s] for s in save_steps]) if snapshots else np.empty((0, grid.n_space))
    meta = dict(u_path.meta, mode="tangent", eps=eps)
    return Trajectory(times=times, fields=fields, initial=k.copy(), ledger=None, meta=meta)


def deterministic_obstacle(v, grid: SpaceTimeGrid):
    """Minimal nonnegative correction z with z + v >= 0 and exact complementarity.

    ``v`` is either an array of shape (n_steps+1, n_space) sampled on the
    grid times or a callable t -> field.  Per step, z takes an implicit heat
    step and is then lifted by exactly the amount needed to keep z + v
    nonnegative; the lift mass (times dx) goes to the ledger.  Returns the
    full history of z and the ledger.
    """
    if callable(v):
        v_arr = np.stack([np.asarray(v(t), dtype=float) for t in grid.times()])
    else:
        v_arr = np.asarray(v, dtype=float)
    if v_arr.shape != (grid.n_steps + 1, grid.n_space):
        raise ValueError(
            f"obstacle data has shape {v_arr.shape}, expected {(grid.n_steps + 1, grid.n_space)}"
        )
    if np.any(v_arr[0] < 0.0):
        raise ValueError("v(0) must be entrywise >= 0")
    solver = _cached_solver(grid.n_space, grid.dx, grid.dt)
    ledger = ReflectionLedger.empty(grid.dx, (grid.n_space,))
    z_hist = np.zeros_like(v_arr)
    z = np.zeros(grid.n_space)
    for m in range(1, grid.n_steps + 1):
        z_star = solver.solve(z)
        w = z_star + v_arr[m]
        lift = np.maximum(-w, 0.0)
        z = z_star + lift
        ledger.record(lift * grid.dx, np.maximum(w, 0.0))
        z_hist[m] = z
    return z_hist, ledger
