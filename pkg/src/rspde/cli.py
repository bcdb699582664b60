"""Command-line front end: simulate, check, bounds, converge-eps.

Exit codes are a stable contract for CI: 0 on success/PASS, 2 when an
inequality check FAILs, 1 on configuration or execution errors.  Every
output file embeds the config hash and seed; reruns of the same config
produce identical numeric content regardless of RSPDE_THREADS.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from .coefficients import BoundProfile, constant_M, zeta
from .config import ConfigError
from .grid_noise import NoisePlan, with_stream
from .semigroup import functional_from_config
from .solver import solve_path
from .verify import (
    check_eps_convergence,
    check_eps_monotonicity,
    check_gradient_estimate,
    check_initial_continuity,
    check_lipschitz_Pt,
    check_log_harnack,
    check_variance_bound,
)

__all__ = ["main", "cmd_simulate", "cmd_check", "cmd_bounds", "cmd_converge_eps"]


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def _provenance_line(cfg_hash, seed, stream):
    return f"# config_hash={cfg_hash} seed={seed} stream={stream}\n"


def _write_trajectory_csv(path, traj, cfg_hash, seed, stream):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(_provenance_line(cfg_hash, seed, stream))
        writer = csv.writer(fh)
        writer.writerow(["t", "x", "u"])
        dx = 1.0 / (traj.fields.shape[1] + 1)
        xs = dx * np.arange(1, traj.fields.shape[1] + 1)
        for t, field in zip(traj.times, traj.fields):
            for xi, ui in zip(xs, field):
                writer.writerow([_fmt(t), _fmt(xi), _fmt(ui)])


def _write_ledger_csv(path, ledger, grid, cfg_hash, seed, stream):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(_provenance_line(cfg_hash, seed, stream))
        writer = csv.writer(fh)
        writer.writerow(["x", "mass"])
        for xi, mi in zip(grid.x, ledger.node_mass):
            writer.writerow([_fmt(xi), _fmt(mi)])


def _write_npz(path, traj, grid, cfg_hash, seed, stream):
    np.savez(path, t=traj.times, x=grid.x, u=traj.fields,
             config_hash=np.array(cfg_hash), seed=np.array(seed),
             stream=np.array(stream))


def cmd_simulate(cfg: dict, out_dir: str, fmt: str = "csv") -> int:
    grid = cfgmod.build_grid(cfg)
    model = cfgmod.build_model(cfg)
    run = cfg["run"]
    mode = run["mode"]
    eps = run.get("eps")
    save_at = run.get("save_at", [grid.t_final])
    h, clip_dist = cfgmod.initial_field(grid, run.get("h_modes", cfg.get("check", {}).get("h_modes")))
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "config_hash": cfgmod.config_hash(cfg),
        "seed": run["seed"],
        "mode": mode,
        "eps": eps,
        "model": model.name,
        "grid": {"n_space": grid.n_space, "dt": grid.dt, "n_steps": grid.n_steps},
        "n_paths": run["n_paths"],
        "h_clip_distance": clip_dist,
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "files": [],
    }
    plan = NoisePlan(run["seed"])
    cfg_hash = manifest["config_hash"]
    for stream in range(run["n_paths"]):
        traj = solve_path(h, mode, model, grid, with_stream(plan, stream),
                          save_at=save_at, eps=eps)
        base = f"trajectory_{stream:03d}"
        if fmt in ("csv", "both"):
            _write_trajectory_csv(os.path.join(out_dir, base + ".csv"), traj,
                                  cfg_hash, run["seed"], stream)
            manifest["files"].append(base + ".csv")
        if fmt in ("npz", "both"):
            _write_npz(os.path.join(out_dir, base + ".npz"), traj, grid,
                       cfg_hash, run["seed"], stream)
            manifest["files"].append(base + ".npz")
        if mode == "reflected" and stream == 0:
            _write_ledger_csv(os.path.join(out_dir, "ledger_000.csv"), traj.ledger,
                              grid, cfg_hash, run["seed"], stream)
            manifest["files"].append("ledger_000.csv")
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def _run_named_check(name: str, cfg: dict, seed: int, n_paths: int, m_scale: float):
    grid = cfgmod.build_grid(cfg)
    model = cfgmod.build_model(cfg)
    run = cfg["run"]
    chk = cfg.get("check", {})
    mode = run["mode"]
    eps = run.get("eps")
    t = float(chk.get("t", grid.t_final))

    if name == "comparison":
        h, _ = cfgmod.initial_field(grid, chk.get("h_modes"))
        return check_eps_monotonicity(
            h, model, grid,
            eps_big=float(chk.get("eps_big", 1e-2)),
            eps_small=float(chk.get("eps_small", 1e-3)),
            n_paths=n_paths, seed=seed,
        )
    if name == "continuity":
        h1, _ = cfgmod.initial_field(grid, chk.get("h1_modes"))
        h2, _ = cfgmod.initial_field(grid, chk.get("h2_modes"))
        return check_initial_continuity(
            h1, h2, float(chk.get("p", 2.0)), mode, model, grid,
            n_paths=n_paths, seed=seed, eps=eps,
            ladder=tuple(chk.get("ladder", (1.0, 0.5, 0.25))),
        )

    phi = functional_from_config(grid, chk["functional"])
    if name == "gradient":
        h, _ = cfgmod.initial_field(grid, chk.get("h_modes"))
        return check_gradient_estimate(phi, h, t, mode, model, grid, n_paths, seed,
                                       eps=eps, m_scale=m_scale)
    if name == "log-harnack":
        h1, _ = cfgmod.initial_field(grid, chk.get("h1_modes"))
        h2, _ = cfgmod.initial_field(grid, chk.get("h2_modes"))
        return check_log_harnack(phi, h1, h2, t, mode, model, grid, n_paths, seed,
                                 eps=eps, m_scale=m_scale)
    if name == "variance":
        h, _ = cfgmod.initial_field(grid, chk.get("h_modes"))
        return check_variance_bound(phi, h, t, mode, model, grid, n_paths, seed,
                                    eps=eps, m_scale=m_scale)
    if name == "lipschitz":
        h, _ = cfgmod.initial_field(grid, chk.get("h_modes"))
        return check_lipschitz_Pt(phi, h, t, mode, model, grid, n_paths, seed,
                                  eps=eps, m_scale=m_scale)
    raise ConfigError(f"check.name: unknown check {name!r}")


def cmd_check(name: str, cfg: dict, out_dir: str | None, seed_override=None,
              paths_override=None, m_scale: float = 1.0) -> int:
    run = cfg["run"]
    seed = run["seed"] if seed_override is None else seed_override
    n_paths = run["n_paths"] if paths_override is None else paths_override
    report = _run_named_check(name, cfg, seed, n_paths, m_scale)
    report.config_hash = cfgmod.config_hash(cfg)
    print(report)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"report_{name}.json"), "w", encoding="utf-8") as fh:
            json.dump(report.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0 if report.passed else 2


def cmd_bounds(L_b: float, L_sigma: float, kappa1: float, t_list, out=None) -> int:
    profile = BoundProfile(L_b, L_sigma)
    writer = csv.writer(out if out is not None else sys.stdout)
    writer.writerow(["t", "M", "zeta", "int_exp_neg_zeta", "harnack_rhs_unit_dist2"])
    for t in t_list:
        writer.writerow([
            _fmt(t),
            _fmt(constant_M(L_b, L_sigma)),
            _fmt(zeta(t, L_b, L_sigma)),
            _fmt(profile.int_exp_neg_zeta(t)),
            _fmt(profile.harnack_rhs(t, 1.0, kappa1)),
        ])
    return 0


def cmd_converge_eps(cfg: dict, out_dir: str | None, seed_override=None,
                     paths_override=None) -> int:
    grid = cfgmod.build_grid(cfg)
    model = cfgmod.build_model(cfg)
    run = cfg["run"]
    chk = cfg.get("check", {})
    seed = run["seed"] if seed_override is None else seed_override
    n_paths = run["n_paths"] if paths_override is None else paths_override
    ladder = run.get("eps_ladder", chk.get("eps_ladder", [1e-2, 1e-3, 1e-4]))
    h, _ = cfgmod.initial_field(grid, chk.get("h_modes", run.get("h_modes")))
    report = check_eps_convergence(h, model, grid, ladder, n_paths, seed)
    report.config_hash = cfgmod.config_hash(cfg)
    print(report)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report_converge_eps.json"), "w", encoding="utf-8") as fh:
            json.dump(report.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0 if report.passed else 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rspde",
        description="Reflected stochastic heat equation laboratory: simulation and inequality checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="integrate trajectories and write CSV/npz + manifest")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--paths", type=int, default=None)
    p_sim.add_argument("--format", choices=("csv", "npz", "both"), default="csv")

    p_chk = sub.add_parser("check", help="run a named inequality/property check")
    p_chk.add_argument("name", choices=cfgmod.CHECK_NAMES)
    p_chk.add_argument("--config", required=True)
    p_chk.add_argument("--out", default=None)
    p_chk.add_argument("--seed", type=int, default=None)
    p_chk.add_argument("--paths", type=int, default=None)
    p_chk.add_argument("--debug-scale-m", type=float, default=1.0,
                       help="rescale the smoothing constant M (fail-injection debugging)")

    p_bnd = sub.add_parser("bounds", help="print M, zeta, and Harnack bound columns as CSV")
    p_bnd.add_argument("--L-b", type=float, required=True, dest="L_b")
    p_bnd.add_argument("--L-sigma", type=float, required=True, dest="L_sigma")
    p_bnd.add_argument("--kappa1", type=float, required=True)
    p_bnd.add_argument("--t", type=float, nargs="+", required=True)

    p_cnv = sub.add_parser("converge-eps", help="penalized-to-reflected convergence ladder")
    p_cnv.add_argument("--config", required=True)
    p_cnv.add_argument("--out", default=None)
    p_cnv.add_argument("--seed", type=int, default=None)
    p_cnv.add_argument("--paths", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            cfg = cfgmod.load_config(args.config)
            if args.seed is not None:
                cfg["run"]["seed"] = args.seed
            if args.paths is not None:
                cfg["run"]["n_paths"] = args.paths
            return cmd_simulate(cfg, args.out, args.format)
        if args.command == "check":
            cfg = cfgmod.load_config(args.config)
            return cmd_check(args.name, cfg, args.out, args.seed, args.paths,
                             args.debug_scale_m)
        if args.command == "bounds":
            return cmd_bounds(args.L_b, args.L_sigma, args.kappa1, args.t)
        if args.command == "converge-eps":
            cfg = cfgmod.load_config(args.config)
            return cmd_converge_eps(cfg, args.out, args.seed, args.paths)
        raise AssertionError("unreachable")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # execution errors are exit 1, not 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
