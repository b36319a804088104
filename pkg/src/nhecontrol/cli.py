"""Command line entry point: one subcommand per experiment kind.

Every run writes ``config.json`` (the resolved config), ``result.json``
and the experiment's CSV files and SVG figure into the output directory.
Outputs depend only on the config, so repeated runs are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from .config import KINDS, ExperimentConfig, formula_field
from .errors import BlowUpError, BudgetError, ConditioningError, ConfigError, ContractionError
from .potentials import preset

EXIT_OK, EXIT_CONFIG, EXIT_FAILED = 0, 1, 2
MODULE_ERRORS = (BlowUpError, BudgetError, ConditioningError, ContractionError)


class Partial(Exception):
    """A module error together with the summary gathered before it."""

    def __init__(self, error, summary):
        super().__init__(str(error))
        self.error = error
        self.summary = summary


# Output helpers -------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_json(data, path):
    with open(path, "w") as fh:
        json.dump(_jsonable(data), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_rows(header, rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in r])


def save_figure(path, draw, xlabel, ylabel, logx=False, logy=False):
    """Single-panel SVG with fixed metadata so reruns are byte-identical."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "nhecontrol", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        draw(ax)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if logx:
            ax.set_xscale("log")
        if logy:
            ax.set_yscale("log")
        if ax.get_legend_handles_labels()[0]:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


# Experiments ----------------------------------------------------------------

def _state(cfg, which):
    text = getattr(cfg, which)
    return formula_field(text, cfg.pde.n, cfg.pde.d, f"config.{which}")


def _potentials(cfg):
    pot = preset(cfg.potentials, cfg.pde.n)
    if pot.dim != cfg.pde.d:
        raise ConfigError(f"config.potentials: {cfg.potentials} is {pot.dim}-dimensional "
                          f"but pde.d = {cfg.pde.d}")
    return pot


def run_simulate(cfg, out):
    from .exact import stationary_control
    from .schedule import ControlSchedule
    from .solver import SolverOptions, solve_nhe, write_trajectory_csv
    pot = _potentials(cfg)
    psi0 = _state(cfg, "initial")
    u = cfg.params["control"]
    if u is None:
        u = stationary_control(cfg.pde.kappa, cfg.pde.p, pot.size, cfg.pde.d)
    if len(u) != pot.size:
        raise ConfigError(f"config.params.control: needs {pot.size} entries")
    traj = solve_nhe(psi0, ControlSchedule.constant(u, cfg.T), pot, cfg.pde.kappa, cfg.pde.p,
                     SolverOptions(record_every=cfg.params["record_every"]))
    write_trajectory_csv(traj, out / "trajectory.csv")
    save_figure(out / "figure.svg", lambda ax: ax.plot(traj.times, traj.hs_log[1]),
                "t", "||psi(t)||_H1")
    summary = {"final_h1": traj.hs_log[1][-1], "blowup": traj.blowup,
               "blowup_time": traj.blowup_time, "steps": traj.steps}
    if traj.blowup:
        raise Partial(BlowUpError(f"blow-up at t = {traj.blowup_time:.6g}"), summary)
    return summary


def run_approx_steer(cfg, out):
    from .saturation import approx_steer_positive, approx_steer_same_sign, null_steer
    from .schedule import write_schedule_csv
    from .solver import solve_split
    from .spectral import hs_norm, write_field_csv
    pot = _potentials(cfg)
    psi0 = _state(cfg, "initial")
    kappa, p, prm = cfg.pde.kappa, cfg.pde.p, cfg.params
    mode = prm["mode"]
    if mode == "null":
        res = null_steer(psi0, cfg.tol, cfg.T, pot, kappa, p, prm["s"])
        goal = psi0 * 0.0
    else:
        goal = _state(cfg, "target")
        if mode == "positive":
            res = approx_steer_positive(psi0, goal, cfg.tol, cfg.T, pot, kappa, p, prm["s"],
                                        prm["hold_level"], max_depth=prm["max_depth"])
        else:
            res = approx_steer_same_sign(psi0, goal, cfg.tol, cfg.T, pot, kappa, p, prm["s"],
                                         prm["eta"])
    write_schedule_csv(res.schedule, out / "schedule.csv")
    write_field_csv(res.final, out / "final_state.csv")
    grid = int(res.diagnostics.get("grid", psi0.n)) if res.diagnostics else psi0.n
    log = [(0.0, hs_norm(psi0, 1))]
    solve_split(psi0.resample(grid), res.schedule, pot.at(grid), kappa, p, log=log)
    write_rows(["t", "h1_norm"], log, out / "norms.csv")
    save_figure(out / "figure.svg", lambda ax: ax.plot(*zip(*log)), "t", "||psi(t)||_H1")
    return {"mode": mode, "error": res.error, "duration": res.duration,
            "duration_equals_T": res.duration == cfg.T, "tol": cfg.tol,
            "diagnostics": _plain(res.diagnostics)}


def _plain(d):
    return {k: (v if isinstance(v, (int, float, str, bool, type(None), dict, list, tuple))
                else repr(v)) for k, v in (d or {}).items()}


def run_exact_steer(cfg, out, seed):
    from .exact import (empirical_entry_ball, exact_steer, global_exact_pipeline,
                        write_history_csv)
    from .schedule import write_schedule_csv
    from .solver import solve_split
    from .spectral import ground_state, hs_norm
    pot = _potentials(cfg)
    psi0 = _state(cfg, "initial")
    kappa, p, prm = cfg.pde.kappa, cfg.pde.p, cfg.params
    summary = {}
    if prm["pipeline"]:
        radius = prm["entry_radius"]
        if radius is None:
            ball = empirical_entry_ball(prm["entry_radii"], prm["entry_runs"], seed, 1.0,
                                        cfg.tol, pot, kappa, p, psi0.n)
            write_rows(["radius", "successes", "runs"], ball.table, out / "entry_ball.csv")
            radius = ball.radius
            summary["entry_ball"] = {"radius": radius, "seed": seed}
            if radius == 0.0:
                raise Partial(ContractionError("no radius in the sweep contracted for every "
                                               "run"), summary)
        res = global_exact_pipeline(psi0, cfg.T, pot, kappa, p, radius, prm["hold_level"],
                                    cfg.tol, seed)
        write_schedule_csv(res.schedule, out / "schedule.csv")
        history = res.phase2.history
        write_history_csv(history, out / "history.csv")
        grid = res.phase1.diagnostics["grid"] if res.phase1 is not None else psi0.n
        phi = ground_state(grid) * float(res.sign)
        log = [(0.0, hs_norm(psi0 - ground_state(psi0.n) * float(res.sign), 1))]
        solve_split(psi0.resample(grid), res.schedule, pot.at(grid), kappa, p, log=log,
                    reference=phi)
        write_rows(["t", "distance_h1"], log, out / "distance.csv")
        save_figure(out / "figure.svg", lambda ax: ax.plot(*zip(*log)), "t",
                    "||psi(t) - Phi||_H1", logy=True)
        summary.update(residual=res.residual, sign=res.sign, entry_radius=radius,
                       phase1_error=None if res.phase1 is None else res.phase1.error,
                       windows=len(history), duration=res.schedule.duration)
    else:
        try:
            res = exact_steer(psi0, cfg.T, cfg.tol, pot, kappa, p, prm["T0"], prm["K"],
                              prm["n_max"], steps_per_window=prm["steps_per_window"])
        except ContractionError as exc:
            _history_outputs(exc.history, out)
            raise Partial(exc, {"residuals": [h.y_h1 for h in exc.history]}) from exc
        except ConditioningError as exc:
            hist = exc.diagnostics.get("history", [])
            _history_outputs(hist, out)
            raise Partial(exc, {"residuals": [h.y_h1 for h in hist],
                                "failed_window": exc.diagnostics.get("window")}) from exc
        _history_outputs(res.history, out)
        write_schedule_csv(res.schedule, out / "schedule.csv")
        summary.update(y0_h1=res.y0_h1, residuals=[h.y_h1 for h in res.history],
                       windows=len(res.history), reached=(res.history[-1].y_h1 <= cfg.tol
                                                          if res.history else True))
    return summary


def _history_outputs(history, out):
    from .exact import write_history_csv
    write_history_csv(history, out / "history.csv")

    def draw(ax):
        if history:
            ns = [h.n for h in history]
            ax.plot([0] + ns, [history[0].y_prev_h1] + [h.y_h1 for h in history], "o-",
                    label="||y_n||_H1")
            ax.plot(ns, [h.bound_quad for h in history], "s--", label="K(T_n)||y_{n-1}||^2")
    save_figure(out / "figure.svg", draw, "window n", "H1 norm", logy=True)


def run_moment_solve(cfg, out):
    from .moment import (compute_targets, moment_report, solve_moment, verify_null,
                         write_moment_report)
    from .schedule import write_schedule_csv
    pot = _potentials(cfg)
    xi0 = _state(cfg, "initial")
    prob = compute_targets(xi0, cfg.T, cfg.params["K"], pot, cfg.pde.kappa, cfg.pde.p,
                           tolerance=cfg.tol)
    sol = solve_moment(prob)
    ratio, tail = verify_null(xi0, sol, pot, cfg.pde.kappa, cfg.pde.p)
    report = moment_report(sol, ratio, tail)
    write_moment_report(report, out / "moment_report.json")
    write_schedule_csv(sol.schedule(pot.size), out / "control.csv")

    def draw(ax):
        ax.plot(sol.times, sol.v1, label="v1")
        ax.plot(sol.times, sol.v2, label="v2")
    save_figure(out / "figure.svg", draw, "t", "control")
    return {"terminal_ratio": ratio, "tail_bound": tail, "h1_norm": sol.h1_norm,
            "alpha": sol.alpha}


def run_limit_experiment(cfg, out):
    from .saturation import conjugated_limit_experiment
    pot = _potentials(cfg)
    psi0 = _state(cfg, "initial")
    phi = formula_field(cfg.params["phi"], cfg.pde.n, cfg.pde.d, "config.params.phi")
    u = cfg.params["control"] or [0.0] * pot.q
    rows = conjugated_limit_experiment(psi0, phi, u, cfg.params["deltas"], pot,
                                       cfg.pde.kappa, cfg.pde.p, cfg.params["s"])
    write_rows(["delta", "route", "error", "blowup", "amplification", "cross_check"],
               [(r.delta, r.route, r.error, r.blowup, r.amplification,
                 "" if r.cross_check is None else r.cross_check) for r in rows],
               out / "limit.csv")
    save_figure(out / "figure.svg",
                lambda ax: ax.plot([r.delta for r in rows], [r.error for r in rows], "o-"),
                "delta", "H^s error", logx=True, logy=True)
    errs = [r.error for r in rows]
    return {"deltas": [r.delta for r in rows], "errors": errs,
            "strictly_decreasing": all(b < a for a, b in zip(errs, errs[1:]))}


def run_density_check(cfg, out):
    from .saturation import density_check
    res = density_check([tuple(k) for k in cfg.params["generators"]])
    return {"ok": res.ok, "reason": res.reason, "detail": res.detail}


def run_constants(cfg, out):
    from .exact import fitted_nu
    from .moment import constants_pack, stacking_series, stacking_series_closed_form
    pot = _potentials(cfg)
    kappa, p, prm = cfg.pde.kappa, cfg.pde.p, cfg.params
    nu = prm["nu"] if prm["nu"] is not None else fitted_nu(prm["K"], kappa, p, cfg.pde.n)
    pack = constants_pack(kappa, p, nu, prm["T0"], pot.c_q, cfg.T)
    taus = prm["taus"]
    rows = [(t, pack.log_K(t), pack.Gamma0 / t) for t in taus]
    write_rows(["tau", "log_K", "Gamma0_over_tau"], rows, out / "k_bound.csv")
    write_json(pack.as_dict(), out / "constants.json")
    save_figure(out / "figure.svg", lambda ax: (ax.plot(taus, [r[1] for r in rows], "o-",
                                                        label="log K(tau)"),
                                                ax.plot(taus, [r[2] for r in rows], "--",
                                                        label="Gamma0/tau")),
                "tau", "log scale")
    series = all(stacking_series(n) == stacking_series_closed_form(n)
                 for n in range(prm["series_n"] + 1))
    return {**pack.as_dict(), "K_bound_holds": all(r[1] <= r[2] for r in rows),
            "series_identity": series}


def run_audit_potentials(cfg, out):
    from .moment import assumption2_audit
    from .potentials import coefficient_audit, write_audit_csv
    rows = coefficient_audit(cfg.params["kmax"], cfg.pde.n)
    write_audit_csv(rows, out / "mu1_coefficients.csv", 1)
    write_audit_csv(rows, out / "mu2_coefficients.csv", 2)
    rep = assumption2_audit(_potentials(cfg), cfg.params["kmax"])

    def draw(ax):
        for which in (1, 2):
            sel = [r for r in rows if r["mu"] == which]
            ax.plot([r["k"] for r in sel], [max(r["abs_err"], 1e-300) for r in sel], "o",
                    label=f"mu{which}")
    save_figure(out / "figure.svg", draw, "k", "abs error", logy=True)
    max_rel = max(r["abs_err"] / abs(r["closed_form"]) for r in rows)
    return {"max_rel_err": max_rel, "assumption2_ok": rep.ok, "failures": rep.failures,
            "q1": rep.q1, "b1": rep.b1, "q2": rep.q2, "b2": rep.b2}


RUNNERS = {
    "simulate": run_simulate,
    "approx-steer": run_approx_steer,
    "exact-steer": run_exact_steer,
    "moment-solve": run_moment_solve,
    "limit-experiment": run_limit_experiment,
    "density-check": run_density_check,
    "constants": run_constants,
    "audit-potentials": run_audit_potentials,
}


def run(cfg, out, seed=None):
    """Execute ``cfg`` and write its artifact bundle into ``out``.

    Returns (exit status, result dict).  Module errors are reported in
    ``result.json`` with status "failed"; partial artifacts are kept.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if seed is None else seed
    seed = 0 if seed is None else seed
    if cfg.kind == "exact-steer":
        cfg.seed = seed
    (out / "config.json").write_text(cfg.to_json())
    runner = RUNNERS[cfg.kind]
    args = (cfg, out, seed) if cfg.kind == "exact-steer" else (cfg, out)
    result = {"kind": cfg.kind, "status": "ok"}
    status = EXIT_OK
    try:
        result["summary"] = runner(*args)
    except (Partial, *MODULE_ERRORS) as exc:
        err = exc.error if isinstance(exc, Partial) else exc
        status = EXIT_FAILED
        result["status"] = "failed"
        result["error"] = f"{type(err).__name__}: {err}"
        if isinstance(exc, Partial):
            result["summary"] = exc.summary
        elif isinstance(exc, BudgetError):
            result["summary"] = {"error": exc.error, "diagnostics": _plain(exc.diagnostics)}
    result = _jsonable(result)
    write_json(result, out / "result.json")
    return status, result


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nhecontrol",
        description="Bilinear control experiments for the nonlinear heat equation on the torus")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        sp = sub.add_parser(kind, help=f"run a {kind} experiment")
        sp.add_argument("--config", type=Path, help="JSON config (defaults reproduce the "
                                                    "reference experiment)")
        sp.add_argument("--out", type=Path, default=None,
                        help="output directory (default: out/<kind>)")
        sp.add_argument("--seed", type=int, default=None,
                        help="seed of the randomized entry-ball sweep (exact-steer only)")
    return parser


def load_config(kind, path):
    if path is None:
        return ExperimentConfig.default(kind)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    data.setdefault("kind", kind)
    if data["kind"] != kind:
        raise ConfigError(f"{path}.kind: {data['kind']!r} does not match subcommand {kind!r}")
    return ExperimentConfig.from_dict(data, str(path))


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.command, args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or Path("out") / args.command
    try:
        status, result = run(cfg, out, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(result, indent=2, sort_keys=True))
    return status


if __name__ == "__main__":
    sys.exit(main())
