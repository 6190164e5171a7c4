"""``ergoflow`` command line: one subcommand per analysis, CSV artifacts plus a JSON sidecar.

Exit status is 0 on success, 2 when the configuration or model is rejected,
3 when an iterative computation does not converge.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .coeffs import ModelError, make_model, validate_recurrence
from .config import ConfigError, RunConfig, get_param, load_config
from .estimators import exit_probability, gamma_birkhoff, two_point_rate
from .expr import ExpressionError
from .flow import (
    BracketError,
    NonConvergenceError,
    accumulate_log_jacobian,
    new_ensemble,
    step_sharp,
)
from .measures import (
    InfiniteGammaError,
    QuadratureError,
    RecurrenceError,
    boundary_classification,
    build_measures,
    default_escape_threshold,
    spectral_gap_bound,
    trial_family_minimum,
)
from .noise import GridError, NoisePath, dump_rows, rotated_view, to_steps
from .oracle import OuParams, ou_exact_flow, strong_order
from .pullback import (
    default_schedule,
    pullback_map,
    pullback_process,
    sample_xinf,
    spde_residual,
    stagnation_bisect,
)

COMMANDS = (
    "analyze", "simulate", "focusing", "gamma", "exit-prob", "sample-invariant",
    "attractor", "gap", "spde-residual", "oracle-check", "dump-noise",
)
EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 2, 3
BLOCK = 500  # seeds per work unit; fixed so results never depend on the worker count


class ValidationError(ValueError):
    pass


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    return obj


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def sidecar(cfg: RunConfig, command: str, results: dict, work: dict) -> dict:
    return {
        "command": command,
        "config_echo": cfg.to_dict(),
        "versions": {"spec": "1", "ergoflow": __version__},
        "timings": {"work": work},
        "results": results,
    }


def workers() -> int:
    try:
        return max(1, int(os.environ.get("ERGOFLOW_WORKERS", "1")))
    except ValueError:
        return 1


def map_blocks(fn, items):
    if workers() > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers()) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def seed_blocks(base: int, n: int):
    seeds = list(range(base, base + n))
    return [seeds[i : i + BLOCK] for i in range(0, n, BLOCK)]


def load_model(cfg: RunConfig, require_recurrent: bool = True):
    spec = cfg.model
    try:
        model = make_model(spec, cfg.window)
    except (ModelError, ExpressionError) as exc:
        raise ValidationError(str(exc)) from exc
    model, report = validate_recurrence(model, cfg.window, n_grid=cfg.n_grid)
    if require_recurrent and not model.is_positive_recurrent:
        raise ValidationError(report.reason)
    return model, report


def snap(t: float, dt: float) -> float:
    """User-supplied time on the grid; raises GridError when off by more than 1e-12."""
    return to_steps(t, dt) * dt


def horizon(args, cfg, name: str, default: float) -> float:
    """``--t``, else ``params[name]`` (both checked against the grid), else the default rounded to it."""
    if args.t is not None:
        return snap(args.t, cfg.dt)
    if cfg.params.get(name) is not None:
        return snap(get_param(cfg, name, default), cfg.dt)
    return round(default / cfg.dt) * cfg.dt


# commands


def cmd_analyze(cfg, args, out):
    model, rec = load_model(cfg)
    table = build_measures(model, cfg.window, cfg.n_grid)
    bnd = boundary_classification(table)
    stride = int(get_param(cfg, "stride", 1, "int"))
    psi2 = table.psi2
    rows = (
        (table.x[i], psi2[i], table.log_psi2[i], table.s[i], table.pi_cdf[i], table.pi_pdf[i], table.sharp_scale[i])
        for i in range(0, len(table.x), stride)
    )
    write_csv(out, ["x", "psi2", "log_psi2", "s", "pi_cdf", "pi_pdf", "sharp_scale"], rows)
    g = table.gamma
    gap = spectral_gap_bound(table, model) if g.finite else None
    results = {
        "recurrence": model.recurrence_status,
        "lambda": table.lambda_,
        "log_lambda": table.log_lambda,
        "gamma": g.value if g.finite else "inf",
        "gamma_alternative": g.alternative,
        "gamma_rel_diff": g.rel_diff,
        "escape_threshold": default_escape_threshold(table),
        "gap_report": gap.to_dict() if gap else None,
        "boundary": {
            "non_entrance": bnd.non_entrance,
            "log_double_integral": bnd.log_double_integral,
            "windows": bnd.windows,
            "sharp_scale_limits": bnd.sharp_scale_limits,
            "sharp_transient": bnd.sharp_transient,
        },
    }
    return results, {"grid_points": len(table.x)}


def _seeds(cfg, args, default_paths: int = 1):
    n = args.paths if args.paths is not None else int(get_param(cfg, "paths", default_paths, "int"))
    return np.arange(cfg.seed, cfg.seed + n)


def cmd_simulate(cfg, args, out):
    model, _ = load_model(cfg)
    table = build_measures(model, cfg.window, cfg.n_grid)
    T = horizon(args, cfg, "t", 1.0)
    x0 = np.array(get_param(cfg, "x0", [-1.0, 0.0, 1.0], "list"))
    record = max(1, round(get_param(cfg, "record_dt", 0.01) / cfg.dt))
    sharp = get_param(cfg, "sharp", False, "bool")
    thr = cfg.escape_threshold or default_escape_threshold(table)
    seeds = _seeds(cfg, args)
    rows = []
    for pid, seed in enumerate(seeds):
        path = NoisePath(int(seed), cfg.dt)
        ens = new_ensemble(path, x0, log_jacobian=not sharp)
        n = to_steps(T, cfg.dt)
        done = 0
        while True:
            for k in range(len(x0)):
                lj = ens.log_jac[k] if ens.log_jac is not None else float("nan")
                rows.append((pid, ens.t, k, ens.x[k], lj, int(ens.status[k])))
            if done >= n:
                break
            m = min(record, n - done)
            if sharp:
                step_sharp(model, path, ens, m, thr)
            else:
                accumulate_log_jacobian(model, path, ens, m)
            done += m
    write_csv(out, ["path_id", "t", "member_id", "x", "log_jac", "status"], rows)
    return {"paths": len(seeds), "T": T, "sharp": sharp}, {"steps": int(len(seeds) * to_steps(T, cfg.dt))}


def cmd_focusing(cfg, args, out):
    model, _ = load_model(cfg)
    table = build_measures(model, cfg.window, cfg.n_grid)
    gamma = table.gamma.require()
    a = args.a if args.a is not None else get_param(cfg, "a", -1.0)
    b = args.b if args.b is not None else get_param(cfg, "b", 1.0)
    T = horizon(args, cfg, "t", max(20.0, 20.0 / gamma))
    seeds = _seeds(cfg, args)
    rep = two_point_rate(model, seeds, a, b, T, cfg.dt, table)
    t = rep.diagnostics.pop("times")
    Y = rep.diagnostics.pop("log_gap")
    rows = ((pid, t[i], Y[i, pid]) for pid in range(len(seeds)) for i in range(len(t)))
    write_csv(out, ["path_id", "t", "log_gap"], rows)
    return {"slope": rep.value, "std_error": rep.std_error, "gamma_quadrature": gamma, **rep.diagnostics}, {
        "steps": int(len(seeds) * to_steps(T, cfg.dt))
    }


def _two_point_block(args):
    cfg_dict, seeds, a, b, T = args
    cfg = RunConfig(**cfg_dict)
    model, _ = load_model(cfg)
    rep = two_point_rate(model, seeds, a, b, T, cfg.dt)
    return rep.diagnostics["slopes"]


def cmd_gamma(cfg, args, out):
    model, _ = load_model(cfg)
    table = build_measures(model, cfg.window, cfg.n_grid)
    method = args.method or get_param(cfg, "method", "all", "str")
    if method not in ("quadrature", "birkhoff", "two-point", "all"):
        raise ConfigError("--method", f"unknown method {method!r}")
    g = table.gamma
    gamma = g.require()
    res = {"quadrature": {"value": g.value, "alternative": g.alternative, "rel_diff": g.rel_diff}}
    work = {}
    if method in ("birkhoff", "all"):
        T = get_param(cfg, "birkhoff_t", None)
        rep = gamma_birkhoff(model, cfg.seed, T, dt=cfg.dt, table=table)
        res["birkhoff"] = rep.to_dict()
        res["birkhoff"]["z"] = (rep.value - gamma) / rep.std_error
        work["birkhoff_steps"] = to_steps(rep.diagnostics["T"], cfg.dt)
    if method in ("two-point", "all"):
        n = int(get_param(cfg, "two_point_seeds", 50, "int"))
        T = horizon(argparse.Namespace(t=None), cfg, "two_point_t", max(20.0, 20.0 / gamma))
        blocks = seed_blocks(cfg.seed, n)
        slopes = np.concatenate(map_blocks(_two_point_block, [(cfg.to_dict(), blk, -1.0, 1.0, T) for blk in blocks]))
        se = float(slopes.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
        res["two_point"] = {"value": float(slopes.mean()), "std_error": se, "n": n, "T": T}
        work["two_point_blocks"] = len(blocks)
    tri = {}
    if "birkhoff" in res:
        tri["birkhoff_within_3se"] = abs(res["birkhoff"]["value"] - gamma) <= 3 * res["birkhoff"]["std_error"]
    if "two_point" in res:
        tp = res["two_point"]
        tri["two_point_within"] = abs(tp["value"] + gamma) <= max(3 * tp["std_error"], 0.1 * gamma)
    tri["quadrature_forms_agree"] = g.rel_diff <= 1e-6
    res["triangle"] = tri
    return res, work


def cmd_exit_prob(cfg, args, out):
    model, _ = load_model(cfg)
    table = build_measures(model, cfg.window, cfg.n_grid)
    if args.x0:
        try:
            x0 = [float(v) for v in args.x0.split(",")]
        except ValueError:
            raise ConfigError("--x0", "expected a comma-separated list of numbers") from None
    else:
        q = np.arange(0.05, 1.0, 0.1)
        x0 = get_param(cfg, "x0", table.x[np.searchsorted(table.pi_cdf, q)].tolist(), "list")
    n = args.n or (args.paths if args.paths is not None else int(get_param(cfg, "n", 10_000, "int")))
    horizon = get_param(cfg, "horizon", None)
    reps = exit_probability(model, x0, n, horizon, cfg.dt, cfg.seed, cfg.escape_threshold, table)
    rows = [(r.diagnostics["x0"], r.value, r.std_error, r.diagnostics["pi_cdf"], r.diagnostics["z_score"]) for r in reps]
    write_csv(out, ["x0", "estimate", "stderr", "pi_cdf", "z_score"], rows)
    return {
        "undecided": [r.diagnostics["undecided"] for r in reps],
        "horizon": reps[0].diagnostics["horizon"],
        "escape_threshold": reps[0].diagnostics["escape_threshold"],
        "max_abs_z": max(abs(r[4]) for r in rows),
    }, {"paths": n * len(x0)}


def _xinf_block(args):
    cfg_dict, seeds, schedule, tol = args
    cfg = RunConfig(**cfg_dict)
    model, _ = load_model(cfg)
    est, run = sample_xinf(model, np.asarray(seeds), T_schedule=schedule, tol=tol, dt=cfg.dt, strict=False)
    return seeds, np.asarray(est), run.T_used, run.spread, run.converged


def cmd_sample_invariant(cfg, args, out):
    model, _ = load_model(cfg)
    table = build_measures(model, cfg.window, cfg.n_grid)
    gamma = table.gamma.require()
    n = args.n or (args.paths if args.paths is not None else int(get_param(cfg, "n", 5000, "int")))
    schedule = get_param(cfg, "T_schedule", None, "list")
    if args.t is not None:
        schedule = [args.t]
    if schedule:
        schedule = [snap(t, cfg.dt) for t in schedule]
    schedule = schedule or list(default_schedule(gamma))
    tol = get_param(cfg, "tol", 1e-4)
    blocks = seed_blocks(cfg.seed, n)
    parts = map_blocks(_xinf_block, [(cfg.to_dict(), blk, schedule, tol) for blk in blocks])
    rows = []
    unconverged = 0
    for seeds, est, T_used, spread, conv in parts:
        unconverged += int(np.count_nonzero(~conv))
        rows.extend(zip(seeds, est, T_used, spread))
    write_csv(out, ["seed", "xinf", "T_used", "spread"], rows)
    results = {"n": n, "T_schedule": schedule, "tol": tol, "unconverged": unconverged}
    if unconverged:
        raise NonConvergenceError(f"{unconverged} of {n} seeds did not converge", results)
    return results, {"blocks": len(blocks), "block_size": BLOCK}


def cmd_attractor(cfg, args, out):
    model, _ = load_model(cfg)
    table = build_measures(model, cfg.window, cfg.n_grid)
    gamma = table.gamma.require()
    x0 = np.array(get_param(cfg, "x0", [-4.0, -2.0, 0.0, 2.0, 4.0], "list"))
    if cfg.params.get("T") is not None:
        Ts = [snap(t, cfg.dt) for t in get_param(cfg, "T", None, "list")]
    else:
        Ts = [round(t / cfg.dt) * cfg.dt for t in default_schedule(gamma)]
    path = NoisePath(cfg.seed, cfg.dt)
    rows = []
    for T in Ts:
        rev = pullback_map(model, path, T, x0)
        fwd = pullback_process(model, rotated_view(path), T, x0)
        rows += [(T, x, v, "reversed") for x, v in zip(x0, rev)]
        rows += [(T, x, v, "forward_from_minus_T") for x, v in zip(x0, fwd)]
    thr = cfg.escape_threshold or default_escape_threshold(table)
    bis, res = stagnation_bisect(model, path, Ts[-1], escape_threshold=thr)
    rows.append((Ts[-1], float("nan"), bis, "bisection"))
    write_csv(out, ["T", "x0", "value", "method"], rows)
    last = [r[2] for r in rows if r[0] == Ts[-1] and r[3] == "forward_from_minus_T"]
    return {"spread_at_T_max": max(last) - min(last), "bisection": bis, "bisection_width": float(res.width)}, {
        "horizons": len(Ts)
    }


def cmd_gap(cfg, args, out):
    model, _ = load_model(cfg)
    table = build_measures(model, cfg.window, cfg.n_grid)
    rep = spectral_gap_bound(table, model)
    best, which = trial_family_minimum(table, model)
    return {**rep.to_dict(), "trial_family_min": best, "trial_family_argmin": which}, {"grid_points": len(table.x)}


def cmd_spde_residual(cfg, args, out):
    model, _ = load_model(cfg)
    f = get_param(cfg, "f", "x", "str")
    grid = np.array(get_param(cfg, "x_grid", np.linspace(-2, 2, 21).tolist(), "list"))
    T = args.t if args.t is not None else get_param(cfg, "t", 1.0)
    dts = get_param(cfg, "dts", [4e-3, 2e-3, 1e-3], "list")
    scheme = get_param(cfg, "scheme", "milstein", "str")
    rows = []
    finals = []
    for dt in dts:
        t, rms = spde_residual(model, NoisePath(cfg.seed, dt), f, grid, snap(T, max(dts)), scheme)
        rows += [(dt, ti, r) for ti, r in zip(t, rms)]
        finals.append(rms[-1])
    write_csv(out, ["dt", "t", "rms"], rows)
    order = strong_order(dts, finals) if all(v > 0 for v in finals) and len(dts) > 1 else float("nan")
    return {"final_rms": finals, "fitted_order": order, "scheme": scheme}, {"runs": len(dts)}


def _oracle_block(args):
    beta, dt, seeds, T = args
    from .coeffs import make_model as _mk

    model, _ = validate_recurrence(_mk("ou", beta=beta))
    path = NoisePath(np.asarray(seeds), dt)
    ens = new_ensemble(path, [1.0])
    from .flow import step_forward

    step_forward(model, path, ens, to_steps(T, dt), scheme="milstein")
    exact = ou_exact_flow(OuParams(beta), path, 1.0, T)
    return ((ens.x[0] - exact) ** 2).tolist()


def cmd_oracle_check(cfg, args, out):
    beta = args.beta if args.beta is not None else 1.0
    dts = [float(v) for v in args.dt.split(",")] if args.dt else [4e-3, 2e-3, 1e-3]
    n = args.seeds or (args.paths if args.paths is not None else 200)
    T = snap(args.t if args.t is not None else 1.0, max(dts))
    for dt in dts:
        snap(T, dt)
    rows = []
    errs = []
    for dt in dts:
        sq = np.concatenate(map_blocks(_oracle_block, [(beta, dt, blk, T) for blk in seed_blocks(cfg.seed, n)]))
        errs.append(float(np.sqrt(sq.mean())))
    order = strong_order(dts, errs)
    rows = [(dt, e, order) for dt, e in zip(dts, errs)]
    write_csv(out, ["dt", "rms_error", "fitted_order"], rows)
    return {"beta": beta, "T": T, "seeds": n, "fitted_order": order}, {"runs": len(dts)}


def cmd_dump_noise(cfg, args, out):
    n = args.count or int(get_param(cfg, "count", 1000, "int"))
    write_csv(out, ["index", "side", "increment"], dump_rows(NoisePath(cfg.seed, cfg.dt), n))
    return {"count": n}, {"increments": 2 * n}


HANDLERS = {
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "focusing": cmd_focusing,
    "gamma": cmd_gamma,
    "exit-prob": cmd_exit_prob,
    "sample-invariant": cmd_sample_invariant,
    "attractor": cmd_attractor,
    "gap": cmd_gap,
    "spde-residual": cmd_spde_residual,
    "oracle-check": cmd_oracle_check,
    "dump-noise": cmd_dump_noise,
}
JSON_OUTPUT = {"gamma", "gap"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ergoflow", description="Stochastic flows, pullbacks and focusing rates for 1-d diffusions.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", help="output artifact path")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--paths", type=int, help="number of paths/seeds")
    p.add_argument("--t", type=float, help="time horizon")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--a", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--method")
    p.add_argument("--x0", help="comma-separated start points")
    p.add_argument("--n", type=int, help="sample count")
    p.add_argument("--beta", type=float)
    p.add_argument("--dt", help="comma-separated dt list (oracle-check)")
    p.add_argument("--seeds", type=int)
    p.add_argument("--count", type=int)
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    say = (lambda *a: None) if args.quiet else (lambda *a: print(*a, file=sys.stderr))
    command = args.command
    out = Path(args.out or f"{command}.{'json' if command in JSON_OUTPUT else 'csv'}")
    cfg = None
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        results, work = HANDLERS[command](cfg, args, out)
        status = EXIT_OK
    except (ConfigError, ValidationError, ModelError, ExpressionError, GridError, RecurrenceError,
            InfiniteGammaError, BracketError) as exc:
        say(f"ergoflow {command}: invalid: {exc}")
        results, work, status = {"error": str(exc), "reason": str(exc)}, {}, EXIT_INVALID
    except (NonConvergenceError, QuadratureError) as exc:
        say(f"ergoflow {command}: not converged: {exc}")
        diag = getattr(exc, "diagnostics", {})
        results, work, status = {"error": str(exc), "diagnostics": diag}, {}, EXIT_NONCONVERGED
    payload = sidecar(cfg or RunConfig(), command, results, work)
    payload["exit_status"] = status
    side = out if command in JSON_OUTPUT else out.with_name(out.name + ".json")
    write_json(side, payload)
    say(f"ergoflow {command}: exit {status}, wall time {time.perf_counter() - t0:.2f}s, sidecar {side}")
    return status


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
