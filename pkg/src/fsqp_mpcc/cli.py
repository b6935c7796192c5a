"""Command-line entry point: ``fsqp-race {terminal,simulate,replay,export,trials}``.

Exit codes: 0 success, 1 bad input or I/O error, 3 controller abort,
4 solver or other internal failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import load_config, load_spec
from .fsqp import Mode

EXIT_OK, EXIT_INPUT, EXIT_ABORT, EXIT_INTERNAL = 0, 1, 3, 4

log = logging.getLogger("fsqp_mpcc")


def _modes(text: str) -> list[Mode]:
    try:
        return [Mode(m.strip().lower()) for m in text.split(",") if m.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"modes must be from {[m.value for m in Mode]}") from None


def _formats(text: str) -> list[str]:
    out = [f.strip().lower() for f in text.split(",") if f.strip()]
    bad = set(out) - {"csv", "json"}
    if bad or not out:
        raise argparse.ArgumentTypeError("format must be csv, json or csv,json")
    return out


def cmd_terminal(args) -> int:
    from .terminal import check_trajectory, compute_terminal_set, save_terminal_set
    from .track import fit_spline, load_track

    cfg = load_config(args.config)
    spline = fit_spline(load_track(args.track))
    T = args.T or cfg.terminal.T
    T_tilde = args.T_tilde or cfg.terminal.T_tilde
    t0 = time.perf_counter()
    ts = compute_terminal_set(cfg.ocp, spline, cfg.params, T, T_tilde, cfg.terminal.margin)
    for traj in (ts.periodic, ts.transitional):
        check_trajectory(traj, spline, cfg.params, cfg.ocp)
    path = save_terminal_set(ts, args.out)
    print(f"wrote {path}: T={ts.T} T_tilde={ts.T_tilde} in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from . import harness as H

    spec = load_spec(args.spec)
    changes = {k: v for k, v in (("seed", args.seed), ("noise", args.noise), ("laps", args.laps),
                                 ("out", args.out)) if v is not None}
    if args.mode:
        changes["modes"] = tuple(args.mode)
    spec = spec.with_(**changes)
    setup = H.Setup.from_spec(spec)
    trace = (lambda rec: print(H.trace_line(rec), file=sys.stderr, flush=True)) if args.trace else None
    status = EXIT_OK
    for mode in spec.modes:
        run, _ = H.run_closed_loop(setup, mode, laps=spec.laps, noise=spec.noise, seed=spec.seed,
                                   steps=args.steps, trace=trace)
        run.spec.update(spec.to_dict())
        d = Path(spec.out) / mode.value
        H.save_run(run, d)
        if not args.no_instances:
            H.save_instances(d / "instances.npz", run, setup)
        H.export_run(run, d, plots=not args.no_plots, spline=setup.spline)
        s = run.summary()
        rt = s["mean_runtime"]
        print(f"{mode.value}: {s['steps']} steps, convergence {s['convergence_pct']:.1f}%, "
              f"mean solve {1e3 * rt if rt is not None else float('nan'):.2f} ms, laps {s['lap_steps']} -> {d}")
        if run.aborted:
            print(f"{mode.value}: aborted: {run.message}", file=sys.stderr)
            status = EXIT_ABORT
    return status


def cmd_replay(args) -> int:
    from . import harness as H

    logd = H.load_instances(args.instances)
    idx = list(range(len(logd)))
    if args.limit is not None:
        idx = idx[: args.limit]
    table = H.replay(logd, args.modes, idx)
    out = Path(args.out) if args.out else Path(args.instances) / "replay"
    H.export_replay(table, out, plots=not args.no_plots)
    print(json.dumps(table.summary()["ratios"], indent=2))
    print(f"replayed {len(idx)} instances in modes {[m.value for m in args.modes]} -> {out}")
    return EXIT_OK


def cmd_export(args) -> int:
    from . import harness as H
    from .track import fit_spline

    run = H.load_run(args.run)
    spline = None
    inst = Path(args.run) / "instances.npz"
    if inst.exists():
        spline = fit_spline(H.load_instances(inst).centerline)
    paths = H.export_run(run, args.run, formats=args.format, plots=args.plots, spline=spline)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_trials(args) -> int:
    from . import harness as H

    spec = load_spec(args.spec)
    setup = H.Setup.from_spec(spec)
    steps = args.steps or setup.terminal.T
    run, cands = H.run_closed_loop(setup, Mode.FSQP, steps=steps, keep_candidates=True)
    if run.aborted:
        print(f"nominal run aborted: {run.message}", file=sys.stderr)
        return EXIT_ABORT
    states = np.array([r.state for r in run.steps])
    rng = H.trial_rng(spec.seed)
    delta = args.delta
    if delta is None:
        delta = H.calibrate_delta(setup, states, cands, max(args.M), rng)
        if delta is None:
            print("no tried disturbance bound passed calibration", file=sys.stderr)
            return EXIT_INTERNAL
    report = {"delta": delta, "trials": args.trials, "M": {}}
    for M in args.M:
        res = H.open_loop_trials(setup, states, cands, M, delta, args.trials, rng)
        report["M"][str(M)] = {"feasible": int(res.feasible.sum()), "max_cv": float(res.cv.max())}
        print(f"M={M} delta={delta:g}: {int(res.feasible.sum())}/{len(res.feasible)} feasible")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsqp-race", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("terminal", help="compute the terminal trajectories")
    s.add_argument("--track", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--T", type=int, help="periodic lap length in steps")
    s.add_argument("--T-tilde", dest="T_tilde", type=int, help="transition length in steps")
    s.set_defaults(func=cmd_terminal)

    s = sub.add_parser("simulate", help="run the closed loop")
    s.add_argument("--spec", required=True)
    s.add_argument("--mode", type=_modes, help="comma-separated solver modes")
    s.add_argument("--seed", type=int)
    s.add_argument("--noise", type=float, help="half-width of the uniform noise [m]")
    s.add_argument("--laps", type=int)
    s.add_argument("--steps", type=int, help="override laps * T")
    s.add_argument("--out")
    s.add_argument("--trace", action="store_true", help="print one line per step")
    s.add_argument("--no-plots", action="store_true")
    s.add_argument("--no-instances", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("replay", help="re-solve logged instances")
    s.add_argument("--instances", required=True, help="run directory or instances.npz")
    s.add_argument("--modes", type=_modes, default=_modes("fsqp,rti,full"))
    s.add_argument("--limit", type=int)
    s.add_argument("--out")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("export", help="rewrite CSV/JSON files of a run")
    s.add_argument("--run", required=True)
    s.add_argument("--format", type=_formats, default=["csv", "json"])
    s.add_argument("--plots", action="store_true")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("trials", help="open-loop feasibility trials after forced failures")
    s.add_argument("--spec", required=True)
    s.add_argument("--M", type=lambda t: [int(v) for v in t.split(",")], default=[1, 2, 3])
    s.add_argument("--trials", type=int, default=200)
    s.add_argument("--delta", type=float, help="skip calibration and use this bound [m]")
    s.add_argument("--steps", type=int, help="length of the nominal run")
    s.add_argument("--out")
    s.set_defaults(func=cmd_trials)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .mpc import ControllerAbort
    try:
        return args.func(args)
    except ControllerAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # surfaced as an infrastructure failure
        log.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
