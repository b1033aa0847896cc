"""Command-line entry point: ``harmshift <subcommand> [options]``.

Exit status: 0 = finished without an alarm, 2 = alarm raised, 1 = error.
Every output file starts with a manifest line carrying the schema name,
a hash of the configuration and the seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines, experiments, losses, seqtest
from .bounds import BoundDomainError, Method
from .changepoint import estimate_arl_add
from .simgen import GaussianLabelShiftConfig, ScenarioConfig

EXIT_OK, EXIT_ERROR, EXIT_ALARM = 0, 1, 2
OUT_ENV = "HARMSHIFT_OUT"
SCHEMA_VERSION = 1


class InputError(Exception):
    """Malformed input record; the message carries the line number."""


# --------------------------------------------------------------------------
# input

LOSS_KINDS = {
    "misclassification": lambda pred, y, rec: losses.misclassification_loss(pred, y),
    "brier": lambda pred, y, rec: losses.brier_loss(pred, y),
    "top-label-brier": lambda pred, y, rec: losses.top_label_brier_loss(pred, y),
    "true-class-brier": lambda pred, y, rec: losses.true_class_brier_loss(pred, y),
    "miscoverage": lambda pred, y, rec: losses.miscoverage_loss(pred, y),
    "weighted-misclassification":
        lambda pred, y, rec: losses.weighted_misclassification_loss(pred, y, rec["costs"]),
}


def record_loss(rec) -> float:
    """Loss of one JSONL record: ``{"loss": z}`` or ``{"pred", "label", "loss_kind"}``."""
    if not isinstance(rec, dict):
        raise ValueError("record must be a JSON object")
    if "loss" in rec:
        z = rec["loss"]
        if isinstance(z, bool) or not isinstance(z, (int, float)):
            raise ValueError("'loss' must be a number")
        z = float(z)
        if not (0.0 <= z <= 1.0):
            raise BoundDomainError(f"loss {z} outside [0, 1]")
        return z
    missing = {"pred", "label", "loss_kind"} - rec.keys()
    if missing:
        raise ValueError(f"record needs 'loss' or pred/label/loss_kind (missing {sorted(missing)})")
    kind = rec["loss_kind"]
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss_kind {kind!r}; choose from {sorted(LOSS_KINDS)}")
    pred = rec["pred"]
    if isinstance(pred, list) and kind != "miscoverage":
        pred = np.asarray(pred, dtype=float)
    return float(LOSS_KINDS[kind](pred, rec["label"], rec))


def iter_losses(stream, start_line: int = 1):
    """Yield (line number, loss) from a JSONL stream; blank lines are skipped."""
    for lineno, line in enumerate(stream, start=start_line):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as err:
            raise InputError(f"line {lineno}: invalid JSON ({err.msg})") from None
        if isinstance(rec, dict) and "_manifest" in rec:
            continue
        try:
            yield lineno, record_loss(rec)
        except BoundDomainError as err:
            raise InputError(f"line {lineno}: data error: {err}") from None
        except (ValueError, KeyError, TypeError) as err:
            raise InputError(f"line {lineno}: {err}") from None


def read_losses(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([z for _, z in iter_losses(fh)], dtype=float)


# --------------------------------------------------------------------------
# output

def config_hash(args: argparse.Namespace) -> str:
    cfg = {k: v for k, v in sorted(vars(args).items())
           if k not in ("out", "checkpoint", "func", "input", "format")}
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def manifest(args, schema: str) -> dict:
    return {"tool": "harmshift", "subcommand": args.command,
            "schema": f"{schema}/{SCHEMA_VERSION}", "config_sha256": config_hash(args),
            "seed": getattr(args, "seed", None)}


def _default_name(args) -> str:
    return f"{args.command}.{args.format}"


def open_output(args):
    """Explicit ``--out``, else ``$HARMSHIFT_OUT/<subcommand>.<fmt>``, else stdout."""
    path = args.out
    if path is None and os.environ.get(OUT_ENV):
        d = Path(os.environ[OUT_ENV])
        d.mkdir(parents=True, exist_ok=True)
        path = str(d / _default_name(args))
    if path is None or path == "-":
        return sys.stdout, False
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline=""), True


def _fmt(v):
    # numpy scalars first: np.float64 subclasses float but reprs as "np.float64(...)"
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return _fmt(v.item())
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return "" if v is None else v


class TableWriter:
    """CSV (manifest as a ``#`` comment) or JSONL (manifest as the first object)."""

    def __init__(self, fh, fmt: str, columns, head: dict):
        self.fh, self.fmt, self.columns = fh, fmt, list(columns)
        if fmt == "csv":
            fh.write("# " + json.dumps(head, sort_keys=True) + "\n")
            self._csv = csv.writer(fh, lineterminator="\n")
            self._csv.writerow(self.columns)
        else:
            fh.write(json.dumps({"_manifest": head}, sort_keys=True) + "\n")

    def row(self, values: dict):
        if self.fmt == "csv":
            self._csv.writerow([_fmt(values.get(c)) for c in self.columns])
        else:
            rec = {c: _json_value(values.get(c)) for c in self.columns}
            self.fh.write(json.dumps(rec) + "\n")
        self.fh.flush()


def _json_value(v):
    if isinstance(v, (np.floating, np.integer)):
        v = v.item()
    if isinstance(v, float) and math.isinf(v):
        return None
    return v


def write_table(args, schema: str, columns, rows):
    fh, close = open_output(args)
    try:
        w = TableWriter(fh, args.format, columns, manifest(args, schema))
        for r in rows:
            w.row(r)
    finally:
        if close:
            fh.close()


# --------------------------------------------------------------------------
# subcommands

def _spec_from_args(args) -> seqtest.TestSpec:
    return seqtest.TestSpec(mode=args.mode, eps_tol=args.eps_tol, delta=args.delta,
                            source_method=args.source_method, target_method=args.target_method,
                            batch_size=args.batch_size, eval_per_loss=args.batch_size == 1)


def cmd_monitor(args) -> int:
    resume = args.checkpoint and Path(args.checkpoint).exists()
    if resume:
        with open(args.checkpoint) as fh:
            doc = json.load(fh)
        mon = seqtest.MonitorState.from_dict(doc["monitor"])
        consumed = doc["records_consumed"]
    else:
        spec = _spec_from_args(args)
        src = None
        if spec.mode is not seqtest.Mode.FIXED:
            if not args.source:
                raise InputError("--source is required in abs/rel mode")
            try:
                src = read_losses(args.source)
            except InputError as err:
                raise InputError(f"{args.source}: {err}") from None
        mon = seqtest.init_monitor(spec, src)
        consumed = 0

    fh, close = open_output(args)
    writer = TableWriter(fh, args.format, ["t", "L_target", "threshold", "decision"],
                         manifest(args, "harmshift.events"))

    def log(t, low, thr, decision):
        writer.row({"t": t, "L_target": low, "threshold": thr, "decision": decision.value})

    inp = sys.stdin if args.input in (None, "-") else open(args.input)
    skip = consumed if resume and not args.no_skip else 0
    try:
        if mon.decision is seqtest.Decision.CONTINUE:
            for i, (_, z) in enumerate(iter_losses(inp)):
                if i < skip:
                    continue
                if args.max_records is not None and consumed >= args.max_records:
                    break
                consumed += 1
                if mon.observe(z, log=log) is seqtest.Decision.REJECT:
                    break
            else:
                mon.flush(log=log)
    finally:
        if inp is not sys.stdin:
            inp.close()
        if close:
            fh.close()
    if args.checkpoint:
        tmp = Path(args.checkpoint + ".tmp")
        tmp.write_text(json.dumps({"monitor": mon.to_dict(), "records_consumed": consumed}))
        tmp.replace(args.checkpoint)
    if mon.decision is seqtest.Decision.REJECT:
        print(f"alarm: harmful shift detected at N={mon.rejected_at}", file=sys.stderr)
        return EXIT_ALARM
    print(f"no alarm after {mon.t} target losses (L_target={mon.lower:.6g}, "
          f"threshold={mon.threshold:.6g})", file=sys.stderr)
    return EXIT_OK


def _config(args) -> GaussianLabelShiftConfig:
    return GaussianLabelShiftConfig(pi1_source=args.pi1_source)


def cmd_simulate(args) -> int:
    cfg = _config(args)
    if args.scenario == "grid":
        pis = experiments.paper_pi_grid(args.grid_points) if args.pi1 is None else args.pi1
        methods = [m for m in experiments.GRID_METHODS if m[0] in args.methods]
        rows = experiments.label_shift_grid(
            pis, n_reps=args.reps, max_samples=args.max_samples, batch_size=args.batch_size,
            eps_tol=args.eps_tol, delta=args.delta, config=cfg, methods=methods, seed=args.seed)
        cols = ["pi1_target", "method", "rejection_proportion", "mean_stopping_time",
                "target_risk", "source_risk", "harmful", "mean_source_upper"]
        write_table(args, "harmshift.grid", cols, rows)
    elif args.scenario == "drift":
        res = experiments.drift_experiment(n_runs=args.reps, eps_tol=args.eps_tol,
                                           delta=args.delta, config=cfg, seed=args.seed,
                                           keep_lower=True)
        stop = res.stopping_times
        rows = ({"t": t + 1, "running_risk": res.running_risk[t],
                 "mean_lower": res.lower[:, t].mean(),
                 "q05_lower": np.quantile(res.lower[:, t], 0.05),
                 "q95_lower": np.quantile(res.lower[:, t], 0.95),
                 "rejected_fraction": float(np.mean(stop <= t + 1))}
                for t in range(res.running_risk.size))
        write_table(args, "harmshift.drift",
                    ["t", "running_risk", "mean_lower", "q05_lower", "q95_lower",
                     "rejected_fraction"], rows)
    elif args.scenario == "covariate":
        res = experiments.covariate_shift_experiment(n_runs=args.reps, eps_tol=args.eps_tol,
                                                     delta=args.delta, seed=args.seed,
                                                     max_samples=args.max_samples)
        rows = ({"run": r, "stopping_time": res["stopping_time"][r],
                 "threshold": res["threshold"][r], "source_risk": res["source_risk"][r],
                 "target_risk": res["target_risk"][r]} for r in range(args.reps))
        write_table(args, "harmshift.covariate",
                    ["run", "stopping_time", "threshold", "source_risk", "target_risk"], rows)
    else:  # stream: a loss stream for piping into ``monitor``
        pi1 = cfg.pi1_target if args.pi1 is None else args.pi1[0]
        sc = ScenarioConfig(cfg, pi1, args.change_at, args.n_source)
        z = (sc.source_losses(args.seed, 0) if args.source_sample
             else sc.target_losses(args.max_samples, args.seed, 0))
        write_table(args, "harmshift.losses", ["loss"], ({"loss": float(v)} for v in z))
    return EXIT_OK


def cmd_bounds_compare(args) -> int:
    rows = experiments.bounds_compare(ns=args.ns, n_draws=args.reps, delta=args.delta,
                                      methods=args.methods, config=_config(args), seed=args.seed)
    write_table(args, "harmshift.bounds",
                ["n", "method", "mean_upper", "mean_eps_appr", "mean_empirical"], rows)
    return EXIT_OK


def cmd_baseline(args) -> int:
    if args.experiment == "clt":
        res = baselines.clt_vs_betting_experiment(n_runs=args.reps, horizon=args.horizon,
                                                  p=args.p, delta=args.delta, seed=args.seed)
        series = {"clt": ("clt_fixed", "clt_cumulative", "clt_mean_lower"),
                  "clt-polynomial": (None, None, "clt_poly_mean_lower"),
                  "betting": ("betting_fixed", "betting_cumulative", "betting_mean_lower")}

        def rows():
            for i, t in enumerate(res["t"]):
                for name, (fx, cu, lo) in series.items():
                    yield {"t": int(t), "method": name,
                           "fixed_miscoverage": None if fx is None else res[fx][i],
                           "cumulative_miscoverage": None if cu is None else res[cu][i],
                           "mean_lower": res[lo][i]}
        write_table(args, "harmshift.clt",
                    ["t", "method", "fixed_miscoverage", "cumulative_miscoverage", "mean_lower"],
                    rows())
        return EXIT_OK
    names = list(experiments.conformal_schedules()) if args.scenario == "all" else [args.scenario]

    def rows():
        for name in names:
            res = experiments.conformal_experiment(name, n_runs=args.reps, horizon=args.horizon,
                                                   delta=args.delta, kind=args.kind,
                                                   config=_config(args), seed=args.seed)
            w = res["wealth"]
            for r in range(w.shape[0]):
                for t in range(w.shape[1]):
                    yield {"scenario": name, "method": args.kind, "run": r, "t": t + 1,
                           "pi1_target": res["marginals"][t], "wealth": w[r, t],
                           "crossed": bool(w[r, t] >= 1 / args.delta)}
    write_table(args, "harmshift.conformal",
                ["scenario", "method", "run", "t", "pi1_target", "wealth", "crossed"], rows())
    return EXIT_OK


def cmd_changepoint(args) -> int:
    spec = _spec_from_args(args)
    sc = ScenarioConfig(_config(args), args.pi1, 1, args.n_source)
    rep = estimate_arl_add(spec, sc, args.reps, args.horizon, args.change_at, seed=args.seed,
                           spawn_stride=args.stride)
    rows = ({"change_at": m, "run": r, "alarm_time": a, "censored": c}
            for m, r, a, c in rep.rows())
    write_table(args, "harmshift.changepoint", ["change_at", "run", "alarm_time", "censored"], rows)
    summary = rep.summary()
    summary["_manifest"] = manifest(args, "harmshift.changepoint-summary")
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.summary:
        Path(args.summary).write_text(text + "\n")
    else:
        print(text, file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def _probability(s: str) -> float:
    v = float(s)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"{s} is not in (0, 1)")
    return v


def _add_test_options(p, source="betting", target="betting"):
    p.add_argument("--delta", type=_probability, default=0.05, help="total error budget")
    p.add_argument("--eps-tol", type=float, default=0.05,
                   help="tolerance (abs/rel) or the fixed threshold r0 (fixed)")
    p.add_argument("--mode", choices=[m.value for m in seqtest.Mode], default="abs")
    p.add_argument("--source-method", choices=[m.value for m in Method], default=source)
    p.add_argument("--target-method", choices=[m.value for m in Method if m is not Method.HOEFFDING],
                   default=target)
    p.add_argument("--batch-size", type=int, default=1,
                   help="evaluate the test every this many losses (1 = after every loss)")


def _add_common(p, seed_required=True):
    p.add_argument("--out", help=f"output file ('-' = stdout; default ${OUT_ENV}/<cmd>.<fmt>)")
    p.add_argument("--format", choices=["csv", "jsonl"], default="csv")
    if seed_required:
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--reps", type=int, default=None, help="number of replications")
    p.add_argument("--pi1-source", type=_probability, default=0.25)


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1; status 2 is reserved for alarms."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="harmshift",
                                     description="Sequential monitoring for harmful distribution shift.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("monitor", help="monitor a JSONL loss stream")
    _add_test_options(p)
    _add_common(p, seed_required=False)
    p.add_argument("--input", help="JSONL target records (default stdin)")
    p.add_argument("--source", help="JSONL source records (abs/rel mode)")
    p.add_argument("--checkpoint", help="save state here; resume from it if it exists")
    p.add_argument("--max-records", type=int, help="stop after this many target records in total")
    p.add_argument("--no-skip", action="store_true",
                   help="on resume, treat the input as new records only (do not skip the "
                        "records the checkpoint already consumed)")
    p.add_argument("--seed", type=int, default=None, help="recorded in the manifest only")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("simulate", help="label-shift, drift and covariate-shift simulations")
    _add_test_options(p)
    _add_common(p)
    p.add_argument("--scenario", choices=["grid", "drift", "covariate", "stream"], default="grid")
    p.add_argument("--pi1", type=float, nargs="+", help="target class-1 marginals")
    p.add_argument("--grid-points", type=int, default=20)
    p.add_argument("--methods", nargs="+", default=[m[0] for m in experiments.GRID_METHODS],
                   choices=[m[0] for m in experiments.GRID_METHODS])
    p.add_argument("--max-samples", type=int, default=2000)
    p.add_argument("--n-source", type=int, default=1000)
    p.add_argument("--change-at", type=int, default=1, help="stream scenario: first shifted index")
    p.add_argument("--source-sample", action="store_true",
                   help="stream scenario: emit the source holdout losses instead")
    p.set_defaults(func=cmd_simulate, batch_size=50)

    p = sub.add_parser("bounds-compare", help="source upper bounds versus sample size")
    _add_common(p)
    p.add_argument("--delta", type=_probability, default=0.025)
    p.add_argument("--ns", type=int, nargs="+", default=[50, 100, 200, 500, 1000, 2000, 5000])
    p.add_argument("--methods", nargs="+", default=["betting", "pmeb", "hoeffding"],
                   choices=[m.value for m in Method])
    p.set_defaults(func=cmd_bounds_compare)

    p = sub.add_parser("baseline", help="CLT and conformal-martingale baselines")
    _add_common(p)
    p.add_argument("--experiment", choices=["clt", "conformal"], default="clt")
    p.add_argument("--delta", type=_probability, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--p", type=float, default=0.6, help="clt: Bernoulli mean")
    p.add_argument("--scenario", default="all",
                   choices=["all", *experiments.conformal_schedules()])
    p.add_argument("--kind", choices=[k.value for k in baselines.BettingKind],
                   default="simple-mixture")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("changepoint", help="ARL / detection-delay simulation")
    _add_test_options(p, source="pmeb", target="pmh")
    _add_common(p)
    p.add_argument("--horizon", type=int, default=2000)
    p.add_argument("--pi1", type=float, default=0.8, help="post-change class-1 marginal")
    p.add_argument("--change-at", type=int, nargs="*", default=[1, 500])
    p.add_argument("--stride", type=int, default=1, help="spawn a test every this many losses")
    p.add_argument("--n-source", type=int, default=1000)
    p.add_argument("--summary", help="write the summary JSON here (default stderr)")
    p.set_defaults(func=cmd_changepoint)
    return parser


_REPS_DEFAULT = {"simulate": 250, "bounds-compare": 1000, "baseline": None, "changepoint": 500}


def _fill_defaults(args):
    if args.command == "baseline":
        clt = args.experiment == "clt"
        args.reps = args.reps or (1000 if clt else 50)
        args.delta = args.delta or (0.1 if clt else 0.05)
        args.horizon = args.horizon or (1000 if clt else 2000)
    elif args.command in _REPS_DEFAULT and getattr(args, "reps", None) is None:
        args.reps = _REPS_DEFAULT[args.command]
        if args.command == "simulate" and args.scenario == "covariate":
            args.reps = 100
        if args.command == "simulate" and args.scenario == "drift":
            args.reps = 200
    if getattr(args, "reps", None) is not None and args.reps < 1:
        raise InputError("--reps must be >= 1")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _fill_defaults(args)
        return args.func(args)
    except BrokenPipeError:
        # downstream reader closed early (e.g. piped into head); not an error of ours
        devnull = os.open(os.devnull, os.O_WRONLY)
        os.dup2(devnull, sys.stdout.fileno())
        return EXIT_ERROR
    except InputError as err:
        print(f"harmshift: error: {err}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, OSError) as err:
        print(f"harmshift: error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
