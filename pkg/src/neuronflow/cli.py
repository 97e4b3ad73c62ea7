"""``neuronflow`` command line: reproducible experiments with one directory per run.

Exit status: 0 on success, 1 on configuration or input errors (nothing is
written), 2 when an internal invariant fails.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import Experiment, load
from .engine import (ABLATION_STEPS, DECODE_TOKEN_BASE, RunMetrics, metrics_csv,
                     simulate_decode, simulate_prefill, summary_json)
from .errors import InvariantError, NeuronFlowError
from .model import generate_trace, make_synthetic_model, write_model
from .pipeline import Policy, Resources, fig6_instance, run_policy, utilization

COMMANDS = ("gen-model", "gen-trace", "plan", "simulate", "ablation", "scenario", "report")
SCENARIOS = ("fig6", "bon", "prefill-overlap")
BON_SCHEDULE = [4] * 4 + [3] * 4 + [2] * 4 + [1] * 4


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("NEURONFLOW_THREADS", "1")))
    except ValueError:
        return 1


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Commands.  Each returns {file name: text or bytes}; nothing touches disk
# until the command has finished.
# --------------------------------------------------------------------------

def cmd_gen_model(exp: Experiment, args) -> dict:
    spec = exp.gen_model
    path = Path(args.out) / "model.nfm"
    return {"model.nfm": lambda: write_model(path, spec, make_synthetic_model(spec))}


def cmd_gen_trace(exp: Experiment, args) -> dict:
    sched = exp.run["batch_schedule"]
    trace = generate_trace(exp.spec, exp.skew, len(sched), sched, first_token=DECODE_TOKEN_BASE)
    trace.validate()
    return {"trace.jsonl": "".join(json.dumps(e.to_json(), sort_keys=True) + "\n" for e in trace)}


def cmd_plan(exp: Experiment, args) -> dict:
    return {"plan.json": exp.run_config().plan.dumps()}


def cmd_simulate(exp: Experiment, args) -> dict:
    cfg = exp.run_config()
    metrics, events = simulate_decode(cfg)
    out = {"metrics.csv": metrics_csv([("decode", metrics)]), "summary.json": summary_json(metrics)}
    if events is not None:
        events.validate()
        out["events.csv"] = events.to_csv()
    return out


def _one(args) -> RunMetrics:
    cfg, flags = args
    return simulate_decode(replace(cfg, flags=flags, record_events=False))[0]


def cmd_ablation(exp: Experiment, args) -> dict:
    cfg = exp.run_config()
    jobs = [(cfg, flags) for _, flags in ABLATION_STEPS]
    n = min(_threads(), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_one, jobs))
    else:
        results = [_one(j) for j in jobs]
    return {"ablation.csv": metrics_csv(list(zip([s for s, _ in ABLATION_STEPS], results)), label="step")}


def scenario_fig6() -> dict:
    res = Resources.uniform(4)
    rows, out = [], {}
    for policy in (Policy.MATRIX_LEVEL, Policy.CLUSTER_LEVEL):
        log = run_policy(fig6_instance(), res, policy)
        log.validate()
        u = utilization(log)
        rows.append((policy.value, log.makespan, u.overlap_fraction, u.idle_bubbles, log.fallback))
        out[f"fig6_{policy.value}_events.csv"] = log.to_csv()
    if not rows[1][1] < rows[0][1]:
        raise InvariantError(f"cluster-level makespan {rows[1][1]} is not below matrix-level {rows[0][1]}")
    out["fig6.csv"] = _csv(("policy", "makespan", "overlap_fraction", "idle_bubbles", "fallback"), rows)
    return out


def scenario_bon(exp: Experiment) -> dict:
    cfg = exp.run_config(batch_schedule=BON_SCHEDULE, offload_fraction=0.0)
    hyb = simulate_decode(replace(cfg, flags=replace(cfg.flags, xpu=True), record_events=False))[0]
    cpu = simulate_decode(replace(cfg, flags=replace(cfg.flags, xpu=False), record_events=False))[0]
    rows = [(i, int(b), float(h), float(c), float(f))
            for i, (b, h, c, f) in enumerate(zip(hyb.step_batch, hyb.step_speed, cpu.step_speed, hyb.npu_fraction))]
    return {"bon.csv": _csv(("step", "batch", "hybrid_iter_per_s", "cpu_iter_per_s", "npu_fraction"), rows)}


def scenario_prefill(exp: Experiment) -> dict:
    cfg = exp.run_config(batch_schedule=[1])
    seq = simulate_prefill(cfg, exp.prompt_len, sequential=True)
    rnd = simulate_prefill(cfg, exp.prompt_len, sequential=False)
    rows = [(i, float(seq.layer_compute[i]), float(seq.layer_load[i]), float(rnd.layer_load[i]), bool(seq.hidden[i]))
            for i in range(seq.layer_load.size)]
    return {"prefill.csv": _csv(("layer", "compute_s", "seq_load_s", "rand_load_s", "hidden"), rows),
            "prefill.json": summary_json(seq)}


def cmd_scenario(exp: Experiment, args) -> dict:
    if args.name == "fig6":
        return scenario_fig6()
    if args.name == "bon":
        return scenario_bon(exp)
    return scenario_prefill(exp)


def cmd_report(exp: Experiment, args) -> dict:
    out = Path(args.out)
    csvs = sorted(p for p in out.glob("*.csv") if not p.name.endswith("_events.csv") and p.name != "events.csv")
    lines = ["# neuronflow report", ""]
    if not csvs:
        lines.append("No CSV artifacts found.")
    for p in csvs:
        rows = list(csv.reader(p.read_text().splitlines()))
        if not rows:
            continue
        lines += [f"## {p.stem}", "", "| " + " | ".join(rows[0]) + " |",
                  "|" + "---|" * len(rows[0])]
        for r in rows[1:]:
            lines.append("| " + " | ".join(_fmt(v) for v in r) + " |")
        lines.append("")
    return {"report.md": "\n".join(lines)}


def _fmt(v: str) -> str:
    try:
        f = float(v)
    except ValueError:
        return v
    return v if f.is_integer() and "." not in v and "e" not in v else f"{f:.4g}"


HANDLERS = {"gen-model": cmd_gen_model, "gen-trace": cmd_gen_trace, "plan": cmd_plan,
            "simulate": cmd_simulate, "ablation": cmd_ablation, "scenario": cmd_scenario,
            "report": cmd_report}


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment TOML (built-in defaults if omitted)")
    common.add_argument("--out", default="out", help="output directory for this run (default: out)")
    common.add_argument("--seed", type=int, help="seed override, unsigned 64-bit")
    common.add_argument("--quiet", action="store_true", help="print nothing on success")
    p = argparse.ArgumentParser(
        prog="neuronflow", description="Sparse-FFN offloading simulator for phone-class hardware.",
        epilog="NEURONFLOW_THREADS caps how many ablation runs execute in parallel (default 1).")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-model", parents=[common], help="write a synthetic model container")
    sub.add_parser("gen-trace", parents=[common], help="write a decode activation trace (JSONL)")
    sub.add_parser("plan", parents=[common], help="profile and write plan.json")
    sub.add_parser("simulate", parents=[common], help="simulate decode and write metrics")
    sub.add_parser("ablation", parents=[common], help="run the incremental-optimization table")
    sc = sub.add_parser("scenario", parents=[common], help="run a named fixture")
    sc.add_argument("name", choices=SCENARIOS)
    sub.add_parser("report", parents=[common], help="render a markdown summary of the CSVs in --out")
    return p


def _manifest(exp: Experiment, args, names) -> str:
    return json.dumps({
        "command": args.command if args.command != "scenario" else f"scenario {args.name}",
        "config": args.config, "config_hash": exp.config_hash, "seed": exp.seed,
        "artifacts": sorted(names),
        "versions": {"neuronflow": __version__, "python": platform.python_version(), "numpy": np.__version__},
    }, indent=2, sort_keys=True) + "\n"


def _error(kind: str, exc: BaseException) -> None:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise NeuronFlowError("--seed must fit in an unsigned 64-bit integer")
        exp = load(args.config, args.seed)
        artifacts = HANDLERS[args.command](exp, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, content in artifacts.items():
            if callable(content):
                content()
            elif isinstance(content, bytes):
                (out / name).write_bytes(content)
            else:
                (out / name).write_text(content)
        (out / "manifest.json").write_text(_manifest(exp, args, artifacts))
    except InvariantError as exc:
        _error("invariant", exc)
        return 2
    except (NeuronFlowError, OSError) as exc:
        _error("config", exc)
        return 1
    if not args.quiet:
        print(f"{args.command}: wrote {', '.join(sorted(artifacts))} and manifest.json to {out}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
