"""Command-line entry point: ``python -m continual_lm <command>``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .numerics import configure_threads


def _cmd_synth(args) -> int:
    from .experiment import make_desk_inputs

    cfg = make_desk_inputs(args.out, context_length=args.context_length, seed=args.seed)
    path = Path(args.out) / "config.json"
    path.write_text(json.dumps(cfg, indent=2) + "\n")
    print(path)
    return 0


def _cmd_baseline(args) -> int:
    from .experiment import SweepConfig, run_baseline

    cfg = SweepConfig.load(args.config)
    base = run_baseline(cfg)
    for r in base.records:
        print(json.dumps(r.to_json()))
    return 0


def _cmd_sweep(args) -> int:
    from .experiment import SweepConfig, run_sweep
    from .report import report

    cfg = SweepConfig.load(args.config)
    result = run_sweep(cfg, args.lambdas)
    report(result, cfg.output_dir)
    failed = [lam for lam, c in result.cells.items() if c.status != "done"]
    for lam in failed:
        print(f"lambda={lam!r} failed: {result.cells[lam].error}", file=sys.stderr)
    return 1 if failed else 0


def _cmd_eval(args) -> int:
    from .experiment import EvalOptions, EvalSet, _strict, evaluate_checkpoint
    from .model import load_checkpoint

    suite_path = Path(args.suite)
    suite = json.loads(suite_path.read_text())
    unknown = set(suite) - {"eval_sets", "judge_checkpoint", "eval_options"}
    if unknown:
        raise SystemExit(f"unknown suite keys {sorted(unknown)}")
    base = suite_path.parent

    def path(p):
        return None if p is None else str((base / p).resolve())

    sets = {}
    for task, spec in suite.get("eval_sets", {}).items():
        es = _strict(EvalSet, spec, f"eval_sets.{task}")
        sets[task] = EvalSet(path(es.heldout), path(es.qa), {k: path(v) for k, v in es.mc.items()},
                             path(es.judge_questions))
    options = _strict(EvalOptions, suite.get("eval_options", {}), "eval_options")
    model, blob = load_checkpoint(args.checkpoint)
    judge = load_checkpoint(path(suite["judge_checkpoint"]))[0] if suite.get("judge_checkpoint") else None
    records = evaluate_checkpoint(model, sets, options, args.lam, blob["hash"][:12], judge)
    out = open(args.out, "a") if args.out else sys.stdout
    for r in records:
        out.write(json.dumps(r.to_json()) + "\n")
    if args.out:
        out.close()
    return 0


def _cmd_fisher(args) -> int:
    from .continual import estimate_fisher
    from .data import load_mc
    from .model import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    fisher = estimate_fisher(model, load_mc(args.dataset))
    out = args.out or str(Path(args.checkpoint).with_name("fisher.pt"))
    fisher.save(out)
    flat = fisher.values.flatten()
    print(json.dumps({
        "path": out,
        "n_examples": fisher.n_examples,
        "anchor_hash": fisher.anchor_hash,
        "mean": float(flat.mean()),
        "max": float(flat.max()),
        "zero_fraction": float((flat == 0).double().mean()),
    }))
    return 0


def _cmd_report(args) -> int:
    from .experiment import SweepResult
    from .report import report

    result = SweepResult.load(args.run)
    paths = report(result, args.run)
    print(paths["summary"].read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="continual-lm", description=__doc__)
    p.add_argument("--threads", type=int, default=None,
                   help="intra-op threads (default: $CONTINUAL_LM_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic corpora, benchmarks and a sweep config")
    s.add_argument("--out", required=True)
    s.add_argument("--context-length", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("baseline", help="train task A, estimate Fisher, evaluate")
    s.add_argument("--config", required=True)
    s.set_defaults(func=_cmd_baseline)

    s = sub.add_parser("sweep", help="train task B for each lambda and report")
    s.add_argument("--config", required=True)
    s.add_argument("--lambda", dest="lambdas", type=float, action="append",
                   help="run only these lambda values (repeatable)")
    s.set_defaults(func=_cmd_sweep)

    s = sub.add_parser("eval", help="evaluate one checkpoint on a suite file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--suite", required=True)
    s.add_argument("--lambda", dest="lam", type=float, default=None)
    s.add_argument("--out", default=None, help="append records here instead of stdout")
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("fisher", help="estimate a diagonal Fisher for a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=_cmd_fisher)

    s = sub.add_parser("report", help="rebuild tables and plots for a run directory")
    s.add_argument("--run", required=True)
    s.set_defaults(func=_cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    configure_threads(args.threads)
    return args.func(args)
