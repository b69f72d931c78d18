"""Synthesize the desk-scale inputs, run the full lambda sweep and print a digest.

    python3 scripts/run_desk_sweep.py --root runs/desk

Reruns reuse the cached baseline and finished cells.
"""
import argparse
import json
import logging
from pathlib import Path

from continual_lm.experiment import SweepConfig, make_desk_inputs, run_sweep
from continual_lm.numerics import configure_threads
from continual_lm.report import report


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    configure_threads(args.threads)

    root = Path(args.root)
    cfg_path = root / "config.json"
    if not cfg_path.exists():
        raw = make_desk_inputs(root, seed=args.seed)
        cfg_path.write_text(json.dumps(raw, indent=2) + "\n")
    cfg = SweepConfig.load(cfg_path)
    result = run_sweep(cfg)
    paths = report(result, cfg.output_dir)

    ppl = {
        lam: {r.tag: r.value for r in cell.records if r.metric == "ppl" and r.dataset == "heldout"}
        for lam, cell in result.cells.items()
    }
    base = {r.tag: r.value for r in result.baseline if r.metric == "ppl" and r.dataset == "heldout"}
    print(f"baseline  ppl A {base['A']:.4g}  ppl B {base['B']:.4g}")
    for lam in result.lambdas:
        cell = result.cells[lam]
        if cell.status != "done":
            print(f"lambda={lam:g}  FAILED  {cell.error}")
            continue
        print(f"lambda={lam:g}  ppl A {ppl[lam]['A']:.4g}  ppl B {ppl[lam]['B']:.4g}  "
              f"|theta - theta_A| {cell.anchor_distance:.4g}")
    print(paths["summary"].read_text())


if __name__ == "__main__":
    main()
