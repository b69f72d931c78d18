"""Tables, lambda curves and plots from a sweep result.

Everything here is a pure function of :class:`SweepResult`; numbers are
written with ``repr`` so they round-trip exactly.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

from .evaluate import EvalRecord
from .experiment import SweepResult, lambda_label

CSV_COLUMNS = ("metric", "dataset", "tag", "lambda", "checkpoint", "value", "n_items")
FAILED = "failed"


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def sentinel_x(lambdas) -> float:
    """Log-axis position for lambda = 0: one decade below the smallest positive lambda."""
    pos = [x for x in lambdas if x > 0]
    return 10.0 ** (math.floor(math.log10(min(pos))) - 1) if pos else 1.0


def _cells(result: SweepResult) -> list[tuple[str, str, str]]:
    keys = {(r.metric, r.dataset, r.tag) for r in result.records()}
    return sorted(keys)


def write_records_csv(result: SweepResult, path: Path) -> None:
    keys = _cells(result)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in result.baseline:
            w.writerow([r.metric, r.dataset, r.tag, "", r.checkpoint, _fmt(r.value), r.n_items])
        for lam in result.lambdas:
            cell = result.cells[lam]
            if cell.status == "done":
                for r in cell.records:
                    w.writerow([r.metric, r.dataset, r.tag, _fmt(lam), r.checkpoint, _fmt(r.value), r.n_items])
            else:
                for metric, dataset, tag in keys:
                    w.writerow([metric, dataset, tag, _fmt(lam), FAILED, "", 0])


def read_records_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _lookup(result: SweepResult) -> dict[tuple, float]:
    table = {}
    for lam in result.lambdas:
        for r in result.cells[lam].records:
            table[(r.metric, r.tag, r.dataset, lam)] = r.value
    return table


def mean_accuracy(records: list[EvalRecord], tag: str) -> float | None:
    """Unweighted mean of per-benchmark MC accuracies for one task."""
    accs = [r.value for r in records if r.metric == "mc_acc" and r.tag == tag]
    return math.fsum(accs) / len(accs) if accs else None


def write_curves(result: SweepResult, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    table = _lookup(result)
    x0 = sentinel_x(result.lambdas)
    groups: dict[tuple[str, str], set[str]] = defaultdict(set)
    for metric, dataset, tag in _cells(result):
        groups[(metric, tag)].add(dataset)
    paths = []
    for (metric, tag), datasets in sorted(groups.items()):
        datasets = sorted(datasets)
        p = out / f"{metric}_{tag}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda", "x", "label", *datasets])
            for lam in result.lambdas:
                x = lam if lam > 0 else x0
                vals = [_fmt(table.get((metric, tag, d, lam))) for d in datasets]
                w.writerow([_fmt(lam), _fmt(x), lambda_label(lam), *vals])
        paths.append(p)
    return paths


def summary_rows(result: SweepResult) -> tuple[list[str], list[list[str]]]:
    tags = sorted({r.tag for r in result.records()})
    header = ["lambda"] + [f"mean_mc_acc_{t}" for t in tags] + [f"ppl_heldout_{t}" for t in tags]

    def row(label, records):
        ppl = {r.tag: r.value for r in records if r.metric == "ppl" and r.dataset == "heldout"}
        return (
            [label]
            + [_fmt(mean_accuracy(records, t)) for t in tags]
            + [_fmt(ppl.get(t)) for t in tags]
        )

    rows = [row("baseline", result.baseline)]
    for lam in result.lambdas:
        cell = result.cells[lam]
        if cell.status == "done":
            rows.append(row(_fmt(lam), cell.records))
        else:
            rows.append([_fmt(lam)] + [FAILED] * (len(header) - 1))
    return header, rows


def write_summary(result: SweepResult, out: Path) -> None:
    header, rows = summary_rows(result)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    lines = [
        "# Sweep summary",
        "",
        "Mean multiple-choice accuracy is the unweighted mean over benchmarks of each task.",
        "Empty cells have no measurement. lambda = 0 trains without regularization.",
        "",
        "| " + " | ".join(header) + " |",
        "|" + "---|" * len(header),
    ]
    lines += ["| " + " | ".join(c if c else " " for c in r) + " |" for r in rows]
    prov = result.provenance
    if prov:
        lines += ["", f"config hash: `{prov.get('config_hash', '')}`",
                  f"code version: `{prov.get('code_version', '')}`"]
    (out / "summary.md").write_text("\n".join(lines) + "\n")


def parse_summary_md(path: Path) -> dict[str, dict[str, float | None]]:
    """Read the summary table back: {lambda label: {column: value}}."""
    rows = [l for l in Path(path).read_text().splitlines() if l.startswith("|")]
    header = [c.strip() for c in rows[0].strip("|").split("|")]
    out = {}
    for line in rows[2:]:
        cells = [c.strip() for c in line.strip("|").split("|")]
        vals = {}
        for h, c in zip(header[1:], cells[1:]):
            vals[h] = float(c) if c and c != FAILED else None
        out[cells[0]] = vals
    return out


def write_plots(result: SweepResult, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out.mkdir(parents=True, exist_ok=True)
    table = _lookup(result)
    lams = list(result.lambdas)
    x0 = sentinel_x(lams)
    xs = [x if x > 0 else x0 for x in lams]
    base = {(r.metric, r.tag, r.dataset): r.value for r in result.baseline}
    groups: dict[tuple[str, str], set[str]] = defaultdict(set)
    for metric, dataset, tag in _cells(result):
        groups[(metric, tag)].add(dataset)
    paths = []
    for (metric, tag), datasets in sorted(groups.items()):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for i, d in enumerate(sorted(datasets)):
            ys = [table.get((metric, tag, d, lam), math.nan) for lam in lams]
            line, = ax.plot(xs, ys, marker="o", label=d)
            if (metric, tag, d) in base:
                ax.axhline(base[(metric, tag, d)], ls="--", lw=0.8, color=line.get_color())
        _lambda_axis(ax, lams, xs)
        ax.set_ylabel(metric)
        ax.set_title(f"{metric}, task {tag} (dashed: before task B)")
        ax.legend(fontsize=7)
        fig.tight_layout()
        p = out / f"{metric}_{tag}.svg"
        fig.savefig(p)
        plt.close(fig)
        paths.append(p)

    tags = sorted({r.tag for r in result.records()})
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for tag in tags:
        ys = []
        for lam in lams:
            m = mean_accuracy(result.cells[lam].records, tag)
            ys.append(math.nan if m is None else m)
        line, = ax.plot(xs, ys, marker="o", label=f"task {tag}")
        b = mean_accuracy(result.baseline, tag)
        if b is not None:
            ax.axhline(b, ls="--", lw=0.8, color=line.get_color())
    _lambda_axis(ax, lams, xs)
    ax.set_ylabel("mean MC accuracy")
    ax.legend(fontsize=7)
    fig.tight_layout()
    p = out / "mean_mc_acc.svg"
    fig.savefig(p)
    plt.close(fig)
    paths.append(p)
    return paths


def _lambda_axis(ax, lams, xs) -> None:
    ax.set_xscale("log")
    ax.set_xticks(xs)
    ax.set_xticklabels([lambda_label(l) for l in lams], rotation=45, fontsize=7)
    ax.minorticks_off()
    ax.set_xlabel("regularization strength (0 = none)")


def report(result: SweepResult, out_dir: str | Path) -> dict[str, Path]:
    if not result.lambdas and not result.baseline:
        raise ValueError("nothing to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(result, out / "records.csv")
    write_curves(result, out / "curves")
    write_summary(result, out)
    write_plots(result, out / "plots")
    return {
        "records": out / "records.csv",
        "curves": out / "curves",
        "summary": out / "summary.md",
        "plots": out / "plots",
    }
