"""Two-task continual pretraining experiment: baseline, lambda sweep, report."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import torch

from . import __version__
from .continual import (
    FisherDiagonal,
    RegularizerSpec,
    SIState,
    TaskSnapshot,
    bind,
    estimate_fisher,
    lr_decay,
    si_consolidate,
)
from .data import load_corpus, load_mc, load_qa
from .evaluate import (
    EvalRecord,
    append_records,
    judge_perplexity,
    mc_accuracy,
    qa_perplexity,
    read_records,
    text_perplexity,
)
from .model import CausalLM, ModelConfig, clone_model, load_checkpoint, params_hash
from .numerics import ParameterStore
from .trainer import TrainConfig, train_task

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.0, 1e2, 1e3, 1e6, 1e9, 1e12)
TASKS = ("A", "B")


class ConfigError(ValueError):
    pass


def _strict(cls, data: dict, where: str, forbid: Sequence[str] = ()):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)} - set(forbid)
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class EvalSet:
    heldout: str | None = None
    qa: str | None = None
    mc: dict[str, str] = field(default_factory=dict)
    judge_questions: str | None = None


@dataclass(frozen=True)
class EvalOptions:
    mc_norm: str = "per_token"
    mc_template: str = "completion"
    qa_mode: str = "joint"
    judge_max_new: int = 48


@dataclass(frozen=True)
class SweepConfig:
    task_a: str
    task_b: str
    fisher_dataset: str
    output_dir: str
    eval_sets: dict[str, EvalSet] = field(default_factory=dict)
    model: ModelConfig = ModelConfig()
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    regularizer: RegularizerSpec = RegularizerSpec()
    train_a: TrainConfig = TrainConfig(learning_rate=1e-3, batch_size=8, total_steps=1500)
    train_b: TrainConfig = TrainConfig()
    judge_train: TrainConfig | None = None
    eval_options: EvalOptions = EvalOptions()
    seed: int = 0

    # -- construction ---------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str | os.PathLike = ".") -> "SweepConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        missing = [k for k in ("task_a", "task_b", "fisher_dataset", "output_dir") if k not in raw]
        if missing:
            raise ConfigError(f"missing config keys {missing}")
        base = Path(base_dir)

        def path(p):
            return None if p is None else str((base / p).resolve())

        seed = int(raw.get("seed", 0))
        kw: dict[str, Any] = {
            "task_a": path(raw["task_a"]),
            "task_b": path(raw["task_b"]),
            "fisher_dataset": path(raw["fisher_dataset"]),
            "output_dir": path(raw["output_dir"]),
            "seed": seed,
        }
        model = _strict(ModelConfig, raw.get("model", {}), "model", forbid=("seed",))
        kw["model"] = dataclasses.replace(model, seed=seed)
        for key, offset in (("train_a", 1), ("train_b", 2), ("judge_train", 3)):
            if key in raw and raw[key] is not None:
                tc = _strict(TrainConfig, raw[key], key, forbid=("seed",))
                kw[key] = dataclasses.replace(tc, seed=seed + offset)
            elif key != "judge_train":
                kw[key] = dataclasses.replace(getattr(cls, key), seed=seed + offset)
        if "regularizer" in raw:
            kw["regularizer"] = _strict(RegularizerSpec, raw["regularizer"], "regularizer", forbid=("strength",))
        if "eval_options" in raw:
            kw["eval_options"] = _strict(EvalOptions, raw["eval_options"], "eval_options")
        if "lambdas" in raw:
            kw["lambdas"] = tuple(float(x) for x in raw["lambdas"])
        sets = {}
        for task, spec in raw.get("eval_sets", {}).items():
            if task not in TASKS:
                raise ConfigError(f"eval_sets: unknown task {task!r}")
            es = _strict(EvalSet, spec, f"eval_sets.{task}")
            sets[task] = EvalSet(
                heldout=path(es.heldout),
                qa=path(es.qa),
                mc={k: path(v) for k, v in es.mc.items()},
                judge_questions=path(es.judge_questions),
            )
        kw["eval_sets"] = sets
        cfg = cls(**kw)
        cfg.validate_values()
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SweepConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
        return cls.from_dict(raw, path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        return d

    # -- checks ---------------------------------------------------------------

    def validate_values(self) -> None:
        lams = list(self.lambdas)
        if not lams:
            raise ConfigError("lambda grid is empty")
        if any(not math.isfinite(x) or x < 0 for x in lams):
            raise ConfigError("lambda values must be finite and non-negative")
        if any(b <= a for a, b in zip(lams, lams[1:])):
            raise ConfigError("lambda grid must be strictly increasing")

    def input_paths(self) -> list[str]:
        paths = [self.task_a, self.task_b, self.fisher_dataset]
        for es in self.eval_sets.values():
            paths += [p for p in (es.heldout, es.qa, es.judge_questions) if p]
            paths += list(es.mc.values())
        return paths

    def validate_paths(self) -> None:
        missing = [p for p in self.input_paths() if not Path(p).exists()]
        if missing:
            raise ConfigError(f"missing input paths: {missing}")

    @property
    def needs_judge(self) -> bool:
        return self.judge_train is not None and any(
            es.judge_questions for es in self.eval_sets.values()
        )


# --- hashing -----------------------------------------------------------------


def _digest_path(p: str) -> str:
    h = hashlib.sha256()
    root = Path(p)
    files = sorted(f for f in root.rglob("*") if f.is_file()) if root.is_dir() else [root]
    for f in files:
        h.update(str(f.relative_to(root) if root.is_dir() else f.name).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def code_version() -> str:
    h = hashlib.sha256(__version__.encode())
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def _hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def baseline_key(cfg: SweepConfig) -> str:
    d = cfg.to_dict()
    return _hash(
        {
            "code": code_version(),
            "model": d["model"],
            "train_a": d["train_a"],
            "judge_train": d["judge_train"],
            "regularizer_kind": cfg.regularizer.kind,
            "si_damping": cfg.regularizer.si_damping,
            "inputs": {p: _digest_path(p) for p in cfg.input_paths()},
            "eval_options": d["eval_options"],
            "eval_sets": d["eval_sets"],
        }
    )


def config_hash(cfg: SweepConfig) -> str:
    d = cfg.to_dict()
    d.pop("output_dir")
    d["inputs"] = {p: _digest_path(p) for p in cfg.input_paths()}
    return _hash(d)


def cell_key(cfg: SweepConfig, lam: float) -> str:
    d = cfg.to_dict()
    return _hash(
        {
            "baseline": baseline_key(cfg),
            "train_b": d["train_b"],
            "regularizer": d["regularizer"],
            "lambda": lam,
        }
    )


def lambda_label(lam: float) -> str:
    return "0" if lam == 0 else f"{lam:.0e}".replace("+", "")


# --- evaluation of one checkpoint ---------------------------------------------


def evaluate_checkpoint(
    model: CausalLM,
    eval_sets: dict[str, EvalSet],
    options: EvalOptions,
    lam: float | None,
    checkpoint: str,
    judge: CausalLM | None = None,
) -> list[EvalRecord]:
    records = []
    for task in sorted(eval_sets):
        es = eval_sets[task]

        def rec(metric, dataset, value, n):
            return EvalRecord(metric, dataset, task, value, n, lam, checkpoint)

        if es.heldout:
            docs = load_corpus(es.heldout).documents
            records.append(rec("ppl", "heldout", text_perplexity(model, docs), len(docs)))
        if es.qa:
            pairs = load_qa(es.qa)
            records.append(rec("ppl", "qa", qa_perplexity(model, pairs, options.qa_mode), len(pairs)))
        for name in sorted(es.mc):
            items = load_mc(es.mc[name])
            acc = mc_accuracy(model, items, options.mc_norm, options.mc_template)
            records.append(rec("mc_acc", name, acc, len(items)))
        if es.judge_questions and judge is not None:
            qs = [p.question for p in load_qa(es.judge_questions)]
            res = judge_perplexity(model, judge, qs, options.judge_max_new)
            records.append(rec("judge_ppl", "judge_questions", res.value, res.n_scored))
    return records


# --- baseline ---------------------------------------------------------------


@dataclass
class Baseline:
    model: CausalLM
    snapshot: TaskSnapshot
    fisher: FisherDiagonal
    records: list[EvalRecord]
    checkpoint_hash: str
    si_importance: ParameterStore | None = None
    judge: CausalLM | None = None


def _read_json(path: Path) -> dict | None:
    try:
        return json.loads(path.read_text())
    except (FileNotFoundError, json.JSONDecodeError):
        return None


def _write_json(path: Path, obj: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str))
    os.replace(tmp, path)


def _train_judge(cfg: SweepConfig, out: Path) -> CausalLM | None:
    if not cfg.needs_judge:
        return None
    jdir = out / "judge"
    key = _hash({"baseline": baseline_key(cfg), "judge": asdict(cfg.judge_train)})
    meta = _read_json(jdir / "meta.json")
    if meta and meta.get("key") == key and (jdir / "model.ckpt").exists():
        return load_checkpoint(jdir / "model.ckpt")[0]
    jdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    judge = CausalLM(dataclasses.replace(cfg.model, seed=cfg.seed + 3))
    log.info("training judge on %s", cfg.task_b)
    res = train_task(
        judge,
        load_corpus(cfg.task_b, language="B"),
        cfg.judge_train,
        log_path=jdir / "train_log.jsonl",
        checkpoint_path=jdir / "model.ckpt",
    )
    _write_json(jdir / "meta.json", {"key": key, "checkpoint_hash": res.checkpoint_hash,
                                     "seconds": time.perf_counter() - t0})
    return judge


def run_baseline(cfg: SweepConfig) -> Baseline:
    """Task-A model, anchor snapshot, Fisher diagonal and baseline evaluation.

    Artifacts are cached under ``<output_dir>/baseline``; a rerun with the same
    inputs, config and code loads them instead of retraining.
    """
    cfg.validate_paths()
    out = Path(cfg.output_dir)
    bdir = out / "baseline"
    bdir.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    key = baseline_key(cfg)
    kind = cfg.regularizer.kind
    meta = _read_json(bdir / "meta.json")
    judge = _train_judge(cfg, out)

    if meta and meta.get("key") == key:
        model, _ = load_checkpoint(bdir / "model.ckpt")
        digest = params_hash(model)
        if digest == meta["checkpoint_hash"]:
            fisher = FisherDiagonal.load(bdir / "fisher.pt", anchor_hash=digest)
            si_imp = None
            if (bdir / "si_importance.pt").exists():
                si_imp = ParameterStore(torch.load(bdir / "si_importance.pt").items())
            log.info("baseline loaded from cache %s", bdir)
            return Baseline(
                model,
                TaskSnapshot.take(model, keep_teacher=kind == "lwf"),
                fisher,
                read_records(bdir / "records.jsonl"),
                digest,
                si_imp,
                judge,
            )

    t0 = time.perf_counter()
    model = CausalLM(cfg.model)
    si_state = SIState.begin(model.params, cfg.regularizer.si_damping) if kind == "si" else None
    log.info("training task A on %s", cfg.task_a)
    res = train_task(
        model,
        load_corpus(cfg.task_a, language="A"),
        cfg.train_a,
        si_state=si_state,
        log_path=bdir / "train_log.jsonl",
        checkpoint_path=bdir / "model.ckpt",
    )
    digest = res.checkpoint_hash
    snapshot = TaskSnapshot.take(model, keep_teacher=kind == "lwf")
    fisher = estimate_fisher(model, load_mc(cfg.fisher_dataset))
    fisher.save(bdir / "fisher.pt")
    si_imp = None
    if si_state is not None:
        si_imp = si_consolidate(si_state, model.params)
        torch.save(dict(si_imp.items()), bdir / "si_importance.pt")
    records = evaluate_checkpoint(model, cfg.eval_sets, cfg.eval_options, None, "baseline", judge)
    (bdir / "records.jsonl").unlink(missing_ok=True)
    append_records(records, bdir / "records.jsonl")
    _write_json(bdir / "meta.json", {"key": key, "checkpoint_hash": digest,
                                     "seconds": time.perf_counter() - t0})
    return Baseline(model, snapshot, fisher, records, digest, si_imp, judge)


# --- sweep ------------------------------------------------------------------


@dataclass
class Cell:
    lam: float
    status: str
    checkpoint: str = ""
    records: list[EvalRecord] = field(default_factory=list)
    anchor_distance: float | None = None
    error: str = ""


@dataclass
class SweepResult:
    lambdas: tuple[float, ...]
    cells: dict[float, Cell]
    baseline: list[EvalRecord]
    provenance: dict

    def records(self) -> list[EvalRecord]:
        out = list(self.baseline)
        for lam in self.lambdas:
            out.extend(self.cells[lam].records)
        return out

    @classmethod
    def load(cls, run_dir: str | os.PathLike) -> "SweepResult":
        """Rebuild a result from the files a sweep leaves in ``run_dir``."""
        run = Path(run_dir)
        prov = _read_json(run / "provenance.json") or {}
        baseline = read_records(run / "baseline" / "records.jsonl")
        cells = {}
        for status_file in sorted((run / "cells").glob("*/status.json")):
            st = json.loads(status_file.read_text())
            recs_path = status_file.parent / "records.jsonl"
            recs = read_records(recs_path) if st["status"] == "done" and recs_path.exists() else []
            lam = float(st["lambda"])
            cells[lam] = Cell(lam, st["status"], st.get("checkpoint", ""), recs,
                              st.get("anchor_distance"), st.get("error", ""))
        return cls(tuple(sorted(cells)), cells, baseline, prov)


def cell_dir(cfg: SweepConfig, lam: float) -> Path:
    return Path(cfg.output_dir) / "cells" / f"lambda={lam!r}"


def anchor_distance(model: CausalLM, anchor: ParameterStore) -> tuple[float, float]:
    """(L2 norm, max abs) of the parameter displacement from ``anchor``."""
    sq, mx = 0.0, 0.0
    for name, p in model.params.items():
        d = p.detach().to(torch.float64) - anchor[name].to(torch.float64)
        sq += float(d.square().sum())
        mx = max(mx, float(d.abs().max()))
    return math.sqrt(sq), mx


def run_cell(cfg: SweepConfig, base: Baseline, lam: float) -> Cell:
    cdir = cell_dir(cfg, lam)
    cdir.mkdir(parents=True, exist_ok=True)
    key = cell_key(cfg, lam)
    st = _read_json(cdir / "status.json")
    if st and st.get("key") == key and st.get("status") == "done":
        return Cell(lam, "done", st["checkpoint"], read_records(cdir / "records.jsonl"),
                    st.get("anchor_distance"))
    resume = bool(st and st.get("key") == key)
    t0 = time.perf_counter()
    _write_json(cdir / "status.json", {"lambda": lam, "key": key, "status": "running"})

    spec = dataclasses.replace(cfg.regularizer, strength=lam)
    regs = bind(spec, base.snapshot, base.fisher, base.si_importance)
    lr = lr_decay(cfg.train_b.learning_rate, spec.lr_decay, spec.lr_min)
    tcfg = dataclasses.replace(cfg.train_b, learning_rate=lr)
    model = clone_model(base.model)
    res = train_task(
        model,
        load_corpus(cfg.task_b, language="B"),
        tcfg,
        regs,
        log_path=cdir / "train_log.jsonl",
        checkpoint_path=cdir / "model.ckpt",
        resume=resume,
    )
    ckpt_id = f"lambda={lambda_label(lam)}:{res.checkpoint_hash[:12]}"
    records = evaluate_checkpoint(model, cfg.eval_sets, cfg.eval_options, lam, ckpt_id, base.judge)
    (cdir / "records.jsonl").unlink(missing_ok=True)
    append_records(records, cdir / "records.jsonl")
    l2, mx = anchor_distance(model, base.snapshot.anchor)
    _write_json(
        cdir / "status.json",
        {
            "lambda": lam,
            "key": key,
            "status": "done",
            "checkpoint": ckpt_id,
            "anchor_distance": l2,
            "anchor_max_abs": mx,
            "seconds": time.perf_counter() - t0,
        },
    )
    return Cell(lam, "done", ckpt_id, records, l2)


def run_sweep(cfg: SweepConfig, lambdas: Sequence[float] | None = None) -> SweepResult:
    """Train and evaluate one task-B model per lambda, each from the same anchor.

    Cells already finished with the same settings are loaded, interrupted ones
    resume from their last checkpoint, and a failing cell is recorded without
    stopping the others.
    """
    base = run_baseline(cfg)
    grid = tuple(cfg.lambdas if lambdas is None else lambdas)
    cells = {}
    for lam in grid:
        log.info("lambda=%s", lambda_label(lam))
        try:
            cells[lam] = run_cell(cfg, base, lam)
        except Exception as exc:  # recorded per cell; the sweep goes on
            log.error("lambda=%s failed: %s", lam, exc)
            cdir = cell_dir(cfg, lam)
            cdir.mkdir(parents=True, exist_ok=True)
            _write_json(
                cdir / "status.json",
                {"lambda": lam, "key": cell_key(cfg, lam), "status": "failed",
                 "error": "".join(traceback.format_exception_only(type(exc), exc)).strip()},
            )
            cells[lam] = Cell(lam, "failed", error=str(exc))
    prov = {"config_hash": config_hash(cfg), "code_version": code_version(),
            "package_version": __version__, "baseline_checkpoint": base.checkpoint_hash}
    _write_json(Path(cfg.output_dir) / "provenance.json", prov)
    return SweepResult(grid, cells, base.records, prov)


# --- desk-scale inputs ---------------------------------------------------------


def make_desk_inputs(
    out_dir: str | os.PathLike,
    context_length: int = 128,
    seed: int = 0,
    n_docs: int = 4000,
    n_heldout: int = 40,
) -> dict:
    """Write synthetic corpora and benchmark files; return a matching config dict.

    Language A plays the base-pretraining task, B the new language. The Fisher
    set is a separate A multiple-choice split sized to the context window.
    """
    from .data import save_corpus, save_mc, save_qa, synth_corpus, synth_mc, synth_qa

    out = Path(out_dir)
    for lang in TASKS:
        train, held = synth_corpus(lang, n_docs + n_heldout, seed).split(n_heldout)
        save_corpus(train, out / "corpora" / f"{lang}_train")
        save_corpus(held, out / "corpora" / f"{lang}_heldout")
        save_mc(synth_mc(lang, 100, seed + 11, n_answer_words=2), out / "bench" / f"{lang}_next_phrase.jsonl")
        save_mc(synth_mc(lang, 100, seed + 12, n_answer_words=1), out / "bench" / f"{lang}_next_word.jsonl")
        save_qa(synth_qa(lang, 40, seed + 13), out / "bench" / f"{lang}_qa.jsonl")
    save_qa(synth_qa("B", 20, seed + 14), out / "bench" / "B_judge.jsonl")
    save_mc(synth_mc("A", 64, seed + 15, max_tokens=context_length), out / "bench" / "A_fisher.jsonl")

    def eval_set(lang):
        es = {
            "heldout": f"corpora/{lang}_heldout",
            "qa": f"bench/{lang}_qa.jsonl",
            "mc": {
                "next_phrase": f"bench/{lang}_next_phrase.jsonl",
                "next_word": f"bench/{lang}_next_word.jsonl",
            },
        }
        if lang == "B":
            es["judge_questions"] = "bench/B_judge.jsonl"
        return es

    return {
        "task_a": "corpora/A_train",
        "task_b": "corpora/B_train",
        "fisher_dataset": "bench/A_fisher.jsonl",
        "output_dir": "run",
        "eval_sets": {lang: eval_set(lang) for lang in TASKS},
        "model": {"n_layers": 2, "d_model": 256, "n_heads": 4, "context_length": context_length},
        "lambdas": list(DEFAULT_LAMBDAS),
        "regularizer": {"kind": "ewc"},
        "train_a": {"learning_rate": 1e-3, "batch_size": 8, "total_steps": 1500},
        "train_b": {k: v for k, v in asdict(TrainConfig()).items() if k != "seed"},
        "judge_train": {"learning_rate": 1e-3, "batch_size": 8, "total_steps": 750},
        "seed": seed,
    }
