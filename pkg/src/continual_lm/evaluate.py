"""Perplexity, multiple-choice accuracy and judge perplexity."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import torch

from .continual import fisher_prompt
from .data import MCItem, QAPair, tokenize
from .model import EOS, CausalLM, continuation_logprobs, generate, sequence_logprob
from .numerics import ContractError

METRICS = ("ppl", "mc_acc", "judge_ppl")


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    metric: str
    dataset: str
    tag: str
    value: float
    n_items: int
    lam: float | None = None
    checkpoint: str = ""

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ContractError(f"unknown metric {self.metric!r}")
        if self.metric == "mc_acc" and not 0 <= self.value <= 1:
            raise ContractError("accuracy must lie in [0, 1]")
        if self.metric != "mc_acc" and not self.value > 0:
            raise ContractError("perplexity must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return {k: d[k] for k in ("metric", "dataset", "tag", "lambda", "checkpoint", "value", "n_items")}

    @classmethod
    def from_json(cls, d: dict) -> "EvalRecord":
        return cls(
            metric=d["metric"],
            dataset=d["dataset"],
            tag=d["tag"],
            value=float(d["value"]),
            n_items=int(d["n_items"]),
            lam=None if d.get("lambda") is None else float(d["lambda"]),
            checkpoint=d.get("checkpoint", ""),
        )


def append_records(records: Iterable[EvalRecord], path: str | os.PathLike) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_records(path: str | os.PathLike) -> list[EvalRecord]:
    with open(path, encoding="utf-8") as fh:
        return [EvalRecord.from_json(json.loads(line)) for line in fh if line.strip()]


# --- fluency ---------------------------------------------------------------


@torch.no_grad()
def text_nll(model: CausalLM, text: bytes | str) -> tuple[float, int]:
    """Summed NLL (nats) and prediction count of a BOS-prefixed text.

    The token stream is cut into non-overlapping context-length chunks; the
    first token of each chunk is context only.
    """
    ids = tokenize(text, add_bos=True)
    ctx = model.config.context_length
    total, count = 0.0, 0
    for start in range(0, len(ids), ctx):
        chunk = ids[start : start + ctx]
        if len(chunk) < 2:
            continue
        total -= float(sequence_logprob(model, chunk[:1], chunk[1:]))
        count += len(chunk) - 1
    return total, count


def text_perplexity(model: CausalLM, texts: Sequence[bytes | str]) -> float:
    """Mean over texts of per-token perplexity exp(mean NLL)."""
    if not texts:
        raise ContractError("text_perplexity needs at least one text")
    ppls = []
    for i, text in enumerate(texts):
        if not text:
            raise ContractError(f"text {i} is empty")
        nll, n = text_nll(model, text)
        ppls.append(math.exp(nll / n))
    return math.fsum(ppls) / len(ppls)


def qa_to_text(pair: QAPair) -> str:
    return f"{pair.question}\n{pair.answer}"


@torch.no_grad()
def answer_perplexity(model: CausalLM, pairs: Sequence[QAPair]) -> float:
    """Mean per-token perplexity of each answer given its question."""
    if not pairs:
        raise ContractError("answer_perplexity needs at least one pair")
    ppls = []
    for p in pairs:
        ctx = tokenize(p.question + "\n", add_bos=True)
        ans = tokenize(p.answer)
        ppls.append(math.exp(-float(sequence_logprob(model, ctx, ans)) / len(ans)))
    return math.fsum(ppls) / len(ppls)


def qa_perplexity(model: CausalLM, pairs: Sequence[QAPair], mode: str = "joint") -> float:
    """QA-pair perplexity: whole ``question\\nanswer`` text, or answer given question."""
    if mode == "joint":
        return text_perplexity(model, [qa_to_text(p) for p in pairs])
    if mode == "answer":
        return answer_perplexity(model, pairs)
    raise ContractError(f"unknown QA perplexity mode {mode!r}")


# --- domain knowledge ------------------------------------------------------


def mc_prompt(item: MCItem, template: str = "completion") -> str:
    if template == "completion":
        return item.question + " "
    if template == "qa_choices":
        return fisher_prompt(item.question, item.choices)
    raise ContractError(f"unknown MC template {template!r}")


def choice_scores(
    model: CausalLM, item: MCItem, norm: str = "per_token", template: str = "completion"
) -> list[float]:
    """Log-likelihood of each choice after the prompt, optionally per token.

    Prompts too long for the context window lose their oldest tokens.
    """
    if norm not in ("none", "per_token"):
        raise ContractError(f"unknown normalization {norm!r}")
    conts = [tokenize(c) for c in item.choices]
    ctx = tokenize(mc_prompt(item, template), add_bos=True)
    room = model.config.context_length - max(len(c) for c in conts)
    if room < 2:
        raise ContractError("a choice does not fit into the context window")
    if len(ctx) > room:
        # keep BOS, drop the oldest prompt tokens
        ctx = ctx[:1] + ctx[len(ctx) - room + 1 :]
    scores = continuation_logprobs(model, ctx, conts)
    if norm == "per_token":
        scores = [s / len(c) for s, c in zip(scores, conts)]
    return scores


def predict(scores: Sequence[float]) -> int:
    """Argmax with ties going to the lowest index."""
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best


def mc_accuracy(
    model: CausalLM,
    items: Sequence[MCItem],
    norm: str = "per_token",
    template: str = "completion",
) -> float:
    if not items:
        raise ContractError("mc_accuracy needs at least one item")
    correct = sum(predict(choice_scores(model, it, norm, template)) == it.gold_index for it in items)
    return correct / len(items)


# --- judged generations ----------------------------------------------------


@dataclass(frozen=True)
class JudgeResult:
    value: float
    n_scored: int
    n_empty: int
    per_question: tuple[float | None, ...]


@torch.no_grad()
def judge_perplexity(
    subject: CausalLM, judge: CausalLM, questions: Sequence[str], max_new: int = 48
) -> JudgeResult:
    """Judge's per-token perplexity of the subject's greedy answers.

    Each question is prompted as BOS + ``question\\n``. Empty answers
    (immediate EOS) are left out of the mean and counted.
    """
    if max_new < 1:
        raise ContractError("max_new must be >= 1")
    per_q: list[float | None] = []
    for q in questions:
        ctx = tokenize(q + "\n", add_bos=True)
        new = generate(subject, ctx, max_new)
        answer = new[:-1] if new and new[-1] == EOS else new
        if not answer:
            per_q.append(None)
            continue
        lp = float(sequence_logprob(judge, ctx, answer))
        per_q.append(math.exp(-lp / len(answer)))
    scored = [v for v in per_q if v is not None]
    if not scored:
        raise EvaluationError("every generated answer was empty")
    return JudgeResult(math.fsum(scored) / len(scored), len(scored), len(per_q) - len(scored), tuple(per_q))
