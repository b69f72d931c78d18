"""Regularization-based continual learning.

Elastic weight consolidation with an empirical diagonal Fisher, synaptic
intelligence, learning without forgetting, and the per-task learning-rate
decay heuristic. Penalties are differentiable scalars meant to be added to the
task loss with :func:`total_loss`.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch

from .data import MCItem, tokenize
from .model import CausalLM, atomic_save, params_hash, sequence_logprob
from .numerics import ContractError, NumericError, ParameterStore, backward

FISHER_VERSION = 1
FISHER_TEMPLATE_ID = "qa_choices_v1"

KINDS = ("none", "ewc", "si", "lwf")


def fisher_prompt(question: str, choices: Sequence[str]) -> str:
    enumerated = " ".join(f"{i + 1}) {c}" for i, c in enumerate(choices))
    return f"Question: {question}\nChoices: {enumerated}\nAnswer: "


def fisher_example(item: MCItem) -> tuple[list[int], list[int]]:
    """(x, y) token ids: BOS + templated prompt, gold choice text."""
    x = tokenize(fisher_prompt(item.question, item.choices), add_bos=True)
    y = tokenize(item.choices[item.gold_index])
    return x, y


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "ewc"
    strength: float = 0.0
    si_damping: float = 1e-3
    lwf_temperature: float = 1.0
    lr_decay: float = 1.0
    lr_min: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown regularizer kind {self.kind!r}")
        if self.strength < 0:
            raise ContractError("regularization strength must be >= 0")
        if self.si_damping <= 0:
            raise ContractError("SI damping must be > 0")
        if self.lwf_temperature <= 0:
            raise ContractError("LwF temperature must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ContractError("lr decay factor must lie in (0, 1]")
        if self.lr_min < 0:
            raise ContractError("lr_min must be >= 0")


@dataclass(frozen=True)
class TaskSnapshot:
    """Frozen parameters at the end of a task (plus an optional frozen teacher)."""

    anchor: ParameterStore
    anchor_hash: str = ""
    teacher: CausalLM | None = None

    @classmethod
    def take(cls, model: CausalLM, keep_teacher: bool = False) -> "TaskSnapshot":
        from .model import clone_model

        teacher = None
        if keep_teacher:
            teacher = clone_model(model)
            teacher.requires_grad_(False)
        return cls(model.params.detached_copy(), params_hash(model), teacher)


@dataclass
class FisherDiagonal:
    values: ParameterStore
    n_examples: int
    template_id: str = FISHER_TEMPLATE_ID
    anchor_hash: str = ""

    def save(self, path: str | os.PathLike) -> None:
        atomic_save(
            {
                "format": "continual_lm.fisher",
                "version": FISHER_VERSION,
                "arrays": {k: v.clone() for k, v in self.values.items()},
                "n_examples": self.n_examples,
                "template_id": self.template_id,
                "anchor_hash": self.anchor_hash,
            },
            path,
        )

    @classmethod
    def load(cls, path: str | os.PathLike, anchor_hash: str | None = None) -> "FisherDiagonal":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("format") != "continual_lm.fisher" or blob.get("version") != FISHER_VERSION:
            raise ValueError(f"{path} is not a version-{FISHER_VERSION} Fisher file")
        if anchor_hash is not None and blob["anchor_hash"] != anchor_hash:
            raise ValueError(
                f"Fisher file {path} was estimated at anchor {blob['anchor_hash'][:12]}, "
                f"not {anchor_hash[:12]}"
            )
        return cls(
            ParameterStore(blob["arrays"].items()),
            blob["n_examples"],
            blob["template_id"],
            blob["anchor_hash"],
        )


def estimate_fisher(model: CausalLM, fisher_set: Sequence[MCItem]) -> FisherDiagonal:
    """Empirical diagonal Fisher at the current parameters.

    One gradient of log p(gold | prompt) per item (batch of 1); squared
    gradients are accumulated in double precision and averaged.
    """
    if not fisher_set:
        raise ContractError("Fisher set is empty")
    params = model.params
    acc = params.zeros_like(dtype=torch.float64)
    was_training = model.training
    model.eval()
    try:
        for idx, item in enumerate(fisher_set):
            x, y = fisher_example(item)
            try:
                grads = backward(sequence_logprob(model, x, y), params)
            except NumericError as exc:
                raise NumericError(f"Fisher item {idx}: {exc}") from None
            for name, g in grads.items():
                acc[name].add_(g.to(torch.float64).square())
    finally:
        model.train(was_training)
    n = len(fisher_set)
    values = ParameterStore((k, v / n) for k, v in acc.items())
    return FisherDiagonal(values, n, FISHER_TEMPLATE_ID, params_hash(model))


def _quadratic_pull(
    params: Mapping[str, torch.Tensor],
    anchor: ParameterStore,
    weights: Mapping[str, torch.Tensor],
) -> torch.Tensor:
    anchor.assert_aligned(params, "parameters/anchor")
    anchor.assert_aligned(weights, "importance/anchor")
    total = torch.zeros((), dtype=torch.float64)
    # sorted: the value must not depend on store iteration order
    for name in sorted(anchor.keys()):
        p = params[name]
        total = total + _WeightedSquare.apply(p, anchor[name].to(p.dtype), weights[name].to(p.dtype))
    return total


class _WeightedSquare(torch.autograd.Function):
    """sum(w * (p - a)^2) in the parameter's dtype, differentiable in p only.

    One fused pass instead of a chain of autograd nodes; the penalty runs on
    every training step over every parameter.
    """

    @staticmethod
    def forward(ctx, p, a, w):
        d = p.detach() - a
        wd = w * d
        ctx.save_for_backward(wd)
        return torch.dot(wd.reshape(-1), d.reshape(-1)).to(torch.float64)

    @staticmethod
    def backward(ctx, g):
        (wd,) = ctx.saved_tensors
        return (2 * g).to(wd.dtype) * wd, None, None


def ewc_penalty(
    params: Mapping[str, torch.Tensor],
    snapshot: TaskSnapshot,
    fisher: FisherDiagonal,
    strength: float,
) -> torch.Tensor:
    """(strength / 2) * sum_i F_i (theta_i - theta_A_i)^2."""
    return 0.5 * strength * _quadratic_pull(params, snapshot.anchor, fisher.values)


@dataclass
class SIState:
    """Running path integral for synaptic intelligence on the current task."""

    start: ParameterStore
    damping: float = 1e-3
    numerator: ParameterStore = field(init=False)

    def __post_init__(self):
        if self.damping <= 0:
            raise ContractError("SI damping must be > 0")
        self.numerator = self.start.zeros_like(dtype=torch.float64)

    @classmethod
    def begin(cls, params: ParameterStore, damping: float = 1e-3) -> "SIState":
        return cls(params.detached_copy(), damping)


def si_accumulate(
    state: SIState, delta: Mapping[str, torch.Tensor], grad: Mapping[str, torch.Tensor]
) -> SIState:
    """numerator_i += delta_i * (-grad_i), for one optimizer step."""
    state.numerator.assert_aligned(delta, "SI step")
    state.numerator.assert_aligned(grad, "SI gradient")
    for name, acc in state.numerator.items():
        acc.sub_(delta[name].to(torch.float64) * grad[name].to(torch.float64))
    return state


def si_consolidate(state: SIState, end: Mapping[str, torch.Tensor]) -> ParameterStore:
    """Importance numerator / ((end - start)^2 + damping), clamped at zero."""
    state.start.assert_aligned(end, "SI end parameters")
    out = []
    for name, num in state.numerator.items():
        moved = end[name].detach().to(torch.float64) - state.start[name].to(torch.float64)
        out.append((name, (num / (moved.square() + state.damping)).clamp_min(0.0)))
    return ParameterStore(out)


def si_penalty(
    params: Mapping[str, torch.Tensor],
    anchor: ParameterStore,
    importance: ParameterStore,
    strength: float,
) -> torch.Tensor:
    """strength * sum_i S_i (theta_i - theta_end_i)^2."""
    return strength * _quadratic_pull(params, anchor, importance)


def lwf_penalty(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    strength: float,
    temperature: float = 1.0,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """strength * mean over positions of KL(softmax(teacher) || softmax(student)), in nats."""
    if student_logits.shape != teacher_logits.shape:
        raise ContractError(
            f"logit shapes differ: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}"
        )
    s = torch.log_softmax(student_logits.to(torch.float64) / temperature, dim=-1)
    t = torch.log_softmax(teacher_logits.detach().to(torch.float64) / temperature, dim=-1)
    kl = (t.exp() * (t - s)).sum(-1)
    if mask is None:
        return strength * kl.mean()
    mask = mask.to(kl.dtype)
    return strength * (kl * mask).sum() / mask.sum()


def lr_decay(lr_prev: float, gamma: float, lr_min: float) -> float:
    if not 0 < gamma <= 1:
        raise ContractError("gamma must lie in (0, 1]")
    if lr_min < 0:
        raise ContractError("lr_min must be >= 0")
    return max(lr_min, lr_prev * gamma)


def total_loss(task_loss: torch.Tensor, penalties: Sequence[torch.Tensor] = ()) -> torch.Tensor:
    out = task_loss
    for p in penalties:
        out = out + p
    return out


# --- regularizers bound to their task artifacts ----------------------------


class _CastCache:
    """Anchor and importance stores converted once to the model's dtype."""

    def __init__(self, *stores: ParameterStore):
        self.stores, self.dtype, self.cast = stores, None, stores

    def get(self, dtype: torch.dtype) -> tuple[ParameterStore, ...]:
        if dtype != self.dtype:
            self.cast = tuple(ParameterStore((k, v.detach().to(dtype)) for k, v in s.items()) for s in self.stores)
            self.dtype = dtype
        return self.cast


class Regularizer:
    """A penalty with everything it needs resolved; used by the trainer."""

    kind = "none"

    def __init__(self, strength: float):
        self.strength = strength

    def penalty(self, model: CausalLM, batch: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class EWC(Regularizer):
    kind = "ewc"

    def __init__(self, snapshot: TaskSnapshot, fisher: FisherDiagonal, strength: float):
        super().__init__(strength)
        self.snapshot, self.fisher = snapshot, fisher
        self._cast = _CastCache(snapshot.anchor, fisher.values)

    def penalty(self, model, batch, logits):
        anchor, values = self._cast.get(model.dtype)
        return 0.5 * self.strength * _quadratic_pull(model.params, anchor, values)


class SI(Regularizer):
    kind = "si"

    def __init__(self, anchor: ParameterStore, importance: ParameterStore, strength: float):
        super().__init__(strength)
        self.anchor, self.importance = anchor, importance
        self._cast = _CastCache(anchor, importance)

    def penalty(self, model, batch, logits):
        anchor, importance = self._cast.get(model.dtype)
        return si_penalty(model.params, anchor, importance, self.strength)


class LwF(Regularizer):
    kind = "lwf"

    def __init__(self, teacher: CausalLM, strength: float, temperature: float = 1.0):
        super().__init__(strength)
        self.teacher, self.temperature = teacher, temperature

    def penalty(self, model, batch, logits):
        from .model import PAD

        with torch.no_grad():
            teacher_logits = self.teacher(batch)
        return lwf_penalty(logits, teacher_logits, self.strength, self.temperature, batch != PAD)


def bind(
    spec: RegularizerSpec,
    snapshot: TaskSnapshot,
    fisher: FisherDiagonal | None = None,
    si_importance: ParameterStore | None = None,
) -> list[Regularizer]:
    """Resolve a spec into the trainer's regularizer list (empty for kind ``none``)."""
    if spec.kind == "none":
        return []
    if spec.kind == "ewc":
        if fisher is None:
            raise ContractError("EWC needs a Fisher diagonal")
        if fisher.anchor_hash and snapshot.anchor_hash and fisher.anchor_hash != snapshot.anchor_hash:
            raise ContractError("Fisher diagonal was estimated at a different anchor")
        return [EWC(snapshot, fisher, spec.strength)]
    if spec.kind == "si":
        if si_importance is None:
            raise ContractError("SI needs consolidated importances")
        return [SI(snapshot.anchor, si_importance, spec.strength)]
    if snapshot.teacher is None:
        raise ContractError("LwF needs a snapshot with a teacher model")
    return [LwF(snapshot.teacher, spec.strength, spec.lwf_temperature)]
