"""AdamW training loop with linear warmup, accumulation and regularizer hooks."""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .continual import Regularizer, SIState, si_accumulate, total_loss
from .data import Corpus, batch_stream
from .model import CausalLM, load_checkpoint, next_token_loss, save_checkpoint
from .numerics import ContractError, NumericError, ParameterStore, check_finite


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    warmup_ratio: float = 0.05
    weight_decay: float = 0.01
    batch_size: int = 2
    grad_accum_steps: int = 1
    total_steps: int = 2000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_ratio <= 1:
            raise ContractError("warmup_ratio must lie in [0, 1]")
        if self.total_steps < 1:
            raise ContractError("total_steps must be >= 1")
        if self.batch_size < 1 or self.grad_accum_steps < 1:
            raise ContractError("batch_size and grad_accum_steps must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_ratio * self.total_steps)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear ramp 0 -> learning_rate over the warmup steps, then constant."""
    if not 0 <= step <= config.total_steps:
        raise ContractError(f"step {step} outside [0, {config.total_steps}]")
    warm = config.warmup_steps
    if step >= warm:
        return config.learning_rate
    return config.learning_rate * step / warm


def decays(name: str, p: torch.Tensor) -> bool:
    # no decay on norms, biases and embedding tables
    return p.dim() >= 2 and "emb" not in name


@dataclass
class OptimState:
    exp_avg: ParameterStore
    exp_avg_sq: ParameterStore
    step: int = 0

    @classmethod
    def zeros(cls, params: ParameterStore) -> "OptimState":
        return cls(params.zeros_like(), params.zeros_like(), 0)

    def to_dict(self) -> dict:
        return {
            "exp_avg": {k: v.clone() for k, v in self.exp_avg.items()},
            "exp_avg_sq": {k: v.clone() for k, v in self.exp_avg_sq.items()},
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimState":
        return cls(
            ParameterStore(d["exp_avg"].items()), ParameterStore(d["exp_avg_sq"].items()), d["step"]
        )


@torch.no_grad()
def adamw_step(
    params: ParameterStore,
    grads: dict[str, torch.Tensor],
    state: OptimState,
    lr: float,
    config: TrainConfig,
) -> tuple[ParameterStore, OptimState]:
    """One in-place AdamW update with decoupled weight decay and bias correction."""
    params.assert_aligned(grads, "gradients")
    state.step += 1
    t = state.step
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise NumericError(f"non-finite gradient for {name} at optimizer step {t}")
    b1, b2 = config.beta1, config.beta2
    bc1 = 1 - b1**t
    bc2 = 1 - b2**t
    for name, p in params.items():
        g = grads[name].to(p.dtype)
        if config.weight_decay and decays(name, p):
            p.mul_(1 - lr * config.weight_decay)
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / bc2).sqrt_().add_(config.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return params, state


@dataclass
class TrainResult:
    model: CausalLM
    log: list[dict] = field(default_factory=list)
    checkpoint_hash: str = ""


def _state_blob(opt: OptimState, si_state: SIState | None, consumed: int, config: TrainConfig) -> dict:
    blob = {"optim": opt.to_dict(), "batches_consumed": consumed, "train_config": asdict(config)}
    if si_state is not None:
        blob["si"] = {
            "start": dict(si_state.start.items()),
            "numerator": dict(si_state.numerator.items()),
            "damping": si_state.damping,
        }
    return blob


def train_task(
    model: CausalLM,
    corpus: Corpus,
    config: TrainConfig,
    regularizers: Sequence[Regularizer] = (),
    si_state: SIState | None = None,
    log_path: str | os.PathLike | None = None,
    checkpoint_path: str | os.PathLike | None = None,
    resume: bool = False,
) -> TrainResult:
    """Train ``model`` in place on ``corpus`` for ``config.total_steps`` updates.

    Each update minimizes task cross-entropy plus every active penalty. The
    logged losses are those of the parameters before the update. When
    ``si_state`` is given, its path integral is fed with the gradient that
    drove each update and the realized parameter change.

    With ``resume=True`` and an existing checkpoint, optimizer state, data
    position and SI accumulators are restored and training continues.
    """
    params = model.params
    opt = OptimState.zeros(params)
    consumed = 0
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        saved, blob = load_checkpoint(checkpoint_path)
        with torch.no_grad():
            for (_, dst), (_, src) in zip(model.named_parameters(), saved.named_parameters()):
                dst.copy_(src)
        st = blob["extra"]
        opt = OptimState.from_dict(st["optim"])
        consumed = st["batches_consumed"]
        if si_state is not None and "si" in st:
            si_state.start = ParameterStore(st["si"]["start"].items())
            si_state.numerator = ParameterStore(st["si"]["numerator"].items())

    stream = batch_stream(corpus, model.config.context_length, config.batch_size, config.seed)
    for _ in range(consumed):
        next(stream)

    # strength-0 penalties are skipped so the trajectory matches an unregularized run
    active = [r for r in regularizers if r.strength != 0]
    kinds = sorted({r.kind for r in regularizers})
    log: list[dict] = []
    log_fh = open(log_path, "a" if resume else "w") if log_path is not None else None
    model.train()
    try:
        while opt.step < config.total_steps:
            t0 = time.perf_counter()
            lr = lr_schedule(opt.step + 1, config)
            for p in params.values():
                p.grad = None
            task_sum = 0.0
            pen_sum = {k: 0.0 for k in kinds}
            k = config.grad_accum_steps
            for _ in range(k):
                batch = next(stream)
                consumed += 1
                logits = model(batch)
                task = next_token_loss(model, batch, logits)
                penalties = []
                for reg in active:
                    pen = check_finite(reg.penalty(model, batch, logits), f"{reg.kind} penalty")
                    penalties.append(pen)
                    pen_sum[reg.kind] += pen.item()
                (total_loss(task, penalties) / k).backward()
                task_sum += task.item()
            grads = {n: p.grad for n, p in params.items()}
            before = params.detached_copy() if si_state is not None else None
            try:
                adamw_step(params, grads, opt, lr, config)
            except NumericError as exc:
                raise TrainingError(f"aborted at step {opt.step}: {exc}") from None
            if si_state is not None:
                delta = {n: params[n].detach() - before[n] for n in params}
                si_accumulate(si_state, delta, grads)
            rec = {"step": opt.step, "lr": lr, "task_loss": task_sum / k}
            for kind in kinds:
                rec[f"penalty.{kind}"] = pen_sum[kind] / k
            rec["wall_ms"] = round((time.perf_counter() - t0) * 1000, 3)
            log.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if (
                checkpoint_path is not None
                and config.checkpoint_every
                and opt.step % config.checkpoint_every == 0
                and opt.step < config.total_steps
            ):
                _write(model, checkpoint_path, opt, si_state, consumed, config)
    finally:
        if log_fh is not None:
            log_fh.close()
        for p in params.values():
            p.grad = None
        model.eval()
    digest = ""
    if checkpoint_path is not None:
        digest = _write(model, checkpoint_path, opt, si_state, consumed, config)
    return TrainResult(model, log, digest)


def _write(model, path, opt, si_state, consumed, config) -> str:
    try:
        return save_checkpoint(
            model, path, step=opt.step, extra=_state_blob(opt, si_state, consumed, config)
        )
    except OSError as exc:
        raise TrainingError(f"checkpoint write failed at step {opt.step}: {exc}") from exc
