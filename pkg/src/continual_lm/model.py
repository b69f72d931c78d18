"""Byte-level decoder-only transformer.

Pre-norm blocks, learned absolute positions, untied output head. Token ids
0..255 are raw bytes; BOS, EOS and PAD follow.
"""
from __future__ import annotations

import hashlib
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import ContractError, ParameterStore, check_finite

BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259

CHECKPOINT_VERSION = 1

# Shorter inputs are right-padded to this many positions so that every length
# runs through the same matmul kernels; prefixes then agree bit for bit.
MIN_POSITIONS = 16


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 128
    n_heads: int = 4
    context_length: int = 256
    vocab_size: int = VOCAB_SIZE
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size != VOCAB_SIZE:
            raise ContractError(f"vocab_size is fixed at {VOCAB_SIZE}")
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        if self.context_length < 2:
            raise ContractError("context_length must be >= 2")
        if self.n_layers < 1:
            raise ContractError("n_layers must be >= 1")


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc = nn.Linear(d, 4 * d)
        self.out = nn.Linear(4 * d, d)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).split(D, dim=-1)
        q = q.view(B, T, h, D // h).transpose(1, 2)
        k = k.view(B, T, h, D // h).transpose(1, 2)
        v = v.view(B, T, h, D // h).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(D // h)
        mask = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(mask, float("-inf"))
        att = torch.softmax(scores, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.proj(y)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.ln1(x))
        return x + self.out(F.gelu(self.fc(self.ln2(x))))


class CausalLM(nn.Module):
    def __init__(self, config: ModelConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        d = config.d_model
        self.tok_emb = nn.Embedding(config.vocab_size, d)
        self.pos_emb = nn.Embedding(config.context_length, d)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.vocab_size)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif ".ln" in name or name.startswith("ln_"):
                    p.fill_(1.0)
                else:
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
            # residual projections scaled down with depth
            for blk in self.blocks:
                for lin in (blk.proj, blk.out):
                    lin.weight.mul_(1 / math.sqrt(2 * config.n_layers))
        self.to(dtype)
        self.eval()

    @property
    def params(self) -> ParameterStore:
        return ParameterStore.from_module(self)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, T) token ids -> (B, T, vocab) logits."""
        T = tokens.shape[-1]
        if T > self.config.context_length:
            raise ContractError(
                f"sequence of {T} tokens exceeds context_length {self.config.context_length}"
            )
        width = min(max(T, MIN_POSITIONS), self.config.context_length)
        if width > T:
            pad = tokens.new_full((*tokens.shape[:-1], width - T), PAD)
            tokens = torch.cat([tokens, pad], dim=-1)
        x = self.tok_emb(tokens) + self.pos_emb(torch.arange(width))
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.ln_f(x))[..., :T, :]


def _as_ids(tokens: Sequence[int] | torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(tokens, dtype=torch.long)
    if t.numel() and (int(t.min()) < 0 or int(t.max()) >= VOCAB_SIZE):
        raise ContractError("token id out of range")
    return t


def forward_logits(model: CausalLM, tokens: Sequence[int] | torch.Tensor) -> torch.Tensor:
    """Per-position logits, shape (len(tokens), vocab_size)."""
    ids = _as_ids(tokens)
    if ids.dim() != 1 or ids.numel() == 0:
        raise ContractError("forward_logits expects a non-empty 1-D token sequence")
    return check_finite(model(ids[None])[0], "forward_logits")


def next_token_loss(model: CausalLM, batch: torch.Tensor, logits: torch.Tensor | None = None) -> torch.Tensor:
    """Mean cross-entropy in nats over non-PAD targets of a (B, T) batch."""
    batch = torch.as_tensor(batch, dtype=torch.long)
    if batch.dim() == 1:
        batch = batch[None]
    if batch.shape[1] < 2:
        raise ContractError("sequences need at least 2 tokens")
    if logits is None:
        logits = model(batch)
    targets = batch[:, 1:]
    mask = targets != PAD
    n = int(mask.sum())
    if n == 0:
        raise ContractError("batch has no non-PAD targets")
    logp = torch.log_softmax(logits[:, :-1].to(torch.float64), dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    loss = (nll * mask).sum() / n
    return check_finite(loss, "next_token_loss")


def sequence_logprob(
    model: CausalLM, context: Sequence[int], continuation: Sequence[int]
) -> torch.Tensor:
    """log p(continuation | context) as a differentiable scalar.

    ``context`` is used verbatim (callers add BOS) and must be non-empty.
    """
    ctx = _as_ids(context)
    cont = _as_ids(continuation)
    if cont.numel() == 0:
        raise ContractError("continuation must be non-empty")
    if ctx.numel() == 0:
        raise ContractError("context must be non-empty (prepend BOS)")
    seq = torch.cat([ctx, cont])
    logits = forward_logits(model, seq)
    start = ctx.numel() - 1
    logp = torch.log_softmax(logits[start:-1].to(torch.float64), dim=-1)
    return logp.gather(-1, cont.unsqueeze(-1)).sum()


@torch.no_grad()
def continuation_logprobs(
    model: CausalLM, context: Sequence[int], continuations: Sequence[Sequence[int]]
) -> list[float]:
    """Batched, non-differentiable ``sequence_logprob`` for several continuations."""
    ctx = list(context)
    if not ctx:
        raise ContractError("context must be non-empty (prepend BOS)")
    seqs = [ctx + list(c) for c in continuations]
    if any(len(c) == 0 for c in continuations):
        raise ContractError("continuation must be non-empty")
    T = max(len(s) for s in seqs)
    batch = torch.full((len(seqs), T), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        batch[i, : len(s)] = _as_ids(s)
    logp = torch.log_softmax(check_finite(model(batch), "forward_logits").to(torch.float64), dim=-1)
    out = []
    start = len(ctx) - 1
    for i, c in enumerate(continuations):
        c = torch.as_tensor(list(c), dtype=torch.long)
        rows = logp[i, start : start + c.numel()]
        out.append(float(rows.gather(-1, c.unsqueeze(-1)).sum()))
    return out


@torch.no_grad()
def generate(model: CausalLM, prompt: Sequence[int], max_new: int, mode: str = "greedy") -> list[int]:
    """Greedy continuation of ``prompt``; returns the new tokens (EOS included if hit).

    Generation also stops when the context window is full.
    """
    if mode != "greedy":
        raise ContractError(f"unsupported decoding mode {mode!r}")
    if max_new < 1:
        raise ContractError("max_new must be >= 1")
    seq = list(prompt)
    new: list[int] = []
    while len(new) < max_new and len(seq) < model.config.context_length:
        logits = forward_logits(model, seq)[-1]
        tok = int(torch.argmax(logits))  # first maximal index on ties
        new.append(tok)
        seq.append(tok)
        if tok == EOS:
            break
    return new


# --- checkpoints -----------------------------------------------------------


def params_hash(model: CausalLM) -> str:
    h = hashlib.sha256()
    h.update(repr(sorted(asdict(model.config).items())).encode())
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def atomic_save(obj, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def save_checkpoint(
    model: CausalLM,
    path: str | os.PathLike,
    step: int = 0,
    rng_state: dict | None = None,
    extra: dict | None = None,
) -> str:
    """Write model + training state atomically; returns the parameter hash."""
    digest = params_hash(model)
    atomic_save(
        {
            "format": "continual_lm.checkpoint",
            "version": CHECKPOINT_VERSION,
            "config": asdict(model.config),
            "dtype": str(model.dtype).replace("torch.", ""),
            "params": {k: v.detach().clone() for k, v in model.named_parameters()},
            "step": step,
            "rng_state": rng_state or {},
            "extra": extra or {},
            "hash": digest,
        },
        path,
    )
    return digest


def load_checkpoint(path: str | os.PathLike) -> tuple[CausalLM, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != "continual_lm.checkpoint":
        raise ValueError(f"{path} is not a checkpoint file")
    if blob["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob['version']}")
    model = CausalLM(ModelConfig(**blob["config"]), dtype=getattr(torch, blob["dtype"]))
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(blob["params"][name])
    return model, blob


def clone_model(model: CausalLM, dtype: torch.dtype | None = None) -> CausalLM:
    other = CausalLM(model.config, dtype=dtype or model.dtype)
    with torch.no_grad():
        for (_, dst), (_, src) in zip(other.named_parameters(), model.named_parameters()):
            dst.copy_(src)
    return other
