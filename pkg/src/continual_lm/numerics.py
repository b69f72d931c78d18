"""Array arithmetic, reverse-mode gradients and finite-difference checks.

Tensors are ``torch.Tensor`` objects and the autograd tape is torch's; this
module pins down the contracts the rest of the package relies on: named,
stably-ordered parameter collections, finiteness checks that name the failing
operation, scalar-root gradients and a central-difference gradient oracle.
"""
from __future__ import annotations

import math
import os
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np
import torch

THREADS_ENV = "CONTINUAL_LM_THREADS"

# Parameter counts up to this size are checked coordinate-by-coordinate.
FD_FULL_LIMIT = 5000
FD_SAMPLE_SIZE = 2000


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class NumericError(ArithmeticError):
    """A non-finite value appeared in a computation."""


def configure_threads(n: int | None = None) -> int:
    """Pin torch's intra-op thread count (``CONTINUAL_LM_THREADS`` if unset)."""
    if n is None:
        n = int(os.environ.get(THREADS_ENV, "1"))
    if n < 1:
        raise ContractError(f"thread count must be >= 1, got {n}")
    torch.set_num_threads(n)
    return n


def check_finite(value: torch.Tensor, op: str) -> torch.Tensor:
    if not bool(torch.isfinite(value).all()):
        raise NumericError(f"non-finite value produced by {op}")
    return value


class ParameterStore(Mapping[str, torch.Tensor]):
    """Ordered name -> tensor map.

    The store holds references, not copies: building one from a module lets
    the optimizer and the regularizers update the live model in place.
    """

    def __init__(self, items: Iterable[tuple[str, torch.Tensor]] = ()):
        self._params: OrderedDict[str, torch.Tensor] = OrderedDict()
        for name, value in items:
            if name in self._params:
                raise ContractError(f"duplicate parameter name {name!r}")
            self._params[name] = value

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParameterStore":
        return cls(module.named_parameters())

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    @property
    def numel(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._params.items()}

    def detached_copy(self, dtype: torch.dtype | None = None) -> "ParameterStore":
        return ParameterStore(
            (k, v.detach().clone().to(dtype or v.dtype)) for k, v in self._params.items()
        )

    def zeros_like(self, dtype: torch.dtype | None = None) -> "ParameterStore":
        return ParameterStore(
            (k, torch.zeros_like(v, dtype=dtype or v.dtype)) for k, v in self._params.items()
        )

    def flatten(self) -> torch.Tensor:
        if not self._params:
            return torch.zeros(0, dtype=torch.float64)
        return torch.cat([v.detach().reshape(-1).to(torch.float64) for v in self._params.values()])

    def assert_aligned(self, other: Mapping[str, torch.Tensor], what: str = "stores") -> None:
        if list(self.keys()) != list(other.keys()) and set(self.keys()) != set(other.keys()):
            raise ContractError(f"misaligned {what}: parameter names differ")
        for k, v in self._params.items():
            if tuple(other[k].shape) != tuple(v.shape):
                raise ContractError(
                    f"misaligned {what}: {k} has shape {tuple(other[k].shape)}, "
                    f"expected {tuple(v.shape)}"
                )


def forward(root: torch.Tensor, op: str = "forward") -> torch.Tensor:
    """Return the value held at ``root`` after checking it is finite."""
    return check_finite(root.detach(), op)


def backward(root: torch.Tensor, params: ParameterStore) -> OrderedDict[str, torch.Tensor]:
    """Reverse-mode gradient of a scalar ``root`` w.r.t. every parameter.

    Parameters the root does not depend on get an all-zero gradient.
    """
    if root.numel() != 1:
        raise ContractError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    check_finite(root.detach(), "backward root")
    names = list(params.keys())
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(root.reshape(()), tensors, allow_unused=True)
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    for name, t, g in zip(names, tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        out[name] = check_finite(g, f"gradient of {name}")
    return out


def _coordinates(params: ParameterStore, seed: int) -> list[tuple[str, int]]:
    coords = [(name, i) for name, p in params.items() for i in range(p.numel())]
    if len(coords) <= FD_FULL_LIMIT:
        return coords
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(coords), size=FD_SAMPLE_SIZE, replace=False)
    return [coords[i] for i in sorted(picked)]


def finite_diff_check(
    loss_fn: Callable[[], torch.Tensor],
    params: ParameterStore,
    step: float = 1e-4,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` is re-evaluated with single coordinates of ``params`` perturbed
    in place by +-``step``; the relative error of a coordinate is
    ``|analytic - numeric| / max(|analytic|, 1e-8)``.
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    coords = _coordinates(params, seed)
    if not coords:
        return 0.0
    grads = backward(loss_fn(), params)
    worst = 0.0
    with torch.no_grad():
        for name, i in coords:
            flat = params[name].view(-1)
            orig = flat[i].item()
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            analytic = grads[name].reshape(-1)[i].item()
            err = abs(analytic - numeric) / max(abs(analytic), 1e-8)
            if math.isnan(err):
                raise NumericError(f"finite-difference check produced NaN at {name}[{i}]")
            worst = max(worst, err)
    return worst
