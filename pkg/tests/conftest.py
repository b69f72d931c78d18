import os

import pytest
import torch
from hypothesis import settings

from continual_lm.model import CausalLM, ModelConfig
from continual_lm.numerics import configure_threads

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

configure_threads()


def tiny_config(**kw):
    base = dict(n_layers=2, d_model=16, n_heads=2, context_length=32, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def make_model(dtype=torch.float64, **kw):
    return CausalLM(tiny_config(**kw), dtype=dtype)


def uniform_model(**kw):
    """Model with a zeroed output head: every position predicts uniformly."""
    m = make_model(**kw)
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.bias.zero_()
    return m


@pytest.fixture
def model():
    return make_model()


def tiny_sweep_config(root, lambdas=(0.0, 1e2, 1e12), **overrides):
    """Synthetic inputs under ``root`` and a config dict small enough for unit tests."""
    from continual_lm.experiment import make_desk_inputs

    cfg = make_desk_inputs(root, context_length=96, n_docs=30, n_heldout=3)
    cfg.update(
        model={"n_layers": 1, "d_model": 16, "n_heads": 2, "context_length": 96},
        lambdas=list(lambdas),
        train_a={"learning_rate": 3e-3, "batch_size": 2, "total_steps": 6},
        train_b={"learning_rate": 3e-3, "batch_size": 2, "total_steps": 6},
        judge_train={"learning_rate": 3e-3, "batch_size": 2, "total_steps": 4},
        eval_options={"judge_max_new": 6},
    )
    cfg.update(overrides)
    return cfg


# one verdict line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
