import json
import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from continual_lm.continual import RegularizerSpec, SIState, TaskSnapshot, bind, estimate_fisher
from continual_lm.data import batch_stream, synth_corpus, synth_mc
from continual_lm.model import clone_model, load_checkpoint, next_token_loss, params_hash
from continual_lm.numerics import ContractError, NumericError, ParameterStore
from continual_lm.trainer import (
    OptimState,
    TrainConfig,
    adamw_step,
    lr_schedule,
    train_task,
)

from conftest import make_model


def _scalar_store(v):
    return ParameterStore([("w", torch.tensor([v], dtype=torch.float64))])


def test_lr_schedule_cases():
    cfg = TrainConfig(total_steps=1000)
    assert cfg.warmup_steps == 50
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(25, cfg) == pytest.approx(1e-4, rel=1e-15)
    assert lr_schedule(50, cfg) == 2e-4
    assert lr_schedule(1000, cfg) == 2e-4
    with pytest.raises(ContractError):
        lr_schedule(1001, cfg)


@given(st.integers(1, 400), st.floats(0, 1))
def test_lr_schedule_monotone_ramp(total, ratio):
    cfg = TrainConfig(total_steps=total, warmup_ratio=ratio)
    lrs = [lr_schedule(s, cfg) for s in range(total + 1)]
    assert all(a <= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == cfg.learning_rate


def test_train_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(warmup_ratio=1.5)
    with pytest.raises(ContractError):
        TrainConfig(total_steps=0)


def test_adamw_first_step_moves_by_lr():
    params = _scalar_store(1.0)
    cfg = TrainConfig(weight_decay=0.0)
    adamw_step(params, {"w": torch.tensor([1.0], dtype=torch.float64)}, OptimState.zeros(params), 0.1, cfg)
    assert params["w"].item() == pytest.approx(0.9, abs=1e-6)


def test_adamw_zero_gradient_fixed_point():
    params = _scalar_store(0.7)
    state = OptimState.zeros(params)
    cfg = TrainConfig(weight_decay=0.0)
    for _ in range(5):
        adamw_step(params, {"w": torch.zeros(1, dtype=torch.float64)}, state, 0.1, cfg)
    assert params["w"].item() == 0.7


def test_adamw_decoupled_decay_is_geometric():
    params = ParameterStore([("fc.weight", torch.ones(2, 2, dtype=torch.float64))])
    state = OptimState.zeros(params)
    cfg = TrainConfig(weight_decay=0.1)
    for _ in range(4):
        adamw_step(params, {"fc.weight": torch.zeros(2, 2, dtype=torch.float64)}, state, 0.5, cfg)
    assert torch.allclose(params["fc.weight"], torch.full((2, 2), 0.95**4, dtype=torch.float64), rtol=1e-14)


def test_adamw_against_hand_recurrence():
    params = _scalar_store(0.0)
    state = OptimState.zeros(params)
    cfg = TrainConfig(weight_decay=0.0)
    theta, m, v = 0.0, 0.0, 0.0
    for t, g in enumerate([0.5, -1.0, 2.0], start=1):
        adamw_step(params, {"w": torch.tensor([g], dtype=torch.float64)}, state, 0.01, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert params["w"].item() == pytest.approx(theta, rel=1e-12)


def test_adamw_non_finite_gradient_aborts():
    params = _scalar_store(1.0)
    with pytest.raises(NumericError, match="step 1"):
        adamw_step(params, {"w": torch.tensor([math.nan], dtype=torch.float64)}, OptimState.zeros(params), 0.1, TrainConfig())
    assert params["w"].item() == 1.0


CORPUS = synth_corpus("A", 40, seed=0)


def _cfg(**kw):
    base = dict(learning_rate=3e-3, total_steps=10, batch_size=2, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_ten_steps_log_ten_losses(tmp_path):
    model = make_model()
    result = train_task(model, CORPUS, _cfg(), log_path=tmp_path / "log.jsonl")
    assert [r["step"] for r in result.log] == list(range(1, 11))
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["task_loss"] for r in lines] == [r["task_loss"] for r in result.log]


def test_logged_loss_precedes_update():
    model = make_model()
    first = next(batch_stream(CORPUS, model.config.context_length, 2, seed=1))
    before = next_token_loss(model, first).item()
    result = train_task(model, CORPUS, _cfg(total_steps=1))
    assert result.log[0]["task_loss"] == before
    assert next_token_loss(model, first).item() != before


def test_training_reduces_loss():
    model = make_model()
    result = train_task(model, CORPUS, _cfg(total_steps=60))
    early = sum(r["task_loss"] for r in result.log[:5])
    late = sum(r["task_loss"] for r in result.log[-5:])
    assert late < early


def test_training_is_deterministic(tmp_path):
    a = train_task(make_model(), CORPUS, _cfg(), checkpoint_path=tmp_path / "a.ckpt")
    b = train_task(make_model(), CORPUS, _cfg(), checkpoint_path=tmp_path / "b.ckpt")
    assert a.checkpoint_hash == b.checkpoint_hash
    _, blob_a = load_checkpoint(tmp_path / "a.ckpt")
    _, blob_b = load_checkpoint(tmp_path / "b.ckpt")
    for name, v in blob_a["params"].items():
        assert torch.equal(v, blob_b["params"][name])
    for name, v in blob_a["extra"]["optim"]["exp_avg_sq"].items():
        assert torch.equal(v, blob_b["extra"]["optim"]["exp_avg_sq"][name])


def test_zero_strength_matches_unregularized():
    anchor = make_model(seed=3)
    snap = TaskSnapshot.take(anchor, keep_teacher=True)
    plain = train_task(make_model(), CORPUS, _cfg())
    regs = bind(RegularizerSpec("lwf", 0.0), snap)
    zero = train_task(make_model(), CORPUS, _cfg(), regs)
    assert params_hash(plain.model) == params_hash(zero.model)
    assert all("penalty.lwf" in r for r in zero.log)


def test_huge_ewc_strength_keeps_anchor():
    model = make_model(context_length=96)
    items = synth_mc("A", 4, seed=0, max_tokens=96)
    fisher = estimate_fisher(model, items)
    snap = TaskSnapshot.take(model)
    regs = bind(RegularizerSpec("ewc", 1e12), snap, fisher)
    # Adam steps are about lr in size whatever the gradient scale, so a stiff
    # penalty leaves a jitter of order lr around the anchor
    cfg = _cfg(learning_rate=2e-4, warmup_ratio=0.0, total_steps=30)
    loose = train_task(clone_model(model), synth_corpus("B", 40, 0), cfg, ())
    tight = train_task(model, synth_corpus("B", 40, 0), cfg, regs)

    def moved(m, only_fisher):
        out = 0.0
        for n, p in m.params.items():
            d = (p.detach() - snap.anchor[n]).abs()
            if only_fisher:
                d = d[fisher.values[n] > 1e-12]
            out = max(out, float(d.max()) if d.numel() else 0.0)
        return out

    assert moved(loose.model, True) > 1e-3
    assert moved(tight.model, True) < 1e-3


def test_si_hook_accumulates():
    model = make_model()
    state = SIState.begin(model.params)
    train_task(model, CORPUS, _cfg(total_steps=5), si_state=state)
    total = sum(float(v.sum()) for v in state.numerator.values())
    # descent steps mostly lower the loss, so the path integral is positive
    assert total > 0


def test_resume_matches_uninterrupted(tmp_path):
    cfg = _cfg(total_steps=12, checkpoint_every=5)
    full = train_task(make_model(), CORPUS, cfg, checkpoint_path=tmp_path / "full.ckpt")
    part_cfg = _cfg(total_steps=5)
    train_task(make_model(), CORPUS, part_cfg, checkpoint_path=tmp_path / "part.ckpt")
    resumed = train_task(make_model(), CORPUS, cfg, checkpoint_path=tmp_path / "part.ckpt", resume=True)
    assert resumed.checkpoint_hash == full.checkpoint_hash
    assert [r["step"] for r in resumed.log] == list(range(6, 13))


def test_checkpoint_failure_reports_step(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(Exception, match="step"):
        train_task(make_model(), CORPUS, _cfg(total_steps=2), checkpoint_path=blocker / "m.ckpt")
