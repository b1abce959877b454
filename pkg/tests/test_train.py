import numpy as np
import pytest

from morelt.data import LongTailSpec, gen_multi, gen_single
from morelt.errors import ConfigError, NumericalError
from morelt.losses import BaseLoss
from morelt.model import init_model, to_checkpoint
from morelt.schedule import alpha
from morelt.train import SGD, TrainConfig, cosine_lr, make_state, train_run, train_step
from oracles import sgd_reference


@pytest.fixture(scope="module")
def tiny():
    return gen_single(LongTailSpec(4, 40, 10, 5, seed=3))


def batch_of(ds, n=16):
    return ds.features[:n], ds.targets[:n]


def snapshot(model):
    return [p.value.copy() for p in model.parameters()]


def test_lr_zero_leaves_parameters_bitwise(tiny):
    train, _ = tiny
    state = make_state(TrainConfig(lr=0.0, total_steps=10, hidden=(6,)), train)
    before = snapshot(state.model)
    for _ in range(3):
        train_step(state, batch_of(train))
    assert all(a.tobytes() == p.value.tobytes() for a, p in zip(before, state.model.parameters()))
    assert state.step == 3


def test_one_step_matches_reference_sgd(tiny):
    train, _ = tiny
    cfg = TrainConfig(lr=0.1, total_steps=10, hidden=(6,), schedule="const", a_prime=0.0, cosine_lr=False)
    state = make_state(cfg, train)
    # give the tail a nonzero value so every parameter has a gradient
    for layer in state.model.layers:
        layer.b_low.value = 0.3 * np.ones(layer.b_low.shape)
    before = snapshot(state.model)
    train_step(state, batch_of(train))
    grads = [p.grad.copy() for p in state.model.parameters()]
    vel = [np.zeros_like(v) for v in before]
    ref, _ = sgd_reference(before, grads, vel, 0.1, 0.9, 2e-4)
    for r, p in zip(ref, state.model.parameters()):
        assert np.max(np.abs(r - p.value)) <= 1e-12


def test_weight_decay_applies_to_tail():
    p = init_model([3, 4, 2], 0.5, seed=0).tail_parameters()[1]
    opt = SGD([p], lr=1.0, momentum=0.0, weight_decay=0.5)
    before = p.value.copy()
    opt.step()
    assert np.allclose(p.value, 0.5 * before, rtol=0, atol=1e-15)


def test_momentum_accumulates():
    p = init_model([3, 2], 0.5, seed=0).general_parameters()[0]
    opt = SGD([p], lr=0.1, momentum=0.9)
    p.grad = np.ones_like(p.value)
    start = p.value.copy()
    opt.step()
    opt.step()
    assert np.allclose(start - p.value, 0.1 * (1 + 1.9), atol=1e-14)


def test_cosine_lr_endpoints():
    assert cosine_lr(0.1, 0, 100) == 0.1
    assert abs(cosine_lr(0.1, 50, 100) - 0.05) <= 1e-15
    assert abs(cosine_lr(0.1, 100, 100)) <= 1e-15


def test_zero_steps_returns_initial_model(tiny):
    train, test = tiny
    cfg = TrainConfig(total_steps=0, hidden=(6,), seed=5)
    res = train_run(cfg, train, test)
    fresh = make_state(cfg, train).model
    assert to_checkpoint(res.model)["layers"] == to_checkpoint(fresh)["layers"]
    assert [r["step"] for r in res.log] == [0]


def test_log_records(tiny):
    train, test = tiny
    res = train_run(TrainConfig(total_steps=25, log_interval=10, hidden=(6,)), train, test)
    assert [r["step"] for r in res.log] == [0, 10, 20, 25]
    for r in res.log:
        assert set(r) == {"step", "alpha", "loss_base", "loss_more", "lr", "split_metrics"}
        assert r["loss_more"] >= 0 and r["split_metrics"]["kind"] == "top1"
    s = make_state(res.config, train).schedule
    assert res.log[1]["alpha"] == alpha(s, 10)


def test_identical_runs_are_bitwise_identical(tiny):
    train, test = tiny
    cfg = TrainConfig(total_steps=40, hidden=(6,), seed=2)
    a, b = train_run(cfg, train, test), train_run(cfg, train, test)
    assert to_checkpoint(a.model) == to_checkpoint(b.model)
    assert a.log == b.log


def test_training_reduces_loss(tiny):
    train, _ = tiny
    res = train_run(TrainConfig(total_steps=200, hidden=(8,), lr=0.05), train)
    assert res.log[-1]["loss_base"] < 0.5 * res.log[0]["loss_base"]


def test_multi_label_training_runs():
    train, test = gen_multi(LongTailSpec(5, 60, 10, 6, seed=0), 2.0)
    res = train_run(TrainConfig(task="multi", base_loss="bce", total_steps=30, hidden=(8,)), train, test)
    assert res.log[-1]["split_metrics"]["kind"] == "map"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts_with_diagnostic(tiny):
    train, _ = tiny
    state = make_state(TrainConfig(hidden=(6,), total_steps=50, lr=1e150, cosine_lr=False), train)
    with pytest.raises(NumericalError) as exc:
        for _ in range(50):
            train_step(state, batch_of(train))
    assert exc.value.diagnostic["step"] == state.step > 0
    assert "loss_base" in exc.value.diagnostic and "loss_more" in exc.value.diagnostic


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(task="multi")  # ce does not fit
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    cfg = TrainConfig(task="multi", base_loss=BaseLoss("asl"), schedule="cos", metric="kl")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_task_mismatch(tiny):
    train, _ = tiny
    with pytest.raises(ConfigError):
        train_run(TrainConfig(task="multi", base_loss="bce", total_steps=1), train)
