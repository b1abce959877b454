import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morelt import tensor as T
from morelt.errors import DataError
from morelt.losses import (
    BaseLoss,
    ClassPriors,
    Metric,
    Task,
    discrepancy,
    discrepancy_from_logits,
    joint_loss,
    kl_discrepancy,
    kl_discrepancy_from_logits,
    loss_more_from_logits,
    loss_more_multi,
    loss_more_single,
    more_weights,
)
from morelt.model import ForwardMode, init_model, logits
from morelt.schedule import Schedule, alpha
from oracles import asl_loop, bce_loop, ce_loop, focal_loop, l2_disc_loop, more_multi_loop, more_single_loop


def tailed_model(dims, seed, scale=0.5):
    m = init_model(dims, 0.3, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for layer in m.layers:
        layer.b_low.value = scale * rng.standard_normal(layer.b_low.shape)
    return m


def random_multi(rng, n, C):
    y = (rng.random((n, C)) < 0.4).astype(np.int64)
    y[np.arange(n), rng.integers(0, C, n)] = 1
    return y


# --- discrepancy -----------------------------------------------------------


def test_l2_hand_case():
    d = discrepancy_from_logits(T.Tensor([[1.0, 2.0]]), T.Tensor([[0.0, 0.0]]))
    assert d.item() == 5.0


def test_zero_tail_discrepancy_is_zero():
    m = init_model([5, 7, 3], seed=1)
    x = np.random.default_rng(0).standard_normal((10, 5))
    assert not discrepancy(m, x).value.any()
    assert not kl_discrepancy(m, x).value.any()


def test_discrepancy_matches_double_forward_oracle():
    m = tailed_model([5, 8, 4], 2)
    x = np.random.default_rng(1).standard_normal((12, 5))
    full, gen = logits(m, x, ForwardMode.FULL), logits(m, x, ForwardMode.GENERAL_ONLY)
    ref = l2_disc_loop(full, gen)
    assert np.max(np.abs(discrepancy(m, x).value.ravel() - ref)) <= 1e-12


def test_kl_identical_is_zero_and_binary_closed_form():
    z = T.Tensor([[0.3, -1.2, 2.0]])
    assert kl_discrepancy_from_logits(z, z, Task.SINGLE).item() == 0.0
    got = kl_discrepancy_from_logits(T.Tensor([[math.log(2.0), 0.0]]), T.Tensor([[0.0, 0.0]]), Task.SINGLE).item()
    ref = (2 / 3) * math.log(4 / 3) + (1 / 3) * math.log(2 / 3)
    assert abs(got - ref) <= 1e-12


def test_kl_nonnegative_on_random_draws():
    rng = np.random.default_rng(0)
    for task in (Task.SINGLE, Task.MULTI):
        a, b = 3 * rng.standard_normal((1000, 4)), 3 * rng.standard_normal((1000, 4))
        v = kl_discrepancy_from_logits(T.Tensor(a), T.Tensor(b), task).value
        assert v.min() >= -1e-12


def test_kl_bernoulli_sum():
    p, q = 0.7, 0.4
    zf, zg = math.log(p / (1 - p)), math.log(q / (1 - q))
    got = kl_discrepancy_from_logits(T.Tensor([[zf, zf]]), T.Tensor([[zg, zg]]), Task.MULTI).item()
    one = p * math.log(p / q) + (1 - p) * math.log((1 - p) / (1 - q))
    assert abs(got - 2 * one) <= 1e-12


# --- rebalancing loss -------------------------------------------------------


def test_single_hand_case():
    out = loss_more_from_logits(T.Tensor([[1.0, 2.0]]), T.Tensor([[0.0, 0.0]]), [1], np.array([0.8, 0.2]), Task.SINGLE)
    assert abs(out.item() - 1.0) <= 1e-15


def test_multi_hand_case():
    full = T.Tensor([[1.0, 1.0, 0.0]])
    gen = T.Tensor([[0.0, 0.0, 0.0]])
    out = loss_more_from_logits(full, gen, np.array([[1, 0, 1]]), np.array([0.5, 0.3, 0.2]), Task.MULTI)
    assert abs(out.item() - 0.7) <= 1e-15


def test_multi_single_active_label_reduces_to_single_form():
    rng = np.random.default_rng(0)
    full, gen = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    labels = rng.integers(0, 4, 6)
    pi = rng.dirichlet(np.ones(4))
    s = loss_more_from_logits(T.Tensor(full), T.Tensor(gen), labels, pi, Task.SINGLE).item()
    m = loss_more_from_logits(T.Tensor(full), T.Tensor(gen), np.eye(4, dtype=int)[labels], pi, Task.MULTI).item()
    assert abs(s - m) <= 1e-14


def test_zero_tail_more_loss_is_exactly_zero():
    m = init_model([5, 6, 3], seed=0)
    x = np.random.default_rng(0).standard_normal((8, 5))
    pi = ClassPriors.from_counts([5, 3, 2], Task.SINGLE)
    assert loss_more_single(m, (x, np.array([0, 1, 2, 0, 1, 2, 0, 0])), pi).item() == 0.0


def test_batch_oracles_100_batches():
    rng = np.random.default_rng(11)
    for i in range(100):
        C = int(rng.integers(2, 6))
        m = tailed_model([4, 7, C], i)
        n = int(rng.integers(1, 9))
        x = rng.standard_normal((n, 4))
        full, gen = logits(m, x), logits(m, x, ForwardMode.GENERAL_ONLY)
        pi = rng.dirichlet(np.ones(C))
        labels = rng.integers(0, C, n)
        got = loss_more_single(m, (x, labels), pi).item()
        assert abs(got - more_single_loop(full, gen, labels, pi)) <= 1e-12
        y = random_multi(rng, n, C)
        got = loss_more_multi(m, (x, y), pi).item()
        assert abs(got - more_multi_loop(full, gen, y, pi)) <= 1e-12


def test_out_of_range_label():
    with pytest.raises(DataError):
        more_weights([0, 3], np.array([0.5, 0.5]), Task.SINGLE)


def test_all_zero_multi_row_rejected():
    with pytest.raises(DataError, match="sample 1"):
        more_weights(np.array([[1, 0], [0, 0]]), np.array([0.5, 0.5]), Task.MULTI)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(1.1, 5.0))
def test_weight_scales_contribution_linearly(p, factor):
    full, gen = T.Tensor([[1.0, -0.5]]), T.Tensor([[0.2, 0.1]])
    base = loss_more_from_logits(full, gen, [0], np.array([p, 1 - p]), Task.SINGLE).item()
    scaled = loss_more_from_logits(full, gen, [0], np.array([p * factor, 1 - p]), Task.SINGLE).item()
    assert math.isclose(scaled, factor * base, rel_tol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_more_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    full, gen = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    pi = rng.dirichlet(np.ones(3))
    for metric in Metric:
        v = loss_more_from_logits(T.Tensor(full), T.Tensor(gen), rng.integers(0, 3, 5), pi, Task.SINGLE, metric)
        assert v.item() >= 0.0


# --- priors -----------------------------------------------------------------


def test_priors_sum_to_one():
    for task in Task:
        pi = ClassPriors.from_counts([7, 3, 1, 1], task).for_task(task)
        assert abs(pi.sum() - 1.0) <= 1e-12 and pi.min() >= 0


# --- base losses ------------------------------------------------------------


def test_base_losses_match_loops():
    rng = np.random.default_rng(4)
    for _ in range(20):
        z = 2 * rng.standard_normal((6, 4))
        labels = rng.integers(0, 4, 6)
        pi = rng.dirichlet(np.ones(4))
        y = random_multi(rng, 6, 4)
        assert abs(BaseLoss("ce")(z, labels).item() - ce_loop(z, labels)) <= 1e-12
        assert abs(BaseLoss("la", tau=1.5)(z, labels, pi).item() - ce_loop(z, labels, pi, 1.5)) <= 1e-12
        assert abs(BaseLoss("bce")(z, y).item() - bce_loop(z, y)) <= 1e-12
        assert abs(BaseLoss("focal", gamma=2.0)(z, y).item() - focal_loop(z, y, 2.0)) <= 1e-12
        assert abs(BaseLoss("asl")(z, y).item() - asl_loop(z, y, 0.0, 4.0, 0.05)) <= 1e-12


def test_base_losses_nonnegative():
    rng = np.random.default_rng(5)
    z = 5 * rng.standard_normal((50, 3))
    y = random_multi(rng, 50, 3)
    for kind in ("ce", "la"):
        assert BaseLoss(kind).per_sample(z, rng.integers(0, 3, 50), np.array([0.6, 0.3, 0.1])).value.min() >= 0
    for kind in ("bce", "focal", "asl"):
        assert BaseLoss(kind).per_sample(z, y).value.min() >= 0


def test_la_with_uniform_priors_equals_ce():
    rng = np.random.default_rng(6)
    z = rng.standard_normal((8, 5))
    labels = rng.integers(0, 5, 8)
    pi = np.full(5, 0.2)
    assert abs(BaseLoss("la")(z, labels, pi).item() - BaseLoss("ce")(z, labels).item()) <= 1e-12


# --- schedule ---------------------------------------------------------------


def test_sin_examples():
    s = Schedule("sin", 2.0, 100)
    assert alpha(s, 0) == 0.0
    assert abs(alpha(s, 50) - 2.0) <= 1e-12
    assert abs(alpha(s, 25) - math.sqrt(2.0)) <= 1e-12
    assert abs(alpha(s, 100)) <= 1e-12


def test_cos_and_const():
    c = Schedule("cos", 3.0, 10)
    assert alpha(c, 0) == 3.0 and abs(alpha(c, 10)) <= 1e-12
    k = Schedule("const", 1.5, 10)
    assert all(alpha(k, t) == 1.5 for t in range(11))


def test_normalized_amplitude():
    assert Schedule.normalized("sin", 2.0, 10, 50).amplitude == 20.0


def test_step_beyond_horizon_is_clamped_with_warning():
    s = Schedule("cos", 1.0, 10)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        v = alpha(s, 15)
    assert v == alpha(s, 10) and rec


# --- joint loss -------------------------------------------------------------


def test_joint_equals_base_when_alpha_zero_or_tail_zero():
    rng = np.random.default_rng(0)
    x, labels = rng.standard_normal((6, 4)), rng.integers(0, 3, 6)
    pi = np.array([0.5, 0.3, 0.2])
    m = tailed_model([4, 5, 3], 1)
    total, parts = joint_loss(m, (x, labels), pi, 0.0, BaseLoss())
    assert total.item() == parts["loss_base"]
    z = init_model([4, 5, 3], 0.3, seed=2)
    total, parts = joint_loss(z, (x, labels), pi, 7.0, BaseLoss())
    assert total.item() == parts["loss_base"] and parts["loss_more"] == 0.0


def test_joint_gradients_all_losses_and_metrics():
    rng = np.random.default_rng(8)
    for kind in ("ce", "la", "bce", "focal", "asl"):
        for metric in Metric:
            m = tailed_model([3, 5, 4], int(rng.integers(1000)))
            base = BaseLoss(kind)
            x = rng.standard_normal((5, 3))
            t = rng.integers(0, 4, 5) if base.task is Task.SINGLE else random_multi(rng, 5, 4)
            pi = rng.dirichlet(np.ones(4))
            err = T.finite_diff_check(lambda: joint_loss(m, (x, t), pi, 3.0, base, metric)[0], m.parameters())
            assert err <= 1e-4, (kind, metric, err)
