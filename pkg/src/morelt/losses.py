"""Base losses, logit discrepancies and the prior-weighted rebalancing loss.

All per-sample quantities are (batch x 1) tensors; batch losses are means.
Targets are integer class indices for single-label tasks and {0, 1}
indicator matrices for multi-label tasks.
"""

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .model import ForwardMode, forward

PROB_FLOOR = 1e-12


class Task(str, enum.Enum):
    SINGLE = "single"
    MULTI = "multi"


class LossKind(str, enum.Enum):
    CE = "ce"
    LA = "la"
    BCE = "bce"
    FOCAL = "focal"
    ASL = "asl"


_TASK_OF = {
    LossKind.CE: Task.SINGLE,
    LossKind.LA: Task.SINGLE,
    LossKind.BCE: Task.MULTI,
    LossKind.FOCAL: Task.MULTI,
    LossKind.ASL: Task.MULTI,
}


@dataclass(frozen=True)
class ClassPriors:
    """Empirical priors: ``single`` is N_y / N, ``multi`` is N'_j / N'."""

    single: np.ndarray | None = None
    multi: np.ndarray | None = None

    @classmethod
    def from_counts(cls, counts, task):
        counts = np.asarray(counts, dtype=np.float64)
        pi = counts / counts.sum()
        return cls(single=pi) if Task(task) is Task.SINGLE else cls(multi=pi)

    def for_task(self, task):
        pi = self.single if Task(task) is Task.SINGLE else self.multi
        if pi is None:
            raise ConfigError(f"no {Task(task).value}-label priors available")
        return pi


def one_hot(labels, num_classes):
    labels = np.asarray(labels).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise DataError(f"label {bad} out of range for {num_classes} classes")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels.astype(np.int64)] = 1.0
    return out


def _check_multi_targets(y):
    y = np.asarray(y, dtype=np.float64)
    empty = np.flatnonzero(y.sum(axis=1) == 0)
    if empty.size:
        raise DataError(f"sample {int(empty[0])} has no active label")
    return y


@dataclass(frozen=True)
class BaseLoss:
    """The task loss L_base. Hyperparameters only matter for their own kind."""

    kind: LossKind = LossKind.CE
    tau: float = 1.0
    gamma: float = 2.0
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    clip: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))

    @property
    def task(self):
        return _TASK_OF[self.kind]

    def per_sample(self, logits, targets, priors=None):
        logits = T.tensor(logits)
        C = logits.shape[1]
        if self.kind in (LossKind.CE, LossKind.LA):
            z = logits
            if self.kind is LossKind.LA:
                if priors is None:
                    raise ConfigError("logit-adjusted CE needs class priors")
                shift = self.tau * np.log(np.asarray(priors, dtype=np.float64)).reshape(1, C)
                z = T.add_row(logits, shift)
            y = one_hot(targets, C)
            return -T.sum_rows(T.mul(T.log_softmax(z), T.Tensor(y)))

        y = _check_multi_targets(targets)
        if y.shape != logits.shape:
            raise DataError(f"targets {y.shape} do not match logits {logits.shape}")
        yt, nyt = T.Tensor(y), T.Tensor(1.0 - y)
        log_p = -T.softplus(-logits)  # log sigmoid(z)
        log_q = -T.softplus(logits)  # log (1 - sigmoid(z))
        if self.kind is LossKind.BCE:
            elem = -(yt * log_p + nyt * log_q)
        elif self.kind is LossKind.FOCAL:
            p = T.sigmoid(logits)
            p_t = yt * p + nyt * (1.0 - p)
            elem = -(T.power(1.0 - p_t, self.gamma) * (yt * log_p + nyt * log_q))
        else:
            p = T.sigmoid(logits)
            pos = T.power(1.0 - p, self.gamma_pos) * log_p
            if self.clip > 0:
                p_m = T.clip_min(p - self.clip, 0.0)
                neg = T.power(p_m, self.gamma_neg) * T.log(T.clip_min(1.0 - p_m, 1e-8))
            else:
                neg = T.power(p, self.gamma_neg) * log_q
            elem = -(yt * pos + nyt * neg)
        return T.scale(T.sum_rows(elem), 1.0 / C)

    def __call__(self, logits, targets, priors=None):
        return T.mean(self.per_sample(logits, targets, priors))


# ---------------------------------------------------------------------------
# discrepancy between the full and the general-only model


class Metric(str, enum.Enum):
    L2 = "l2"
    KL = "kl"


def l2_discrepancy_from_logits(full, general):
    """Squared l2 distance per sample: ||f_full - f_general||^2."""
    d = T.sub(full, general)
    return T.sum_rows(T.square(d))


def _safe_log(p):
    return T.log(T.clip_min(p, PROB_FLOOR))


def kl_discrepancy_from_logits(full, general, task):
    """KL(p_full || p_general) per sample.

    Softmax distributions for single-label tasks, a sum of per-class
    Bernoulli KLs for multi-label tasks.
    """
    if Task(task) is Task.SINGLE:
        p, q = T.softmax(full), T.softmax(general)
        return T.sum_rows(p * (_safe_log(p) - _safe_log(q)))
    p, q = T.sigmoid(full), T.sigmoid(general)
    pc, qc = 1.0 - p, 1.0 - q
    elem = p * (_safe_log(p) - _safe_log(q)) + pc * (_safe_log(pc) - _safe_log(qc))
    return T.sum_rows(elem)


def discrepancy_from_logits(full, general, metric=Metric.L2, task=Task.SINGLE):
    if Metric(metric) is Metric.L2:
        return l2_discrepancy_from_logits(full, general)
    return kl_discrepancy_from_logits(full, general, task)


def discrepancy(model, x):
    return l2_discrepancy_from_logits(forward(model, x, ForwardMode.FULL), forward(model, x, ForwardMode.GENERAL_ONLY))


def kl_discrepancy(model, x, task=Task.SINGLE):
    return kl_discrepancy_from_logits(
        forward(model, x, ForwardMode.FULL), forward(model, x, ForwardMode.GENERAL_ONLY), task
    )


# ---------------------------------------------------------------------------
# rebalancing loss


def more_weights(targets, priors, task):
    """Per-sample weight on the discrepancy, as a (batch x 1) array.

    Single-label: pi_y. Multi-label: sum_j y_j pi'_j / sum_j y_j.
    """
    priors = np.asarray(priors, dtype=np.float64)
    if Task(task) is Task.SINGLE:
        labels = np.asarray(targets).reshape(-1)
        if labels.size and (labels.min() < 0 or labels.max() >= priors.size):
            raise DataError(f"label out of range for {priors.size} classes")
        return priors[labels.astype(np.int64)].reshape(-1, 1)
    y = _check_multi_targets(targets)
    return ((y @ priors) / y.sum(axis=1)).reshape(-1, 1)


def loss_more_from_logits(full, general, targets, priors, task, metric=Metric.L2):
    m = discrepancy_from_logits(full, general, metric, task)
    w = more_weights(targets, priors, task)
    return T.mean(T.mul(T.Tensor(w), m))


def loss_more_single(model, batch, priors, metric=Metric.L2):
    x, labels = batch
    pi = priors.for_task(Task.SINGLE) if isinstance(priors, ClassPriors) else priors
    full = forward(model, x, ForwardMode.FULL)
    general = forward(model, x, ForwardMode.GENERAL_ONLY)
    return loss_more_from_logits(full, general, labels, pi, Task.SINGLE, metric)


def loss_more_multi(model, batch, priors, metric=Metric.L2):
    x, y = batch
    pi = priors.for_task(Task.MULTI) if isinstance(priors, ClassPriors) else priors
    full = forward(model, x, ForwardMode.FULL)
    general = forward(model, x, ForwardMode.GENERAL_ONLY)
    return loss_more_from_logits(full, general, y, pi, Task.MULTI, metric)


def joint_loss(model, batch, priors, alpha_value, base, metric=Metric.L2):
    """L_base(full forward) + alpha * L_MORE.

    Returns ``(total, components)`` where components holds plain floats
    for logging.
    """
    x, targets = batch
    task = base.task
    pi = priors.for_task(task) if isinstance(priors, ClassPriors) else np.asarray(priors)
    full = forward(model, x, ForwardMode.FULL)
    loss_base = base(full, targets, pi)
    if model.tail_parameters():
        general = forward(model, x, ForwardMode.GENERAL_ONLY)
        loss_more = loss_more_from_logits(full, general, targets, pi, task, metric)
    else:
        loss_more = T.Tensor(np.zeros((1, 1)))
    total = loss_base + T.scale(loss_more, alpha_value) if alpha_value else loss_base
    return total, {"loss_base": loss_base.item(), "loss_more": loss_more.item(), "alpha": float(alpha_value)}
