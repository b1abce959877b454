"""Joint training of theta_g and theta_t with SGD + momentum."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import split_assign
from .errors import ConfigError, NumericalError
from .losses import BaseLoss, Metric, Task, joint_loss, loss_more_from_logits
from .metrics import split_metrics
from .model import ForwardMode, forward, init_model
from .rng import SeededRng
from .schedule import Schedule, ScheduleKind, alpha


@dataclass
class TrainConfig:
    task: Task = Task.SINGLE
    base_loss: BaseLoss = field(default_factory=BaseLoss)
    schedule: ScheduleKind = ScheduleKind.SIN
    a_prime: float = 2.0
    metric: Metric = Metric.L2
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 2e-4
    batch_size: int = 64
    total_steps: int = 3000
    seed: int = 0
    cosine_lr: bool = True
    hidden: tuple = (32, 32)
    rank_fraction: float = 0.1
    decompose: bool = True
    log_interval: int = 100

    def __post_init__(self):
        self.task = Task(self.task)
        if isinstance(self.base_loss, dict):
            self.base_loss = BaseLoss(**self.base_loss)
        elif isinstance(self.base_loss, str):
            self.base_loss = BaseLoss(self.base_loss)
        self.schedule = ScheduleKind(self.schedule)
        self.metric = Metric(self.metric)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.base_loss.task is not self.task:
            raise ConfigError(f"base loss {self.base_loss.kind.value!r} does not fit a {self.task.value}-label task")
        if self.batch_size < 1 or self.total_steps < 0 or self.lr < 0:
            raise ConfigError("batch_size must be >= 1, total_steps and lr >= 0")
        if self.log_interval < 1:
            raise ConfigError("log_interval must be >= 1")

    def make_schedule(self, num_classes):
        return Schedule.normalized(self.schedule, self.a_prime, num_classes, max(1, self.total_steps))

    def to_dict(self):
        d = asdict(self)
        d["task"] = self.task.value
        d["schedule"] = self.schedule.value
        d["metric"] = self.metric.value
        d["hidden"] = list(self.hidden)
        d["base_loss"]["kind"] = self.base_loss.kind.value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class SGD:
    """SGD with momentum and coupled weight decay (PyTorch convention)."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for p, v in zip(self.params, self.velocity):
            g = p.grad + self.weight_decay * p.value if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.value -= lr * v


def cosine_lr(base_lr, step, total_steps):
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class TrainState:
    model: object
    optimizer: SGD
    schedule: Schedule
    priors: np.ndarray
    config: TrainConfig
    step: int = 0

    def current_lr(self):
        if self.config.cosine_lr and self.config.total_steps > 0:
            return cosine_lr(self.config.lr, self.step, self.config.total_steps)
        return self.config.lr


def make_state(config, train):
    dims = [train.features.shape[1], *config.hidden, train.num_classes]
    n_layers = len(dims) - 1
    model = init_model(dims, config.rank_fraction, seed=config.seed, decomposed_mask=[config.decompose] * n_layers)
    model.meta = {"task": config.task.value, "seed": config.seed}
    opt = SGD(model.parameters(), config.lr, config.momentum, config.weight_decay)
    pi = train.priors.for_task(config.task)
    return TrainState(model, opt, config.make_schedule(train.num_classes), pi, config)


def train_step(state, batch):
    """One joint update; alpha and the learning rate use the current step count."""
    cfg = state.config
    a = alpha(state.schedule, state.step)
    state.optimizer.zero_grad()
    total, parts = joint_loss(state.model, batch, state.priors, a, cfg.base_loss, cfg.metric)
    if not math.isfinite(total.item()):
        raise NumericalError(
            f"non-finite loss at step {state.step}",
            {"step": state.step, **parts, "loss_total": total.item()},
        )
    total.backward()
    lr = state.current_lr()
    state.optimizer.step(lr)
    state.step += 1
    parts["lr"] = lr
    return state


def empirical_losses(model, dataset, priors, base, metric):
    """Base loss and rebalancing loss over a whole dataset, no gradients."""
    with T.no_grad():
        full = forward(model, dataset.features, ForwardMode.FULL)
        lb = base(full, dataset.targets, priors).item()
        if model.tail_parameters():
            gen = forward(model, dataset.features, ForwardMode.GENERAL_ONLY)
            lm = loss_more_from_logits(full, gen, dataset.targets, priors, base.task, metric).item()
        else:
            lm = 0.0
    return lb, lm


@dataclass
class TrainResult:
    model: object
    log: list
    config: TrainConfig


def _batches(n, batch_size, rng):
    """Endless stream of index batches; reshuffles every epoch, drops the ragged tail."""
    bs = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            yield perm[start : start + bs]


def train_run(config, train, test=None, tags=None, on_record=None):
    """Run ``config.total_steps`` joint updates.

    A record ``{step, alpha, loss_base, loss_more, lr, split_metrics}`` is
    logged at step 0, every ``log_interval`` steps and at the end; losses are
    empirical values over the full training set.
    """
    if len(train) == 0:
        raise ConfigError("training set is empty")
    if train.task is not config.task:
        raise ConfigError(f"config task {config.task.value} does not match dataset task {train.task.value}")
    state = make_state(config, train)
    if tags is None:
        tags = split_assign(train.counts)
    records = []

    def record():
        lb, lm = empirical_losses(state.model, train, state.priors, config.base_loss, config.metric)
        rec = {
            "step": state.step,
            "alpha": alpha(state.schedule, min(state.step, state.schedule.total_steps)),
            "loss_base": lb,
            "loss_more": lm,
            "lr": state.current_lr(),
            "split_metrics": None if test is None else split_metrics(state.model, test, tags).to_dict(),
        }
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    record()
    stream = _batches(len(train), config.batch_size, SeededRng(config.seed).child(1001))
    T_ = config.total_steps
    while state.step < T_:
        idx = next(stream)
        train_step(state, (train.features[idx], train.targets[idx]))
        if state.step % config.log_interval == 0 or state.step == T_:
            record()
    return TrainResult(state.model, records, config)

