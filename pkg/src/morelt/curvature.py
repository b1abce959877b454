"""Per-class Hessian diagnostics: extreme eigenvalues, trace and imbalance
indicators, computed from matrix-free Hessian-vector products.

Everything operates on a flat parameter vector. ``ParamLoss`` adapts a
scalar-tensor loss over a list of ``Parameter`` objects to the plain
``value(theta)`` / ``grad(theta)`` interface used here.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, NumericalError
from .losses import BaseLoss, Task
from .model import ForwardMode, forward, merge
from .rng import SeededRng

MAX_ITERS = 500
REL_TOL = 1e-6
ZERO_FLOOR = 1e-12


class ParamLoss:
    """A scalar loss over a fixed set of parameters, seen as f(theta)."""

    def __init__(self, build, params):
        self.build = build
        self.params = list(params)
        self.shapes = [p.value.shape for p in self.params]
        self.size = sum(p.value.size for p in self.params)

    def flat(self):
        return np.concatenate([p.value.reshape(-1) for p in self.params])

    def _load(self, theta):
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        if theta.size != self.size:
            raise ConfigError(f"parameter vector has {theta.size} entries, expected {self.size}")
        saved = [p.value for p in self.params]
        off = 0
        for p, shape in zip(self.params, self.shapes):
            n = int(np.prod(shape))
            p.value = theta[off : off + n].reshape(shape).copy()
            off += n
        return saved

    def _restore(self, saved):
        for p, v in zip(self.params, saved):
            p.value = v

    def value(self, theta=None):
        saved = None if theta is None else self._load(theta)
        try:
            with T.no_grad():
                return self.build().item()
        finally:
            if saved is not None:
                self._restore(saved)

    def grad(self, theta=None):
        saved = None if theta is None else self._load(theta)
        try:
            for p in self.params:
                p.zero_grad()
            self.build().backward()
            return np.concatenate([p.grad.reshape(-1) for p in self.params])
        finally:
            if saved is not None:
                self._restore(saved)


class QuadraticLoss:
    """0.5 theta^T Q theta; handy for checking the estimators on a known spectrum."""

    def __init__(self, q):
        self.q = np.asarray(q, dtype=np.float64)
        self.size = self.q.shape[0]

    def value(self, theta):
        return 0.5 * float(theta @ self.q @ theta)

    def grad(self, theta):
        return 0.5 * (self.q + self.q.T) @ np.asarray(theta, dtype=np.float64)


def per_class_loss(model, dataset, y, base=None):
    """Mean base loss over the samples of class ``y`` as a ``ParamLoss``.

    For multi-label data the class members are the samples with label ``y``
    active. The model is merged first, so the parameters are the fused
    weights and biases.
    """
    if base is None:
        base = BaseLoss("ce" if dataset.task is Task.SINGLE else "bce")
    if dataset.task is Task.SINGLE:
        idx = np.flatnonzero(dataset.labels == y)
    else:
        idx = np.flatnonzero(dataset.labels[:, y] > 0)
    if idx.size == 0:
        raise DataError(f"class {y} has no samples")
    net = model if model.merged else merge(model)
    x, t = dataset.features[idx], dataset.targets[idx]
    pi = dataset.priors.for_task(dataset.task)

    def build():
        return base(forward(net, x, ForwardMode.MERGED), t, pi)

    return ParamLoss(build, net.parameters())


def _theta(loss_fn, params):
    if params is None:
        return loss_fn.flat()
    return np.asarray(params, dtype=np.float64).reshape(-1)


def hvp(loss_fn, params, v):
    """H v from central differences of the gradient at ``params``."""
    theta = _theta(loss_fn, params)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size != theta.size:
        raise ConfigError(f"direction has {v.size} entries, expected {theta.size}")
    eps = 1e-4 * (1.0 + float(np.max(np.abs(theta), initial=0.0)))
    out = (loss_fn.grad(theta + eps * v) - loss_fn.grad(theta - eps * v)) / (2.0 * eps)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite Hessian-vector product (eps={eps:.3g})", {"eps": eps})
    return out


@dataclass
class PowerResult:
    value: float
    iterations: int
    residual: float
    converged: bool


def _power(op, n, rng):
    v = rng.normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    rel = math.inf
    for it in range(1, MAX_ITERS + 1):
        w = op(v)
        new = float(v @ w)
        norm = np.linalg.norm(w)
        rel = abs(new - lam) / max(abs(new), ZERO_FLOOR)
        lam = new
        if norm < ZERO_FLOOR:
            return PowerResult(0.0, it, 0.0, True)
        v = w / norm
        if it > 1 and rel < REL_TOL:
            return PowerResult(lam, it, rel, True)
    return PowerResult(lam, MAX_ITERS, rel, False)


@dataclass
class Extremes:
    lambda_max: float
    lambda_min: float
    flags: list = field(default_factory=list)


def lambda_extremes(loss_fn, params=None, seed=0):
    """(lambda_max, lambda_min) of the Hessian by two power iterations.

    The first run finds the eigenvalue of largest magnitude. If it is
    positive it is lambda_max, and a run on (lambda_max I - H) recovers
    lambda_min; if it is negative it is lambda_min, and a run on
    (H - lambda_min I) recovers lambda_max.
    """
    theta = _theta(loss_fn, params)
    n = theta.size
    rng = SeededRng(seed)
    first = _power(lambda v: hvp(loss_fn, theta, v), n, rng.child(0))
    shift = first.value
    if shift >= 0:
        second = _power(lambda v: shift * v - hvp(loss_fn, theta, v), n, rng.child(1))
        lmax, lmin = shift, shift - second.value
    else:
        second = _power(lambda v: hvp(loss_fn, theta, v) - shift * v, n, rng.child(1))
        lmin, lmax = shift, shift + second.value
    flags = [
        {"stage": stage, "iterations": r.iterations, "residual": r.residual}
        for stage, r in (("dominant", first), ("shifted", second))
        if not r.converged
    ]
    return Extremes(lmax, min(lmin, lmax), flags)


def trace_hutchinson(loss_fn, params=None, probes=100, seed=0):
    """Mean of v^T H v over Rademacher probes."""
    if probes < 1:
        raise ConfigError(f"need at least one probe, got {probes}")
    theta = _theta(loss_fn, params)
    rng = SeededRng(seed)
    acc = 0.0
    for _ in range(probes):
        v = rng.rademacher(theta.size)
        acc += float(v @ hvp(loss_fn, theta, v))
    return acc / probes


# ---------------------------------------------------------------------------
# report

METRICS = ("lambda_min", "lambda_max", "trace", "gamma")


def _ratio(num, den):
    return math.inf if abs(den) < ZERO_FLOOR else num / abs(den)


def imbalance_indicator(values):
    """max |x| / min |x|; +inf when the smallest magnitude is below 1e-12."""
    mags = np.abs(np.asarray(values, dtype=np.float64))
    if mags.size == 0:
        raise DataError("no values to compare")
    lo, hi = float(mags.min()), float(mags.max())
    if lo < ZERO_FLOOR or not math.isfinite(hi):
        return math.inf
    return hi / lo


@dataclass
class CurvatureReport:
    per_class: dict
    imbalance: dict
    class0: dict
    convergence_flags: list

    def to_dict(self):
        def enc(x):
            return "inf" if isinstance(x, float) and math.isinf(x) else x

        return {
            "per_class": {k: [enc(v) for v in vals] for k, vals in self.per_class.items()},
            "imbalance": {k: enc(v) for k, v in self.imbalance.items()},
            "class0": {k: enc(v) for k, v in self.class0.items()},
            "convergence_flags": self.convergence_flags,
        }


def curvature_report(model, dataset, base=None, probes=100, seed=0):
    """Per-class curvature of the merged model plus imbalance indicators.

    gamma is lambda_max / |lambda_min|. Class 0 of the report is the class
    with the fewest training samples (lowest index on ties).
    """
    counts = dataset.counts
    if counts.min() <= 0:
        raise DataError(f"class {int(np.argmin(counts))} has no samples")
    net = model if model.merged else merge(model)
    per = {k: [] for k in METRICS}
    flags = []
    # every class replays the same start vectors and probes (common random
    # numbers): identical landscapes give identical rows, and class-to-class
    # differences are not masked by probe noise
    root = SeededRng(seed)
    lam_seed, probe_seed = root.child(0).next_u64(), root.child(1).next_u64()
    for y in range(dataset.num_classes):
        fn = per_class_loss(net, dataset, y, base)
        theta = fn.flat()
        ext = lambda_extremes(fn, theta, seed=lam_seed)
        tr = trace_hutchinson(fn, theta, probes, seed=probe_seed)
        gamma = _ratio(ext.lambda_max, ext.lambda_min)
        per["lambda_min"].append(ext.lambda_min)
        per["lambda_max"].append(ext.lambda_max)
        per["trace"].append(tr)
        per["gamma"].append(gamma)
        flags += [{"class": y, "kind": "power_iteration", **f} for f in ext.flags]
        if math.isinf(gamma):
            flags.append({"class": y, "kind": "zero_lambda_min"})
    imb = {}
    for k in METRICS:
        imb[k] = imbalance_indicator(per[k])
        if math.isinf(imb[k]):
            flags.append({"metric": k, "kind": "infinite_imbalance"})
    c0 = int(np.argmin(counts))
    class0 = {"class": c0, "lambda_min": per["lambda_min"][c0], "gamma": per["gamma"][c0]}
    return CurvatureReport(per, imb, class0, flags)
