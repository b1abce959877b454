"""Split-wise top-1 accuracy, average precision / mAP, logit-difference
analysis and empirical-risk trajectory comparison."""

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .data import Split
from .errors import DataError, ShapeError
from .model import ForwardMode, logits

log = logging.getLogger(__name__)

SPLITS = (Split.MANY, Split.MEDIUM, Split.FEW)


@dataclass
class SplitReport:
    """Percentages per split; a split with no classes reports None."""

    kind: str
    many: float | None
    medium: float | None
    few: float | None
    all: float | None

    def to_dict(self):
        return asdict(self)

    def get(self, split):
        return getattr(self, split.value if isinstance(split, Split) else split)


@dataclass
class LogitDiffReport:
    many: float | None
    medium: float | None
    few: float | None
    all: float | None

    def to_dict(self):
        return asdict(self)


def _tags(tags):
    return [Split(t) for t in tags]


def top1_per_split(scores, labels, tags):
    """Top-1 accuracy (%) over the samples whose true class is in each split."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    tags = _tags(tags)
    if scores.ndim != 2 or scores.shape[0] != labels.size or scores.shape[1] != len(tags):
        raise ShapeError(f"scores {scores.shape}, labels {labels.shape} and {len(tags)} tags disagree")
    pred = np.argmax(scores, axis=1)  # first maximum, i.e. lowest class index on ties
    correct = pred == labels
    sample_tag = np.array([tags[int(y)].value for y in labels])

    def acc(mask):
        n = int(mask.sum())
        return None if n == 0 else 100.0 * float(correct[mask].sum()) / n

    parts = {s.value: acc(sample_tag == s.value) for s in SPLITS}
    return SplitReport("top1", all=acc(np.ones(labels.size, dtype=bool)), **parts)


def average_precision(scores, binary_labels):
    """Non-interpolated AP: mean of precision@k over the ranks of positives.

    Ranking is by descending score with ties broken by lower sample index.
    Returns None when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(binary_labels).reshape(-1) > 0
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, n_pos + 1) / ranks
    return float(precision.sum() / n_pos)


def per_class_ap(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} disagree")
    aps = []
    for j in range(scores.shape[1]):
        ap = average_precision(scores[:, j], labels[:, j])
        if ap is None:
            log.warning("class %d has no positive test samples; excluded from mAP", j)
        aps.append(ap)
    return aps


def map_per_split(scores, labels, tags):
    """mAP (%) per split over classes that have at least one positive."""
    tags = _tags(tags)
    aps = per_class_ap(scores, labels)
    if len(tags) != len(aps):
        raise ShapeError(f"{len(tags)} tags for {len(aps)} classes")

    def mean_ap(keep):
        vals = [ap for ap, k in zip(aps, keep) if k and ap is not None]
        return None if not vals else 100.0 * float(np.mean(vals))

    parts = {s.value: mean_ap([t is s for t in tags]) for s in SPLITS}
    return SplitReport("map", all=mean_ap([True] * len(aps)), **parts)


def split_metrics(model, dataset, tags, mode=ForwardMode.FULL):
    scores = logits(model, dataset.features, mode)
    if dataset.task.value == "single":
        return top1_per_split(scores, dataset.labels, tags)
    return map_per_split(scores, dataset.labels, tags)


def logit_diff_analysis(model, dataset, tags):
    """Mean |f_y(full) - f_y(general)| at ground-truth labels, per split.

    Every (sample, active label) pair counts once, in the split of its label.
    """
    tags = _tags(tags)
    diff = np.abs(
        logits(model, dataset.features, ForwardMode.FULL) - logits(model, dataset.features, ForwardMode.GENERAL_ONLY)
    )
    if dataset.task.value == "single":
        rows = np.arange(len(dataset))
        cols = dataset.labels
    else:
        rows, cols = np.nonzero(dataset.labels)
    vals = diff[rows, cols]
    pair_tag = np.array([tags[int(c)].value for c in cols])

    def avg(mask):
        return None if not mask.any() else float(vals[mask].mean())

    parts = {s.value: avg(pair_tag == s.value) for s in SPLITS}
    return LogitDiffReport(all=avg(np.ones(vals.size, dtype=bool)), **parts)


def risk_trajectory_compare(log_a, log_b, min_step=0):
    """Max relative gap |base_a - base_b| / (base_b + 1e-12) over logged steps >= min_step."""
    steps_a = [r["step"] for r in log_a]
    steps_b = [r["step"] for r in log_b]
    if steps_a != steps_b:
        raise DataError("trajectories are logged on different step grids")
    gap = 0.0
    for ra, rb in zip(log_a, log_b):
        if ra["step"] < min_step:
            continue
        gap = max(gap, abs(ra["loss_base"] - rb["loss_base"]) / (rb["loss_base"] + 1e-12))
    return gap
