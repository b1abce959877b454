"""Long-tailed synthetic datasets, CSV ingestion, priors and class splits."""

import csv
import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ParseError, SchemaError
from .losses import ClassPriors, Task
from .model import round_half_up
from .rng import SeededRng


@dataclass(frozen=True)
class LongTailSpec:
    num_classes: int
    n_max: int
    imbalance_factor: float
    feature_dim: int
    seed: int = 0
    separation: float = 3.0
    n_test_per_class: int = 100

    def __post_init__(self):
        if self.num_classes < 1 or self.n_max < 1 or self.feature_dim < 1:
            raise ConfigError(f"invalid long-tail spec {self}")
        if self.imbalance_factor < 1:
            raise ConfigError(f"imbalance factor must be >= 1, got {self.imbalance_factor}")


@dataclass
class SingleLabelDataset:
    features: np.ndarray  # N x d
    labels: np.ndarray  # N, int
    num_classes: int

    @property
    def task(self):
        return Task.SINGLE

    @property
    def counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def priors(self):
        return ClassPriors.from_counts(self.counts, Task.SINGLE)

    @property
    def targets(self):
        return self.labels

    def __len__(self):
        return len(self.labels)


@dataclass
class MultiLabelDataset:
    features: np.ndarray  # N x d
    labels: np.ndarray  # N x C, {0, 1}

    @property
    def task(self):
        return Task.MULTI

    @property
    def num_classes(self):
        return self.labels.shape[1]

    @property
    def counts(self):
        return self.labels.sum(axis=0).astype(np.int64)

    @property
    def priors(self):
        return ClassPriors.from_counts(self.counts, Task.MULTI)

    @property
    def targets(self):
        return self.labels

    def __len__(self):
        return self.labels.shape[0]


# ---------------------------------------------------------------------------
# class-count profiles


def exp_class_counts(spec):
    """N_i = round(N_max * IF^(-i / (C - 1))) for i = 0 .. C-1."""
    C = spec.num_classes
    if C == 1:
        return np.array([spec.n_max], dtype=np.int64)
    counts = [round_half_up(spec.n_max * spec.imbalance_factor ** (-i / (C - 1))) for i in range(C)]
    if min(counts) < 1:
        raise ConfigError(f"profile gives a class with no samples: {counts}")
    return np.array(counts, dtype=np.int64)


def imbalance_factor(counts):
    counts = np.asarray(counts)
    if counts.size == 0:
        raise DataError("no class counts given")
    if counts.min() <= 0:
        raise DataError(f"class with zero samples in counts {counts.tolist()}")
    return float(counts.max() / counts.min())


# ---------------------------------------------------------------------------
# generators


def class_means(num_classes, dim, separation, rng):
    """Simplex vertices scaled by ``separation`` when C <= d, else random sphere points."""
    if num_classes <= dim:
        means = np.zeros((num_classes, dim))
        means[np.arange(num_classes), np.arange(num_classes)] = separation
        return means
    z = rng.normal((num_classes, dim))
    return separation * z / np.linalg.norm(z, axis=1, keepdims=True)


def _gaussian_samples(means, counts, rng):
    labels = np.repeat(np.arange(len(counts)), counts)
    noise = rng.normal((labels.size, means.shape[1]))
    return means[labels] + noise, labels


def gen_single(spec):
    """Gaussian clusters with long-tailed training counts and a balanced test set.

    Returns ``(train, test)``.
    """
    counts = exp_class_counts(spec)
    root = SeededRng(spec.seed)
    means = class_means(spec.num_classes, spec.feature_dim, spec.separation, root.child(0))
    x_tr, y_tr = _gaussian_samples(means, counts, root.child(1))
    test_counts = np.full(spec.num_classes, spec.n_test_per_class, dtype=np.int64)
    x_te, y_te = _gaussian_samples(means, test_counts, root.child(2))
    return (
        SingleLabelDataset(x_tr, y_tr, spec.num_classes),
        SingleLabelDataset(x_te, y_te, spec.num_classes),
    )


def _draw_label_sets(n, weights, avg_labels, rng):
    C = len(weights)
    labels = np.zeros((n, C), dtype=np.int64)
    for i in range(n):
        k = min(C, 1 + rng.poisson(avg_labels - 1.0))
        w = np.array(weights, dtype=np.float64)
        for _ in range(k):
            cdf = np.cumsum(w)
            j = int(np.searchsorted(cdf, rng.uniform() * cdf[-1], side="right"))
            j = min(j, C - 1)
            labels[i, j] = 1
            w[j] = 0.0
    return labels


def gen_multi(spec, avg_labels):
    """Multi-label data from summed label prototypes plus unit Gaussian noise.

    Each sample takes 1 + Poisson(avg_labels - 1) distinct labels (capped at
    C), drawn without replacement with probability proportional to the
    long-tail profile. The test set draws labels uniformly. Returns
    ``(train, test)``.
    """
    C = spec.num_classes
    if not 1 <= avg_labels <= C:
        raise ConfigError(f"avg_labels must lie in [1, {C}], got {avg_labels}")
    profile = exp_class_counts(spec)
    root = SeededRng(spec.seed)
    protos = root.child(0).normal((C, spec.feature_dim))
    protos = spec.separation * protos / np.linalg.norm(protos, axis=1, keepdims=True)
    n_train = max(1, round_half_up(profile.sum() / avg_labels))
    n_test = max(1, round_half_up(spec.n_test_per_class * C / avg_labels))

    def draw(n, weights, rng):
        y = _draw_label_sets(n, weights, avg_labels, rng.child(0))
        x = y @ protos + rng.child(1).normal((n, spec.feature_dim))
        return MultiLabelDataset(x, y)

    train = draw(n_train, profile.astype(np.float64), root.child(1))
    test = draw(n_test, np.ones(C), root.child(2))
    return train, test


# ---------------------------------------------------------------------------
# CSV


def write_csv(dataset, path):
    d = dataset.features.shape[1]
    header = [f"f{i}" for i in range(d)]
    if dataset.task is Task.SINGLE:
        header.append("label")
    else:
        header += [f"y{j}" for j in range(dataset.num_classes)]
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            row = [repr(float(v)) for v in dataset.features[i]]
            if dataset.task is Task.SINGLE:
                row.append(str(int(dataset.labels[i])))
            else:
                row += [str(int(v)) for v in dataset.labels[i]]
            w.writerow(row)


def load_csv(path, task, num_classes=None):
    task = Task(task)
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = rows[0]
    n_feat = sum(1 for h in header if h.startswith("f"))
    if header[:n_feat] != [f"f{i}" for i in range(n_feat)] or n_feat == 0:
        raise SchemaError(f"{path}: header must start with f0..f{{d-1}}, got {header[:3]}...")
    rest = header[n_feat:]
    if task is Task.SINGLE:
        if rest != ["label"]:
            raise SchemaError(f"{path}: single-label header must end with 'label', got {rest}")
    elif rest != [f"y{j}" for j in range(len(rest))] or not rest:
        raise SchemaError(f"{path}: multi-label header must end with y0..y{{C-1}}, got {rest}")
    width = len(header)
    feats, labs = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise SchemaError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        try:
            fx = [float(v) for v in row[:n_feat]]
            lv = [int(v) for v in row[n_feat:]]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        if not all(math.isfinite(v) for v in fx):
            raise ParseError(f"{path}:{lineno}: non-finite feature value")
        if task is Task.MULTI:
            if any(v not in (0, 1) for v in lv):
                raise ParseError(f"{path}:{lineno}: label values must be 0 or 1")
            if sum(lv) == 0:
                raise DataError(f"{path}:{lineno}: row {lineno - 1} has no active label")
        elif lv[0] < 0:
            raise ParseError(f"{path}:{lineno}: negative class index {lv[0]}")
        feats.append(fx)
        labs.append(lv)
    if not feats:
        raise DataError(f"{path}: no data rows")
    x = np.array(feats, dtype=np.float64)
    if task is Task.SINGLE:
        y = np.array([v[0] for v in labs], dtype=np.int64)
        c = int(y.max()) + 1 if num_classes is None else int(num_classes)
        if y.max() >= c:
            raise DataError(f"{path}: label {int(y.max())} out of range for {c} classes")
        return SingleLabelDataset(x, y, c)
    return MultiLabelDataset(x, np.array(labs, dtype=np.int64))


# ---------------------------------------------------------------------------
# splits


class Split(str, enum.Enum):
    MANY = "many"
    MEDIUM = "medium"
    FEW = "few"


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "quantile"
    hi: float | None = None
    lo: float | None = None

    def __post_init__(self):
        if self.mode not in ("quantile", "absolute"):
            raise ConfigError(f"unknown split mode {self.mode!r}")
        if self.mode == "absolute":
            if self.hi is None or self.lo is None or self.hi <= self.lo:
                raise ConfigError(f"absolute split needs hi > lo, got hi={self.hi}, lo={self.lo}")


def split_assign(counts, splitspec=SplitSpec()):
    """Tag every class Many / Medium / Few from its training count."""
    counts = np.asarray(counts)
    C = counts.size
    if C == 0:
        raise DataError("no class counts given")
    if splitspec.mode == "absolute":
        return [
            Split.MANY if c >= splitspec.hi else Split.FEW if c <= splitspec.lo else Split.MEDIUM
            for c in counts
        ]
    # stable sort on -count: larger counts first, ties keep lower index first
    order = np.argsort(-counts, kind="stable")
    groups = (Split.MANY, Split.MEDIUM, Split.FEW)
    tags = [None] * C
    for pos, cls in enumerate(order):
        tags[int(cls)] = groups[(3 * pos) // C]
    return tags


def dataset_stats(train, tags=None):
    counts = train.counts
    if tags is None:
        tags = split_assign(counts)
    return {
        "task": train.task.value,
        "num_classes": int(train.num_classes),
        "num_samples": int(len(train)),
        "counts": [int(c) for c in counts],
        "priors": [float(p) for p in train.priors.for_task(train.task)],
        "imbalance_factor": imbalance_factor(counts),
        "split_tags": [t.value for t in tags],
    }
