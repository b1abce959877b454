"""Run configuration, dataset resolution and the single-run / ablation drivers
shared by the command line and the acceptance suite."""

import copy
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .data import LongTailSpec, SplitSpec, dataset_stats, gen_multi, gen_single, load_csv, split_assign, write_csv
from .errors import ConfigError, DataError
from .losses import Task
from .metrics import logit_diff_analysis, split_metrics
from .model import save_checkpoint
from .train import TrainConfig, train_run

TRAIN_DEFAULTS = {k: v for k, v in TrainConfig().to_dict().items() if k not in ("task", "seed")}

DATA_DEFAULTS = {
    "source": "generator",
    "num_classes": 10,
    "n_max": 500,
    "imbalance_factor": 100.0,
    "feature_dim": 16,
    "separation": 3.0,
    "n_test_per_class": 100,
    "avg_labels": 2.5,
    "seed": None,  # None: follow the run seed
    "train": None,
    "test": None,
}

AXES = {
    "schedule": ("schedule", ["const", "cos", "sin"]),
    "metric": ("metric", ["l2", "kl"]),
    "amplitude": ("a_prime", [1.0, 2.0, 3.0]),
    "rank": ("rank_fraction", [0.1, 0.2, 0.3]),
}


def _merge(base, delta):
    out = copy.deepcopy(base)
    for k, v in delta.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    name: str = "run"
    task: str = "single"
    data: dict = field(default_factory=lambda: dict(DATA_DEFAULTS))
    split: dict = field(default_factory=lambda: {"mode": "quantile", "hi": None, "lo": None})
    train: dict = field(default_factory=lambda: dict(TRAIN_DEFAULTS))
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs/run"

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"name", "task", "data", "split", "train", "seeds", "out"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        task = Task(d.get("task", "single"))
        train = dict(TRAIN_DEFAULTS)
        train["base_loss"] = {"kind": "ce" if task is Task.SINGLE else "bce"}
        cfg = cls(
            name=str(d.get("name", "run")),
            task=task.value,
            data=_merge(DATA_DEFAULTS, d.get("data", {})),
            split=_merge({"mode": "quantile", "hi": None, "lo": None}, d.get("split", {})),
            train=_merge(train, d.get("train", {})),
            seeds=[int(s) for s in d.get("seeds", [0])],
            out=str(d.get("out", "runs/run")),
        )
        cfg.train_config(cfg.seeds[0] if cfg.seeds else 0)  # validates
        if not cfg.seeds:
            raise ConfigError("seed list is empty")
        if cfg.data["source"] not in ("generator", "csv"):
            raise ConfigError(f"unknown data source {cfg.data['source']!r}")
        return cfg

    def to_dict(self):
        full = self.train_config(self.seeds[0]).to_dict()
        train = {k: v for k, v in full.items() if k not in ("task", "seed")}
        return {
            "name": self.name,
            "task": self.task,
            "data": dict(self.data),
            "split": dict(self.split),
            "train": train,
            "seeds": list(self.seeds),
            "out": self.out,
        }

    def train_config(self, seed):
        try:
            return TrainConfig(task=self.task, seed=int(seed), **self.train)
        except TypeError as exc:
            raise ConfigError(f"bad train settings: {exc}") from exc

    def split_spec(self):
        return SplitSpec(**self.split)

    def with_train(self, **delta):
        return RunConfig(self.name, self.task, dict(self.data), dict(self.split), _merge(self.train, delta), list(self.seeds), self.out)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc


def dump_json(obj, path):
    """Deterministic JSON: sorted keys, repr floats, LF newline."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, sort_keys=True, indent=2, allow_nan=False)
        f.write("\n")


def longtail_spec(data, seed):
    s = data["seed"] if data["seed"] is not None else seed
    return LongTailSpec(
        int(data["num_classes"]),
        int(data["n_max"]),
        float(data["imbalance_factor"]),
        int(data["feature_dim"]),
        seed=int(s),
        separation=float(data["separation"]),
        n_test_per_class=int(data["n_test_per_class"]),
    )


def make_datasets(cfg, seed):
    """(train, test) from the generator spec or from CSV files."""
    task = Task(cfg.task)
    data = cfg.data
    if data["source"] == "csv":
        if not data["train"] or not data["test"]:
            raise ConfigError("csv data source needs both train and test paths")
        train = load_csv(data["train"], task)
        test = load_csv(data["test"], task, num_classes=train.num_classes)
        if test.num_classes != train.num_classes:
            raise DataError(f"test set has {test.num_classes} classes, training set {train.num_classes}")
        return train, test
    spec = longtail_spec(data, seed)
    if task is Task.SINGLE:
        return gen_single(spec)
    return gen_multi(spec, float(data["avg_labels"]))


def write_dataset(cfg, seed, out_dir):
    train, test = make_datasets(cfg, seed)
    os.makedirs(out_dir, exist_ok=True)
    write_csv(train, os.path.join(out_dir, "train.csv"))
    write_csv(test, os.path.join(out_dir, "test.csv"))
    stats = dataset_stats(train, split_assign(train.counts, cfg.split_spec()))
    stats["seed"] = int(cfg.data["seed"] if cfg.data["seed"] is not None else seed)
    dump_json(stats, os.path.join(out_dir, "stats.json"))
    return stats


def eval_report(model, test, tags, seed=None):
    rep = {"task": test.task.value, "split_tags": [t.value for t in tags], "metrics": split_metrics(model, test, tags).to_dict()}
    if any(model.decomposed_mask):
        rep["logit_diff"] = logit_diff_analysis(model, test, tags).to_dict()
    if seed is not None:
        rep["seed"] = int(seed)
    return rep


def run_one(cfg, seed, out_dir=None):
    """Train one seed; optionally write checkpoint, metrics log, config and report."""
    train, test = make_datasets(cfg, seed)
    tags = split_assign(train.counts, cfg.split_spec())
    tc = cfg.train_config(seed)
    sink = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        resolved = cfg.to_dict()
        resolved["seeds"] = [int(seed)]
        resolved["out"] = out_dir
        dump_json(resolved, os.path.join(out_dir, "config.json"))
        sink = open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8", newline="\n")

    def on_record(rec):
        if sink is not None:
            sink.write(json.dumps(rec, sort_keys=True, allow_nan=False) + "\n")
            sink.flush()

    try:
        result = train_run(tc, train, test, tags, on_record=on_record)
    finally:
        if sink is not None:
            sink.close()
    result.model.meta.update({"split_tags": [t.value for t in tags], "train_counts": [int(c) for c in train.counts]})
    report = eval_report(result.model, test, tags, seed)
    if out_dir is not None:
        save_checkpoint(result.model, os.path.join(out_dir, "checkpoint.json"))
        dump_json(report, os.path.join(out_dir, "report.json"))
    return result, report


def _summary(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return float(np.mean(vals)), std


def ablate(cfg, axis, values=None, out_dir=None):
    """Run every seed for each arm; arms differ from ``cfg`` in one setting only."""
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    key, default = AXES[axis]
    values = list(default if values is None else values)
    if not values:
        raise ConfigError("ablation needs at least one arm")
    arms = []
    for v in values:
        arm_cfg = cfg.with_train(**{key: v})
        arm_cfg.train_config(cfg.seeds[0])
        runs = []
        for seed in cfg.seeds:
            sub = None if out_dir is None else os.path.join(out_dir, f"{axis}-{v}", f"seed-{seed}")
            _, rep = run_one(arm_cfg, seed, sub)
            runs.append({"seed": int(seed), "metrics": rep["metrics"]})
        mean, std = {}, {}
        for split in ("many", "medium", "few", "all"):
            mean[split], std[split] = _summary([r["metrics"][split] for r in runs])
        arms.append({"value": v, "runs": runs, "mean": mean, "std": std})
    report = {
        "name": cfg.name,
        "axis": axis,
        "setting": key,
        "kind": arms[0]["runs"][0]["metrics"]["kind"],
        "seeds": list(cfg.seeds),
        "arms": arms,
    }
    if out_dir is not None:
        dump_json(report, os.path.join(out_dir, "ablation.json"))
    return report
