"""Command-line entry point: ``morelt <subcommand> ...``.

Exit codes: 0 success, 1 usage / configuration error, 2 data or I/O error,
3 numerical abort.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import experiment as X
from .curvature import curvature_report
from .data import Split, load_csv, split_assign
from .errors import ConfigError, DataError, MoreError, NumericalError
from .losses import BaseLoss, Task
from .model import ForwardMode, load_checkpoint, logits, merge, save_checkpoint
from .rng import SeededRng


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _add_data_flags(p):
    g = p.add_argument_group("data")
    g.add_argument("--task", choices=["single", "multi"])
    g.add_argument("--data", help="directory holding train.csv and test.csv")
    g.add_argument("--classes", type=int, dest="num_classes")
    g.add_argument("--if", type=float, dest="imbalance_factor")
    g.add_argument("--nmax", type=int, dest="n_max")
    g.add_argument("--dim", type=int, dest="feature_dim")
    g.add_argument("--separation", type=float)
    g.add_argument("--n-test", type=int, dest="n_test_per_class")
    g.add_argument("--avg-labels", type=float)
    g.add_argument("--data-seed", type=int)
    g.add_argument("--split-mode", choices=["quantile", "absolute"])
    g.add_argument("--split-hi", type=float)
    g.add_argument("--split-lo", type=float)


def _add_train_flags(p):
    p.add_argument("--config", help="JSON run config; flags given here override it")
    p.add_argument("--name")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, help="single seed (overrides the config seed list)")
    p.add_argument("--seeds", type=_ints, help="comma-separated seed list")
    _add_data_flags(p)
    g = p.add_argument_group("training")
    g.add_argument("--loss", choices=["ce", "la", "bce", "focal", "asl"])
    g.add_argument("--schedule", choices=["sin", "cos", "const"])
    g.add_argument("--amplitude", type=float, dest="a_prime", help="normalized amplitude A' (A = A' * C)")
    g.add_argument("--metric", choices=["l2", "kl"])
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--steps", type=int, dest="total_steps")
    g.add_argument("--hidden", type=_ints, help="comma-separated hidden widths")
    g.add_argument("--rank-fraction", type=float)
    g.add_argument("--decompose", choices=["on", "off"])
    g.add_argument("--cosine-lr", choices=["on", "off"])
    g.add_argument("--log-interval", type=int)


def build_parser():
    parser = _Parser(prog="morelt", description="Long-tailed training with a rebalanced low-rank tail branch.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="write synthetic train/test CSVs and stats JSON")
    _add_data_flags(p)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one seed and write checkpoint, metrics log and config")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="directory holding test.csv (and train.csv for split tags)")
    p.add_argument("--test", help="test CSV")
    p.add_argument("--train", help="training CSV used to derive split tags")
    p.add_argument("--out", help="report JSON path")

    p = sub.add_parser("ablate", help="compare arms that differ in one setting")
    _add_train_flags(p)
    p.add_argument("--axis", required=True, choices=sorted(X.AXES))
    p.add_argument("--values", help="comma-separated arm values for the axis")

    p = sub.add_parser("diagnose", help="per-class curvature report of the merged model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="directory holding train.csv")
    p.add_argument("--train", help="training CSV")
    p.add_argument("--loss", choices=["ce", "la", "bce", "focal", "asl"])
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report JSON path")

    p = sub.add_parser("merge-export", help="fuse the low-rank factors into the general weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------
# config resolution


def _overrides(args):
    """Config delta expressed by the flags that were actually given."""
    delta = {"data": {}, "split": {}, "train": {}}
    a = vars(args)
    for k in ("name", "out", "task"):
        if a.get(k) is not None:
            delta[k] = a[k]
    for k in ("num_classes", "imbalance_factor", "n_max", "feature_dim", "separation", "n_test_per_class", "avg_labels"):
        if a.get(k) is not None:
            delta["data"][k] = a[k]
    if a.get("data_seed") is not None:
        delta["data"]["seed"] = a["data_seed"]
    if a.get("data") is not None:
        delta["data"].update(
            source="csv", train=os.path.join(a["data"], "train.csv"), test=os.path.join(a["data"], "test.csv")
        )
    for flag, key in (("split_mode", "mode"), ("split_hi", "hi"), ("split_lo", "lo")):
        if a.get(flag) is not None:
            delta["split"][key] = a[flag]
    for k in ("schedule", "a_prime", "metric", "lr", "batch_size", "total_steps", "rank_fraction", "log_interval"):
        if a.get(k) is not None:
            delta["train"][k] = a[k]
    if a.get("hidden") is not None:
        delta["train"]["hidden"] = a["hidden"]
    if a.get("loss") is not None:
        delta["train"]["base_loss"] = {"kind": a["loss"]}
    if a.get("decompose") is not None:
        delta["train"]["decompose"] = a["decompose"] == "on"
    if a.get("cosine_lr") is not None:
        delta["train"]["cosine_lr"] = a["cosine_lr"] == "on"
    if a.get("seeds") is not None:
        delta["seeds"] = a["seeds"]
    if a.get("seed") is not None:
        delta["seeds"] = [a["seed"]]
    return delta


def resolve_config(args):
    base = X.load_config(args.config) if getattr(args, "config", None) else {}
    delta = _overrides(args)
    if "task" in delta and "base_loss" not in delta["train"] and "base_loss" not in base.get("train", {}):
        delta["train"]["base_loss"] = {"kind": "ce" if delta["task"] == "single" else "bce"}
    return X.RunConfig.from_dict(X._merge(base, delta))


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v):
    return "   -  " if v is None else f"{v:6.2f}"


def split_table(rows, kind):
    """Plain-text table: one line per (label, SplitReport dict)."""
    head = f"{'':<16} {'many':>6} {'medium':>6} {'few':>6} {'all':>6}   ({kind})"
    lines = [head]
    for label, m in rows:
        lines.append(f"{label:<16} " + " ".join(_fmt(m[s]) for s in ("many", "medium", "few", "all")))
    return "\n".join(lines)


def _write_or_print(obj, path):
    if path:
        d = os.path.dirname(path)
        if d:
            os.makedirs(d, exist_ok=True)
        X.dump_json(obj, path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    base = X.load_config(args.config) if args.config else {}
    delta = _overrides(args)
    delta.pop("out", None)
    delta["seeds"] = [args.seed]
    cfg = X.RunConfig.from_dict(X._merge(base, delta))
    if cfg.data["source"] != "generator":
        raise ConfigError("gen-data needs a generator spec, not CSV input")
    stats = X.write_dataset(cfg, args.seed, args.out)
    print(f"wrote {os.path.join(args.out, 'train.csv')} ({stats['num_samples']} rows), test.csv, stats.json")
    print(f"counts {stats['counts']}  imbalance factor {stats['imbalance_factor']:g}")
    return 0


def cmd_train(args):
    cfg = resolve_config(args)
    seed = cfg.seeds[0]
    if len(cfg.seeds) > 1:
        print(f"note: train runs one seed; using {seed} (use ablate for seed sweeps)")
    result, report = X.run_one(cfg, seed, cfg.out)
    print(split_table([(f"seed {seed}", report["metrics"])], report["metrics"]["kind"]))
    print(f"checkpoint, metrics.jsonl, config.json and report.json written to {cfg.out}")
    return 0


def _load_eval_data(args, model):
    test_path = args.test or (os.path.join(args.data, "test.csv") if args.data else None)
    if test_path is None:
        raise UsageError("eval needs --test or --data")
    task = Task(model.meta.get("task", "single"))
    test = load_csv(test_path, task, num_classes=model.dims[-1])
    if test.num_classes != model.dims[-1]:
        raise DataError(f"test set has {test.num_classes} classes, checkpoint predicts {model.dims[-1]}")
    train_path = args.train or (os.path.join(args.data, "train.csv") if args.data else None)
    if train_path and os.path.exists(train_path):
        train = load_csv(train_path, task, num_classes=model.dims[-1])
        tags = split_assign(train.counts)
    elif "split_tags" in model.meta:
        tags = [Split(t) for t in model.meta["split_tags"]]
    else:
        raise UsageError("no split tags: pass --train or use a checkpoint written by `train`")
    return test, tags


def _check_task(model, path):
    if "task" not in model.meta:
        raise DataError(f"{path}: checkpoint does not record its task kind")


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    _check_task(model, args.checkpoint)
    test_path = args.test or (os.path.join(args.data, "test.csv") if args.data else None)
    if test_path:
        _check_csv_task(test_path, model.meta["task"])
    test, tags = _load_eval_data(args, model)
    report = X.eval_report(model, test, tags, model.meta.get("seed"))
    report["checkpoint"] = {"merged": model.merged, "dims": model.dims, "rank_per_layer": model.ranks}
    print(split_table([("full" if not model.merged else "merged", report["metrics"])], report["metrics"]["kind"]))
    if "logit_diff" in report:
        ld = report["logit_diff"]
        print("mean |f_y(full) - f_y(general)|: " + "  ".join(f"{s} {ld[s]:.4g}" for s in ld if ld[s] is not None))
    _write_or_print(report, args.out)
    return 0


def _check_csv_task(path, task):
    """Reject a test file whose label layout belongs to the other task kind."""
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip().split(",")
    kind = "single" if header and header[-1] == "label" else "multi"
    if kind != task:
        raise DataError(f"{path} holds {kind}-label data but the checkpoint was trained for {task}-label")


def cmd_ablate(args):
    cfg = resolve_config(args)
    key = X.AXES[args.axis][0]
    values = None
    if args.values:
        raw = [v.strip() for v in args.values.split(",") if v.strip()]
        values = [float(v) for v in raw] if key in ("a_prime", "rank_fraction") else raw
    report = X.ablate(cfg, args.axis, values, cfg.out)
    rows = []
    for arm in report["arms"]:
        rows.append((f"{args.axis}={arm['value']}", arm["mean"]))
    print(split_table(rows, report["kind"] + ", mean over seeds " + ",".join(map(str, cfg.seeds))))
    print(f"ablation.json written to {cfg.out}")
    return 0


def cmd_diagnose(args):
    model = load_checkpoint(args.checkpoint)
    _check_task(model, args.checkpoint)
    train_path = args.train or (os.path.join(args.data, "train.csv") if args.data else None)
    if train_path is None:
        raise UsageError("diagnose needs --train or --data")
    task = Task(model.meta["task"])
    _check_csv_task(train_path, task.value)
    train = load_csv(train_path, task, num_classes=model.dims[-1])
    base = BaseLoss(args.loss) if args.loss else BaseLoss("ce" if task is Task.SINGLE else "bce")
    if base.task is not task:
        raise ConfigError(f"loss {base.kind.value} does not fit a {task.value}-label checkpoint")
    rep = curvature_report(model, train, base, probes=args.probes, seed=args.seed)
    out = rep.to_dict()
    out["seed"] = args.seed
    out["probes"] = args.probes
    out["loss"] = base.kind.value
    imb = out["imbalance"]
    print("imbalance  " + "  ".join(f"{k} {v if isinstance(v, str) else f'{v:.4g}'}" for k, v in imb.items()))
    c0 = out["class0"]
    print(f"class0 = {c0['class']}  lambda_min {c0['lambda_min']:.4g}  gamma {c0['gamma']}")
    if out["convergence_flags"]:
        print(f"{len(out['convergence_flags'])} convergence flag(s) recorded")
    _write_or_print(out, args.out)
    return 0


def cmd_merge_export(args):
    model = load_checkpoint(args.checkpoint)
    before = model.num_parameters()
    if model.merged:
        print("notice: checkpoint is already merged; writing it unchanged")
        save_checkpoint(model, args.out)
        return 0
    fused = merge(model)
    general = before - sum(p.value.size for p in model.tail_parameters())
    after = fused.num_parameters()
    if after != general:
        raise NumericalError(f"merged model has {after} parameters, expected {general}", {})
    x = SeededRng(0).normal((10, model.dims[0]))
    gap = float(np.max(np.abs(logits(model, x, ForwardMode.FULL) - logits(fused, x, ForwardMode.MERGED))))
    if gap > 1e-9:
        raise NumericalError(f"merged forward differs by {gap:.3g}", {"max_abs_diff": gap})
    save_checkpoint(fused, args.out)
    print(f"parameters before merge: {general} general + {before - general} low-rank (training only)")
    print(f"parameters after merge:  {after} (inference count unchanged)")
    print(f"max |full - merged| on 10 random inputs: {gap:.3g}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "diagnose": cmd_diagnose,
    "merge-export": cmd_merge_export,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        if exc.diagnostic:
            print("diagnostic: " + json.dumps(exc.diagnostic, sort_keys=True, default=str), file=sys.stderr)
        return 3
    except MoreError as exc:
        kind = "data error" if exc.exit_code == 2 else "error"
        print(f"{kind}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        print(f"error: invalid setting: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1


if __name__ == "__main__":
    sys.exit(main())
