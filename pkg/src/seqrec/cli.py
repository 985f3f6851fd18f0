"""Command-line interface.

Subcommands: prepare, train, evaluate, recommend, export-attention, sweep.
Options resolve in priority order: explicit flag, then --config file
(key=value lines), then --preset, then built-in defaults; the effective
configuration is echoed to stderr before work starts. Primary results go to
stdout, diagnostics to stderr. Exit codes: 0 success, 1 usage error, 2 data
error, 3 numeric failure. Delimited reports are written with a rendered
figure next to them unless --no-figures is passed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as D
from . import figures
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DegenerateRowError,
    NumericError,
    SeqrecError,
    ShapeError,
    UnknownIdError,
)
from .evaluate import ModelScorer, PopScorer, evaluate
from .model import ModelConfig, TransformerRecommender
from .trainer import (
    LOG_HEADER,
    TrainSettings,
    load_checkpoint,
    restore_model,
    save_checkpoint,
    train,
)

PRESETS = {
    "movielens": {"mask-proportion": 0.2, "max-len": 200},
    "beauty": {"mask-proportion": 0.6, "max-len": 50},
    "steam": {"mask-proportion": 0.4, "max-len": 50},
}

MODEL_DEFAULTS = {
    "hidden-dim": 64,
    "heads": 2,
    "layers": 2,
    "max-len": 50,
    "dropout": 0.1,
    "mask-proportion": 0.2,
    "attention-mode": "bidirectional",
}

TRAIN_DEFAULTS = {
    "epochs": 50,
    "batch-size": 256,
    "lr": 1e-4,
    "weight-decay": 0.01,
    "clip-norm": 5.0,
    "adam-eps": 1e-8,
    "last-item-instances": 1,
    "val-every": 1,
    "val-negatives": 100,
}

_INT_KEYS = {"hidden-dim", "heads", "layers", "max-len", "epochs", "batch-size",
             "masks-per-sequence", "last-item-instances", "val-every", "val-negatives"}
_FLOAT_KEYS = {"dropout", "mask-proportion", "lr", "weight-decay", "clip-norm", "adam-eps"}

SWEEP_AXES = {
    "mask-proportion": ("mask_proportion", float),
    "hidden-dim": ("hidden_dim", int),
    "max-len": ("max_len", int),
    "layers": ("num_layers", int),
    "heads": ("num_heads", int),
}


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, value = line.partition("=")
                values[key.strip().replace("_", "-")] = value.strip()
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    return values


class _Options:
    """Layered option lookup: flags, then config file, then preset, then defaults."""

    def __init__(self, args):
        self.args = vars(args)
        self.file_values = _read_config_file(args.config) if getattr(args, "config", None) else {}
        preset_name = self._raw("preset")
        if preset_name is not None and preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
        self.preset = PRESETS.get(preset_name, {})

    def _raw(self, key: str):
        flag = self.args.get(key.replace("-", "_"))
        if flag is not None:
            return flag
        if key in self.file_values:
            return self.file_values[key]
        return None

    def get(self, key: str, default=None):
        value = self._raw(key)
        if value is None:
            value = self.preset.get(key, default)
        if value is None:
            return None
        if key in _INT_KEYS:
            try:
                return int(value)
            except ValueError:
                raise ConfigError(f"option {key} needs an integer, got {value!r}") from None
        if key in _FLOAT_KEYS:
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"option {key} needs a number, got {value!r}") from None
        return value

    def model_config(self, num_items: int) -> ModelConfig:
        ablations = {a.strip() for a in str(self.get("ablate", "") or "").split(",") if a.strip()}
        known = {"no-pe", "no-pffn", "no-ln", "no-rc", "no-dropout"}
        unknown = ablations - known
        if unknown:
            raise ConfigError(f"unknown ablation(s) {sorted(unknown)}; choose from {sorted(known)}")
        config = ModelConfig(
            num_items=num_items,
            hidden_dim=self.get("hidden-dim", MODEL_DEFAULTS["hidden-dim"]),
            num_heads=self.get("heads", MODEL_DEFAULTS["heads"]),
            num_layers=self.get("layers", MODEL_DEFAULTS["layers"]),
            max_len=self.get("max-len", MODEL_DEFAULTS["max-len"]),
            dropout_p=self.get("dropout", MODEL_DEFAULTS["dropout"]),
            mask_proportion=self.get("mask-proportion", MODEL_DEFAULTS["mask-proportion"]),
            attention_mode=self.get("attention-mode", MODEL_DEFAULTS["attention-mode"]),
            use_positional_embedding="no-pe" not in ablations,
            use_pffn="no-pffn" not in ablations,
            use_layer_norm="no-ln" not in ablations,
            use_residual="no-rc" not in ablations,
            use_dropout="no-dropout" not in ablations,
        )
        config.validate()
        return config

    def train_settings(self, seed: int) -> TrainSettings:
        return TrainSettings(
            epochs=self.get("epochs", TRAIN_DEFAULTS["epochs"]),
            batch_size=self.get("batch-size", TRAIN_DEFAULTS["batch-size"]),
            seed=seed,
            base_lr=self.get("lr", TRAIN_DEFAULTS["lr"]),
            eps=self.get("adam-eps", TRAIN_DEFAULTS["adam-eps"]),
            weight_decay=self.get("weight-decay", TRAIN_DEFAULTS["weight-decay"]),
            clip_norm=self.get("clip-norm", TRAIN_DEFAULTS["clip-norm"]),
            last_item_instances=self.get("last-item-instances",
                                         TRAIN_DEFAULTS["last-item-instances"]),
            masks_per_instance=self.get("masks-per-sequence"),
            val_every=self.get("val-every", TRAIN_DEFAULTS["val-every"]),
            val_num_negatives=self.get("val-negatives", TRAIN_DEFAULTS["val-negatives"]),
        )


def _echo_config(label: str, pairs: dict) -> None:
    rendered = " ".join(f"{k}={v}" for k, v in pairs.items())
    print(f"[{label}] {rendered}", file=sys.stderr)


def _load_dataset(path: str):
    if not os.path.exists(path):
        raise DataError(f"dataset not found: {path}")
    return D.load_dataset(path)


# ----- subcommands -----------------------------------------------------------


def cmd_prepare(args) -> int:
    if args.format == "movielens":
        records = D.parse_movielens(args.input)
        min_item_default = 5
    else:
        cols = []
        for c in (args.user_col, args.item_col, args.time_col):
            cols.append(int(c) if isinstance(c, str) and c.lstrip("-").isdigit() else c)
        records = D.parse_csv(args.input, *cols)
        min_item_default = 0
    min_item = args.min_item if args.min_item is not None else min_item_default
    _echo_config("prepare", {
        "input": args.input, "format": args.format,
        "min-user": args.min_user, "min-item": min_item, "out": args.out,
    })
    dataset = D.build_dataset(
        records,
        min_user_interactions=args.min_user,
        min_item_interactions=min_item,
    )
    D.save_dataset(dataset, args.out)
    s = dataset.stats
    print("users\titems\tactions\tavg_length\tdensity")
    print(f"{s.num_users}\t{s.num_items}\t{s.num_actions}"
          f"\t{s.avg_length:.2f}\t{100.0 * s.density:.2f}%")
    return 0


def _write_train_outputs(result, out_dir: str, no_figures: bool) -> tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    final_path = os.path.join(out_dir, "checkpoint.bin")
    best_path = os.path.join(out_dir, "best.bin")
    save_checkpoint(result.final, final_path)
    best = result.best
    if best.epoch == best.best_epoch or not os.path.exists(best_path):
        save_checkpoint(best, best_path)
    log_path = os.path.join(out_dir, "train_log.tsv")
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(LOG_HEADER + "\n")
        for row in result.log:
            fh.write(row.as_line() + "\n")
    if not no_figures and result.log:
        figures.save_training_curves(result.log, os.path.join(out_dir, "training_curves.png"))
    return final_path, best_path


def cmd_train(args) -> int:
    opts = _Options(args)
    dataset = _load_dataset(args.data)
    config = opts.model_config(dataset.num_items)
    settings = opts.train_settings(args.seed)
    _echo_config("train", {**config.to_dict(), **{
        "epochs": settings.epochs, "batch_size": settings.batch_size,
        "lr": settings.base_lr, "weight_decay": settings.weight_decay,
        "clip_norm": settings.clip_norm, "seed": settings.seed,
        "last_item_instances": settings.last_item_instances,
        "masks_per_instance": settings.masks_per_instance,
        "val_every": settings.val_every, "val_negatives": settings.val_num_negatives,
        "data": args.data, "out": args.out, "resume": args.resume,
    }})
    resume_from = load_checkpoint(args.resume) if args.resume else None
    if resume_from is not None and resume_from.config.to_dict() != config.to_dict():
        raise ConfigError(
            "resume checkpoint config differs from the requested configuration"
        )
    split = D.leave_one_out(dataset)
    fingerprint = D.dataset_fingerprint(args.data)
    result = train(
        config, dataset, split, settings,
        resume_from=resume_from,
        dataset_fingerprint=fingerprint,
        log_fn=lambda row: print(row.as_line(), file=sys.stderr),
    )
    final_path, best_path = _write_train_outputs(result, args.out, args.no_figures)
    print(f"samples_per_s={result.samples_per_s:.1f}", file=sys.stderr)
    final_loss = result.log[-1].loss if result.log else float("nan")
    print(f"final_checkpoint={final_path}")
    print(f"best_checkpoint={best_path}")
    print(f"epochs={result.final.epoch}")
    print(f"final_loss={final_loss:.6f}")
    return 0


def _scorer_for(args, dataset):
    """Build the requested scorer plus the checkpoint it came from (if any)."""
    baseline = getattr(args, "baseline", None)
    if baseline:
        if baseline != "pop":
            raise ConfigError(f"unknown baseline {baseline!r}; only 'pop' is available")
        if args.checkpoint:
            raise ConfigError("pass either --checkpoint or --baseline, not both")
        return PopScorer(dataset), None
    if not args.checkpoint:
        raise ConfigError("need --checkpoint (or --baseline pop)")
    checkpoint = load_checkpoint(args.checkpoint)
    if checkpoint.config.num_items != dataset.num_items:
        raise ConfigError(
            f"checkpoint was trained on {checkpoint.config.num_items} items, "
            f"dataset has {dataset.num_items}"
        )
    if checkpoint.dataset_fingerprint:
        actual = D.dataset_fingerprint(args.data)
        if checkpoint.dataset_fingerprint != actual:
            raise ConfigError(
                "checkpoint fingerprint does not match this dataset; "
                "pass the dataset it was trained on"
            )
    return ModelScorer(restore_model(checkpoint)), checkpoint


def cmd_evaluate(args) -> int:
    dataset = _load_dataset(args.data)
    _echo_config("evaluate", {
        "data": args.data, "checkpoint": args.checkpoint, "baseline": args.baseline,
        "split": args.split, "num_negatives": args.num_negatives, "seed": args.seed,
        "report": args.report, "ranks": args.ranks,
    })
    scorer, _ = _scorer_for(args, dataset)
    split = D.leave_one_out(dataset)
    report = evaluate(
        scorer, split, dataset,
        seed=args.seed, split_name=args.split,
        num_negatives=args.num_negatives,
    )
    text = report.to_json()
    print(text)
    if args.report:
        with open(args.report, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text + "\n")
        if not args.no_figures:
            stem, _ = os.path.splitext(args.report)
            figures.save_metric_bars(
                report.metrics, stem + ".png",
                f"{args.split} metrics ({report.num_negatives} negatives)",
            )
    if args.ranks:
        report.write_ranks_tsv(args.ranks)
    return 0


def cmd_recommend(args) -> int:
    dataset = _load_dataset(args.data)
    checkpoint = load_checkpoint(args.checkpoint)
    model = restore_model(checkpoint)
    _echo_config("recommend", {
        "data": args.data, "checkpoint": args.checkpoint,
        "history": args.history, "top_k": args.top_k,
    })
    history = []
    for token in args.history.split(","):
        external = token.strip()
        if external not in dataset.item_to_internal:
            raise UnknownIdError(f"item {external!r} is not in the vocabulary")
        history.append(dataset.item_to_internal[external])
    if not history:
        raise ConfigError("--history must list at least one item")
    for item, prob in model.predict_next(history, top_k=args.top_k):
        print(f"{dataset.internal_to_item[item]}\t{prob:.10f}")
    return 0


def cmd_export_attention(args) -> int:
    dataset = _load_dataset(args.data)
    checkpoint = load_checkpoint(args.checkpoint)
    model = restore_model(checkpoint)
    cfg = model.config
    window = args.window
    if window < 1 or window > cfg.max_len:
        raise ConfigError(f"--window must be in 1..{cfg.max_len}, got {window}")
    _echo_config("export-attention", {
        "data": args.data, "checkpoint": args.checkpoint,
        "window": window, "out": args.out, "max_users": args.max_users,
    })
    split = D.leave_one_out(dataset)
    rows = []
    for u in range(len(split.train)):
        history = split.train[u] + [split.val[u]]
        if min(len(history) + 1, cfg.max_len) >= window:
            rows.append(model._prediction_input(history))
        if args.max_users and len(rows) >= args.max_users:
            break
    if not rows:
        raise DataError(
            f"no user has {window} non-pad positions; pass a smaller --window"
        )
    totals = [
        [np.zeros((window, window)) for _ in range(cfg.num_heads)]
        for _ in range(cfg.num_layers)
    ]
    chunk = 256
    for start in range(0, len(rows), chunk):
        batch = np.stack(rows[start:start + chunk])
        _, maps = model.forward_ids(batch, collect_attention=True)
        for li, layer_maps in enumerate(maps):
            for hi, head in enumerate(layer_maps):
                sub = head[:, cfg.max_len - window:, cfg.max_len - window:]
                sub = sub / sub.sum(axis=-1, keepdims=True)
                totals[li][hi] += sub.sum(axis=0)
    os.makedirs(args.out, exist_ok=True)
    written = []
    for li in range(cfg.num_layers):
        for hi in range(cfg.num_heads):
            mean_map = totals[li][hi] / len(rows)
            name = f"attention_layer{li + 1}_head{hi + 1}"
            csv_path = os.path.join(args.out, name + ".csv")
            with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
                for row in mean_map:
                    fh.write(",".join(f"{x:.17g}" for x in row) + "\n")
            written.append(csv_path)
            if not args.no_figures:
                figures.save_attention_heatmap(
                    mean_map, os.path.join(args.out, name + ".png"),
                    f"layer {li + 1}, head {hi + 1} (mean of {len(rows)} users)",
                )
    print(f"users={len(rows)}")
    for path in written:
        print(path)
    return 0


def cmd_sweep(args) -> int:
    opts = _Options(args)
    dataset = _load_dataset(args.data)
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {args.axis!r}; choose from {sorted(SWEEP_AXES)}")
    field, caster = SWEEP_AXES[args.axis]
    try:
        values = [caster(v.strip()) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated {caster.__name__}s") from None
    if not values:
        raise ConfigError("--values must list at least one value")
    _echo_config("sweep", {
        "axis": args.axis, "values": values, "data": args.data,
        "seed": args.seed, "out": args.out,
    })
    split = D.leave_one_out(dataset)
    fingerprint = D.dataset_fingerprint(args.data)
    metric_names = ["HR@1", "HR@5", "HR@10", "NDCG@1", "NDCG@5", "NDCG@10", "MRR"]
    header = "value\t" + "\t".join(metric_names) + "\tsamples_per_s\terror"
    lines = [header]
    curve_values, curve_metrics = [], {name: [] for name in metric_names}
    for value in values:
        try:
            config = opts.model_config(dataset.num_items)
            setattr(config, field, value)
            config.validate()
            settings = opts.train_settings(args.seed)
            result = train(config, dataset, split, settings,
                           dataset_fingerprint=fingerprint)
            model = restore_model(result.final)
            report = evaluate(
                ModelScorer(model), split, dataset,
                seed=args.seed, split_name="test",
                num_negatives=args.num_negatives,
            )
            row = [str(value)]
            row += [f"{report.metrics[name]:.6f}" for name in metric_names]
            row += [f"{result.samples_per_s:.1f}", ""]
            curve_values.append(value)
            for name in metric_names:
                curve_metrics[name].append(report.metrics[name])
        except SeqrecError as exc:
            print(f"value {value} failed: {exc}", file=sys.stderr)
            row = [str(value)] + ["nan"] * len(metric_names) + ["nan", str(exc)]
        lines.append("\t".join(row))
    os.makedirs(args.out, exist_ok=True)
    tsv_path = os.path.join(args.out, "sweep.tsv")
    with open(tsv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    if curve_values and not args.no_figures:
        figures.save_sweep_curves(
            curve_values,
            {k: curve_metrics[k] for k in ("HR@10", "NDCG@10", "MRR")},
            os.path.join(args.out, "sweep.png"),
            xlabel=args.axis,
        )
    print("\n".join(lines))
    return 0


# ----- parser ----------------------------------------------------------------


def _add_common_model_flags(p: _Parser) -> None:
    p.add_argument("--config", help="key=value option file; flags override it")
    p.add_argument("--preset", help="dataset preset: movielens, beauty, or steam")
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--mask-proportion", type=float)
    p.add_argument("--attention-mode", choices=["bidirectional", "causal"])
    p.add_argument("--ablate", help="comma list: no-pe,no-pffn,no-ln,no-rc,no-dropout")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--adam-eps", type=float)
    p.add_argument("--masks-per-sequence", type=int)
    p.add_argument("--last-item-instances", type=int)
    p.add_argument("--val-every", type=int)
    p.add_argument("--val-negatives", type=int)


def build_parser() -> _Parser:
    parser = _Parser(prog="seqrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("prepare", help="parse and filter a raw interaction log",
                       parents=[], add_help=True)
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["movielens", "csv"], default="movielens")
    p.add_argument("--user-col", default="user")
    p.add_argument("--item-col", default="item")
    p.add_argument("--time-col", default="timestamp")
    p.add_argument("--min-user", type=int, default=5)
    p.add_argument("--min-item", type=int, default=None,
                   help="default 5 for movielens, 0 for csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train on a prepared dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", help="continue from a checkpoint file")
    p.add_argument("--no-figures", action="store_true")
    _add_common_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rank held-out items for a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=["pop"])
    p.add_argument("--split", choices=["val", "test"], default="test")
    p.add_argument("--num-negatives", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="also write the JSON report here")
    p.add_argument("--ranks", help="also write a user<TAB>rank TSV here")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="top-k continuations for an item history")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--history", required=True,
                   help="comma-separated external item ids, oldest first")
    p.add_argument("--top-k", type=int, default=10)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("export-attention",
                       help="average attention maps over test inputs")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--max-users", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("sweep", help="train and evaluate across one config axis")
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-negatives", type=int, default=100)
    p.add_argument("--no-figures", action="store_true")
    _add_common_model_flags(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args) or 0
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"seqrec: configuration error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"seqrec: data error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"seqrec: data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, ShapeError, ContractError, DegenerateRowError) as exc:
        print(f"seqrec: numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
