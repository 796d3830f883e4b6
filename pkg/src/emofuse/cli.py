"""Command-line driver.

Subcommands: gen-data, train, eval, ablate, predict, gradcheck, serve.
Exit codes: 0 success, 2 usage error, 1 runtime error. Every source of
randomness is controlled by --seed, so any invocation is reproducible from
its flags. A JSON config file (--config) may supply per-subcommand
defaults; explicit flags override it.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import List, Optional, Tuple

from . import service as service_mod
from .data import Dataset, gen_blobs, gen_shares, load_jsonl, resolve_features, save_jsonl, split
from .errors import EmofuseError, InputError
from .gradcheck import TOLERANCE, run_suite, worst_error
from .metrics import full_report
from .model import CANONICAL_ORDER, FafModel, ModelConfig, canonical_key
from .training import TrainConfig, train

ABLATION_SUBSETS: Tuple[Tuple[str, ...], ...] = (
    ("face",),
    ("body",),
    ("text",),
    ("face", "body"),
    ("face", "text"),
    ("body", "text"),
    ("face", "body", "text"),
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emofuse",
        description="multimodal (face/body/text) emotion classifier toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--kind", required=True, choices=["blobs", "shares"])
    p.add_argument("--n", required=True, type=int, help="total number of records")
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=None,
                   help="noise scale (default 0.3 for blobs, 0.1 for shares)")
    p.add_argument("--config", default=None)

    p = sub.add_parser("train", help="train a model on a record file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--modalities", default="face,body,text",
                   help="comma-separated subset of face,body,text")
    p.add_argument("--config", default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a record file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="evaluation report path")
    p.add_argument("--config", default=None)

    p = sub.add_parser("ablate", help="train and evaluate every modality subset")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True, help="ablation report path")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--config", default=None)

    p = sub.add_parser("predict", help="score one record with a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="file holding one JSON record")
    p.add_argument("--config", default=None)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--config", default=None)

    p = sub.add_parser("serve", help="start the prediction service")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--reports-dir", default=None)
    p.add_argument("--static-dir", default=None)
    p.add_argument("--config", default=None)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, args: argparse.Namespace,
                       argv: List[str]) -> argparse.Namespace:
    if not getattr(args, "config", None):
        return args
    with open(args.config, "r", encoding="utf-8") as fh:
        table = json.load(fh)
    section = table.get(args.command, {})
    if not isinstance(section, dict):
        raise InputError(f"config section {args.command!r} must be an object")
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    known = {action.dest for action in sub._actions}  # noqa: SLF001
    unknown = sorted(set(section) - known)
    if unknown:
        raise InputError(f"config keys {unknown} are not flags of {args.command}")
    sub.set_defaults(**section)
    return parser.parse_args(argv)


def _cmd_gen_data(args) -> int:
    labels = None
    if args.kind == "blobs":
        sigma = 0.3 if args.sigma is None else args.sigma
        num_classes = 5
        if args.n % num_classes != 0:
            raise InputError(f"--n must be a multiple of {num_classes} for blobs")
        ds = gen_blobs(seed=args.seed, n_per_class=args.n // num_classes, sigma=sigma)
    else:
        sigma = 0.1 if args.sigma is None else args.sigma
        ds = gen_shares(seed=args.seed, n=args.n, sigma=sigma)
    save_jsonl(ds, args.out)
    print(f"wrote {len(ds)} records to {args.out}")
    return 0


def _train_once(dataset: Dataset, modalities, epochs: int, batch_size: int,
                lr: float, seed: int, input_dims=None) -> Tuple[FafModel, dict]:
    config = ModelConfig(
        enabled_modalities=modalities,
        input_dims=input_dims or {},
        num_classes=len(dataset.label_names),
        label_names=dataset.label_names,
    )
    tcfg = TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr, seed=seed)
    model, history = train(dataset, config, tcfg)
    summary = {
        "modalities": config.modality_key,
        "epochs": epochs,
        "final_loss": history.epoch_losses[-1] if history.epoch_losses else None,
        "final_train_accuracy": history.epoch_accuracies[-1] if history.epoch_accuracies else None,
        "gate_epoch": history.gate_epoch,
        "gate_active": model.gate_active,
    }
    return model, summary


def _cmd_train(args) -> int:
    modalities = tuple(s for s in args.modalities.split(",") if s)
    dataset = load_jsonl(args.data)
    model, summary = _train_once(dataset, modalities, args.epochs, args.batch_size,
                                 args.lr, args.seed)
    model.save(args.out)
    print(json.dumps(summary, sort_keys=True))
    print(f"saved checkpoint to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model = FafModel.load(args.model)
    dims = {m.value: d for m, d in model.config.input_dims.items()}
    dataset = load_jsonl(args.data, expected_dims=dims, label_names=model.config.label_names)
    y_true, y_pred, scores = model.predict_dataset(dataset.records)
    report = full_report(y_true, y_pred, scores, model.config.label_names)
    Path(args.out).write_text(report.to_json(), encoding="utf-8")
    print(json.dumps({"accuracy": report.accuracy, "macro_f1": report.macro_f1}, sort_keys=True))
    print(f"wrote evaluation report to {args.out}")
    return 0


def ablate(dataset: Dataset, seed: int, epochs: int = 60, batch_size: int = 16,
           lr: float = 1e-3, test_fraction: float = 0.2, input_dims=None) -> dict:
    """Train one model per nonempty modality subset with identical seeds and
    hyperparameters; return per-subset evaluation reports plus a summary
    table (macro precision/recall/F1 and accuracy per subset)."""
    for record in dataset.records:
        for m in CANONICAL_ORDER:
            if getattr(record, m.value) is None:
                raise InputError(
                    f"ablation needs all three modalities; record {record.id!r} "
                    f"lacks {m.value}"
                )
    train_ds, test_ds = split(dataset, test_fraction, seed)
    rows = []
    reports = {}
    for subset in ABLATION_SUBSETS:
        key = canonical_key(subset)
        model, _ = _train_once(train_ds, subset, epochs, batch_size, lr, seed, input_dims)
        y_true, y_pred, scores = model.predict_dataset(test_ds.records)
        report = full_report(y_true, y_pred, scores, model.config.label_names)
        reports[key] = report.to_dict()
        rows.append(
            {
                "modalities": key,
                "precision": report.macro_precision,
                "recall": report.macro_recall,
                "f1": report.macro_f1,
                "accuracy": report.accuracy,
            }
        )
    return {
        "seed": seed,
        "epochs": epochs,
        "batch_size": batch_size,
        "lr": lr,
        "test_fraction": test_fraction,
        "rows": rows,
        "reports": reports,
    }


def _cmd_ablate(args) -> int:
    dataset = load_jsonl(args.data)
    result = ablate(dataset, seed=args.seed, epochs=args.epochs)
    Path(args.out).write_text(json.dumps(result, sort_keys=True, indent=2) + "\n",
                              encoding="utf-8")
    header = f"{'modalities':<16} {'precision':>9} {'recall':>9} {'f1':>9} {'accuracy':>9}"
    print(header)
    for row in result["rows"]:
        print(f"{row['modalities']:<16} {row['precision']:>9.4f} {row['recall']:>9.4f} "
              f"{row['f1']:>9.4f} {row['accuracy']:>9.4f}")
    print(f"wrote ablation report to {args.out}")
    return 0


def _cmd_predict(args) -> int:
    model = FafModel.load(args.model)
    with open(args.input, "r", encoding="utf-8") as fh:
        record = json.loads(fh.read())
    if not isinstance(record, dict):
        raise InputError("input record must be a JSON object")
    features = resolve_features(record, model.config.enabled_modalities)
    result = model.predict(features)
    print(json.dumps(result, sort_keys=True))
    return 0


def _cmd_gradcheck(args) -> int:
    started = time.time()
    suite = run_suite()
    for name in sorted(suite):
        print(f"{name:<24} max relative error {suite[name].max_relative_error:.3e}")
    worst = worst_error(suite)
    print(f"worst case {worst:.3e} (tolerance {TOLERANCE:.0e}) in {time.time() - started:.1f}s")
    return 0 if worst < TOLERANCE else 1


def _cmd_serve(args) -> int:
    service_mod.serve(args.model_dir, port=args.port, reports_dir=args.reports_dir,
                      static_dir=args.static_dir)
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "predict": _cmd_predict,
    "gradcheck": _cmd_gradcheck,
    "serve": _cmd_serve,
}


def run(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(parser, args, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except EmofuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
