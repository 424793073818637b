"""Command line interface.

Subcommands: prepare, synth, train, eval, ablate, overlap, sweep.
Progress goes to stderr; each command's result is one JSON document on
stdout so runs can be piped and diffed.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

from .dataio import (
    DataFormatError,
    SynthConfig,
    load_dataset,
    prepare_dataset,
    split_from_json,
    synth_generate,
    write_dataset,
)
from .engine import (
    ABLATIONS,
    OVERLAP_RATIOS,
    DivergenceError,
    TrainConfig,
    evaluate,
    load_model,
    run_ablation,
    run_overlap,
    run_sweep,
    save_model,
    train,
)
from .tensor import ContractError, DimensionError, NumericDomainError

CLI_ERRORS = (
    ContractError,
    DataFormatError,
    DimensionError,
    NumericDomainError,
    DivergenceError,
    OSError,
    json.JSONDecodeError,
)


def _echo(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _emit(obj: dict, out_path: str | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(text + "\n", encoding="utf-8")
    print(text)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for f in dataclass_fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            p.add_argument(flag, action="store_true", dest=f.name)
        else:
            p.add_argument(flag, type=type(f.default), default=f.default, dest=f.name)


def _config_from_args(args: argparse.Namespace) -> TrainConfig:
    values = {f.name: getattr(args, f.name) for f in dataclass_fields(TrainConfig)}
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="canonical data directory")
    p.add_argument("--min-interactions", type=int, default=5)
    p.add_argument("--verbose", action="store_true", help="progress lines on stderr")


def _load(args: argparse.Namespace):
    return load_dataset(args.data, min_interactions=args.min_interactions)


# -- commands ---------------------------------------------------------------------


def cmd_prepare(args: argparse.Namespace) -> int:
    item_paths = {}
    if args.item_features_s:
        item_paths["S"] = args.item_features_s
    if args.item_features_t:
        item_paths["T"] = args.item_features_t
    stats = prepare_dataset(
        args.interactions,
        args.out,
        user_features_path=args.user_features,
        item_features_paths=item_paths or None,
        min_interactions=args.min_interactions,
        fallback_dim=args.fallback_dim,
    )
    _emit(stats)
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    if args.overlap >= args.users:
        raise ContractError("--overlap must be smaller than --users")
    cfg = SynthConfig(
        n_users_s=args.users - args.overlap,
        n_users_t=args.users - args.overlap,
        n_overlap=args.overlap,
        n_items={"S": args.items, "T": args.items_t or args.items},
        n_interests=args.interests,
        mean_interactions={"S": args.mean_s, "T": args.mean_t},
        temperature=args.choice_temperature,
        feature_noise=args.feature_noise,
        feature_dim=args.feature_dim,
        mixture_alpha=args.mixture_alpha,
        user_feature_signal=args.user_feature_signal,
        seed=args.seed,
    )
    interactions, features, labels = synth_generate(cfg)
    counts = write_dataset(args.out, interactions, features, labels)
    _emit(counts)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    ds = _load(args)
    cfg = _config_from_args(args)
    log = _echo if args.verbose else None
    model, history = train(ds, cfg, log=log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, str(out / "model.bin"))
    (out / "split.json").write_text(
        json.dumps(model.split.to_json_obj(ds), sort_keys=True) + "\n", encoding="utf-8"
    )
    (out / "history.json").write_text(
        json.dumps(history, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    report = evaluate(model)
    _emit(report.to_json_obj(), str(out / "report.json"))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    ds = _load(args)
    split = None
    if args.split:
        split = split_from_json(ds, json.loads(Path(args.split).read_text(encoding="utf-8")))
    model = load_model(args.checkpoint, ds, split)
    report = evaluate(model)
    _emit(report.to_json_obj(), args.out)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    ds = _load(args)
    cfg = _config_from_args(args)
    names = tuple(args.variants.split(",")) if args.variants else ABLATIONS
    out = run_ablation(ds, cfg, names=names, log=_echo if args.verbose else None)
    _emit(out, args.out)
    return 0


def cmd_overlap(args: argparse.Namespace) -> int:
    ds = _load(args)
    cfg = _config_from_args(args)
    ratios = tuple(float(r) for r in args.ratios.split(",")) if args.ratios else OVERLAP_RATIOS
    out = run_overlap(ds, cfg, ratios=ratios, log=_echo if args.verbose else None)
    _emit(out, args.out)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    ds = _load(args)
    cfg = _config_from_args(args)
    values = None
    if args.values:
        field_types = {f.name: type(f.default) for f in dataclass_fields(TrainConfig)}
        if args.param not in field_types:
            raise ContractError(f"unknown hyperparameter {args.param!r}")
        caster = field_types[args.param]
        values = tuple(caster(v) for v in args.values.split(","))
    out = run_sweep(ds, cfg, args.param, values=values, log=_echo if args.verbose else None)
    _emit(out, args.out)
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xdrec", description="dual-domain recommender: data, training, evaluation"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="filter raw TSV files into a data directory")
    p.add_argument("--interactions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--user-features")
    p.add_argument("--item-features-s")
    p.add_argument("--item-features-t")
    p.add_argument("--min-interactions", type=int, default=5)
    p.add_argument("--fallback-dim", type=int, default=16)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate a synthetic dual-domain dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=2000, help="users per domain, overlap included")
    p.add_argument("--overlap", type=int, default=600)
    p.add_argument("--items", type=int, default=1000, help="items in domain S")
    p.add_argument("--items-t", type=int, default=0, help="items in domain T (default: --items)")
    p.add_argument("--interests", type=int, default=8)
    p.add_argument("--mean-s", type=float, default=30.0)
    p.add_argument("--mean-t", type=float, default=10.0)
    p.add_argument("--choice-temperature", type=float, default=0.15)
    p.add_argument("--feature-noise", type=float, default=0.25)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--mixture-alpha", type=float, default=0.25)
    p.add_argument("--user-feature-signal", type=float, default=1.0,
                   help="scale on the interest part of user features; 0 leaves noise only")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write checkpoint + report")
    _add_data_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="split JSON written by train")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare model variants")
    _add_data_flags(p)
    p.add_argument("--out", help="result JSON path")
    p.add_argument("--variants", help=f"comma list from {','.join(ABLATIONS)}")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("overlap", help="sweep the cross-domain overlap ratio")
    _add_data_flags(p)
    p.add_argument("--out", help="result JSON path")
    p.add_argument("--ratios", help="comma list of ratios in (0, 1]")
    _add_config_flags(p)
    p.set_defaults(func=cmd_overlap)

    p = sub.add_parser("sweep", help="one-dimensional hyperparameter sweep")
    _add_data_flags(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", help="comma list; default grid when omitted")
    p.add_argument("--out", help="result JSON path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CLI_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
