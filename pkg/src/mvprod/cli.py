"""Command-line entry points.

Subcommands: gen-data, train, eval, ablate, grad-check. Exit codes:
0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from . import dataio, evaluate
from .dataio import DataFormatError, GenConfig
from .train import (
    ConfigError,
    TrainConfig,
    full_objective_gradient_check,
    params_from_arrays,
    run_experiment,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3


def _load_config_file(path: str) -> dict:
    try:
        import tomllib  # Python >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config file {path}: {exc}") from exc


def _coerce(name: str, value: str, target_type):
    if target_type is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    try:
        return target_type(value)
    except ValueError as exc:
        raise ConfigError(f"{name}: expected {target_type.__name__}, got {value!r}") from exc


def build_train_config(config_file: str | None, overrides) -> TrainConfig:
    raw = _load_config_file(config_file) if config_file else {}
    defaults = TrainConfig()
    field_types = {f.name: type(getattr(defaults, f.name)) for f in fields(TrainConfig)}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        if key not in field_types:
            raise ConfigError(f"unknown config key: {key}")
        raw[key] = _coerce(key, value, field_types[key])
    return TrainConfig.from_dict(raw)


def _cmd_gen_data(args) -> int:
    cfg = GenConfig(
        n_pairs=args.pairs,
        level1_count=args.level1,
        children_per_node=args.children,
        latent_dim=args.latent_dim,
        visual_dim=args.visual_dim,
        text_dim=args.text_dim,
        product_noise=args.product_noise,
        clutter=args.clutter,
        feature_noise=args.feature_noise,
        zipf_exponent=args.zipf,
        seed=args.seed,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = dataio.generate(cfg, args.out)
    print(json.dumps({"kind": "gen-data", "out": str(out), "pairs": cfg.n_pairs, "seed": cfg.seed}))
    return EXIT_OK


def _cmd_train(args) -> int:
    config = build_train_config(args.config, args.set)
    if args.steps is not None:
        config = replace(config, total_steps=args.steps)
        config.validate()
    report = run_experiment(config, args.data, args.out)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .checkpoint import read_checkpoint

    if not Path(args.checkpoint).exists():
        raise DataFormatError(f"checkpoint not found: {args.checkpoint}")
    bundle = read_checkpoint(args.checkpoint)
    config = TrainConfig.from_dict(bundle.meta["config"])
    params = params_from_arrays(bundle.arrays, config.dtype())
    dataset = dataio.load(args.data)
    split = dataio.split_dataset(len(dataset), config.split_seed)
    indices = getattr(split, args.split)
    mv_e, prod_e = evaluate.embed_instances(dataset, indices, params, config.modality_mode)
    report = evaluate.evaluate_embeddings(mv_e, prod_e)
    for direction, metrics in (("mv2prod", report.mv2prod), ("prod2mv", report.prod2mv)):
        rec = {
            "kind": "eval",
            "split": args.split,
            "step": bundle.step,
            "direction": direction,
            "degenerate": report.degenerate,
        }
        rec.update(metrics.as_record())
        print(json.dumps(rec, sort_keys=True))
    return EXIT_OK


def _cmd_ablate(args) -> int:
    base = build_train_config(args.config, args.set)
    if args.steps is not None:
        base = replace(base, total_steps=args.steps)
    variants = [
        ("multi-scored", {"queue_mode": "multi", "importance_mode": "scored"}),
        ("multi-unit", {"queue_mode": "multi", "importance_mode": "unit"}),
        ("single-unit", {"queue_mode": "single", "importance_mode": "unit"}),
        ("visual-only", {"modality_mode": "visual-only"}),
        ("text-only", {"modality_mode": "text-only"}),
    ]
    out_root = Path(args.out)
    runs = []
    for seed_offset in range(args.seeds):
        for name, delta in variants:
            config = replace(
                base,
                params_seed=base.params_seed + seed_offset,
                shuffle_seed=base.shuffle_seed + seed_offset,
                **delta,
            )
            config.validate()
            run_dir = out_root / "runs" / f"{name}-seed{seed_offset}"
            report = run_experiment(config, args.data, run_dir)
            runs.append({"name": name, "seed_offset": seed_offset, "delta": delta, "report": report})
            print(
                json.dumps(
                    {
                        "kind": "ablation-run",
                        "name": name,
                        "seed_offset": seed_offset,
                        "test_rsum_mv2prod": report["test"]["mv2prod"]["Rsum"],
                    },
                    sort_keys=True,
                )
            )
    summary_path = out_root / "ablation_summary.json"
    summary_path.write_text(json.dumps({"base_config": asdict(base), "runs": runs}, indent=2, sort_keys=True))
    print(json.dumps({"kind": "ablate", "summary": str(summary_path), "runs": len(runs)}))
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    error = full_objective_gradient_check(
        batch_size=args.batch,
        refined_dim=args.refined_dim,
        embed_dim=args.embed_dim,
        n_negatives=args.negatives,
        temperature=args.temperature,
        seed=args.seed,
        eps=args.eps,
    )
    ok = error < args.tolerance
    print(json.dumps({"kind": "grad-check", "max_relative_error": error, "tolerance": args.tolerance, "ok": ok}))
    return EXIT_OK if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvprod", description="Microvideo-product retrieval trainer")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    gen.add_argument("--out", required=True)
    gen.add_argument("--pairs", type=int, default=GenConfig.n_pairs)
    gen.add_argument("--seed", type=int, default=GenConfig.seed)
    gen.add_argument("--level1", type=int, default=GenConfig.level1_count)
    gen.add_argument("--children", type=int, default=GenConfig.children_per_node)
    gen.add_argument("--latent-dim", type=int, default=GenConfig.latent_dim)
    gen.add_argument("--visual-dim", type=int, default=GenConfig.visual_dim)
    gen.add_argument("--text-dim", type=int, default=GenConfig.text_dim)
    gen.add_argument("--product-noise", type=float, default=GenConfig.product_noise)
    gen.add_argument("--clutter", type=float, default=GenConfig.clutter)
    gen.add_argument("--feature-noise", type=float, default=GenConfig.feature_noise)
    gen.add_argument("--zipf", type=float, default=GenConfig.zipf_exponent)
    gen.set_defaults(func=_cmd_gen_data)

    tr = sub.add_parser("train", help="train and evaluate per config")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--config", help="TOML file with TrainConfig keys")
    tr.add_argument("--steps", type=int, help="override total_steps")
    tr.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", choices=("train", "val", "test"), default="test")
    ev.set_defaults(func=_cmd_eval)

    ab = sub.add_parser("ablate", help="run the modality and queue ablation grid")
    ab.add_argument("--data", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--config")
    ab.add_argument("--steps", type=int)
    ab.add_argument("--seeds", type=int, default=5)
    ab.add_argument("--set", action="append", metavar="KEY=VALUE")
    ab.set_defaults(func=_cmd_ablate)

    gc = sub.add_parser("grad-check", help="finite-difference check of the full objective")
    gc.add_argument("--batch", type=int, default=4)
    gc.add_argument("--refined-dim", type=int, default=8)
    gc.add_argument("--embed-dim", type=int, default=8)
    gc.add_argument("--negatives", type=int, default=4)
    gc.add_argument("--temperature", type=float, default=0.07)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.set_defaults(func=_cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
