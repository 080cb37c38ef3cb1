"""Command-line interface.

Subcommands: gen-data, hash-audit, train, predict, certify, attack,
sweep-overfit, estimate-k, report. Exit code 0 on success, 1 on a usage
or data error, 2 on a pipeline stage failure.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import aggregate, attack, dataset as ds, harness, partition
from .fieldhash import HashSpec


def _add_config_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="TOML experiment config")
    p.add_argument("--out", default=None, help="override output directory")
    p.add_argument("--seed", type=int, default=None, help="override train seed")


def _load_config(args) -> harness.ExperimentConfig:
    config = harness.load_config(args.config)
    updates = {}
    if getattr(args, "out", None):
        updates["out_dir"] = args.out
    if getattr(args, "seed", None) is not None:
        updates["train_seed"] = args.seed
    if updates:
        from dataclasses import replace
        config = replace(config, **updates)
    return config


def cmd_gen_data(args) -> int:
    data = ds.generate_blobs(args.seed, args.num_classes, args.per_class,
                             tuple(args.shape), args.noise)
    ds.save_dataset(data, args.out)
    print(f"wrote {len(data)} samples to {args.out}")
    return 0


def cmd_hash_audit(args) -> int:
    stats = harness.hash_audit(_load_config(args))
    print(json.dumps(stats, indent=2, sort_keys=True))
    return 0 if stats["collisions"] == 0 else 1


def cmd_train(args) -> int:
    config = _load_config(args)
    if args.k is not None:
        from dataclasses import replace
        config = replace(config, k_values=(args.k,))
    trainset, _ = harness.load_train_val(config)
    spec = HashSpec.for_input_dim(trainset.input_dim, config.hash_seed)
    out = config.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    for k in config.k_values:
        plan = partition.build_plan(trainset, spec, k)
        ens_dir = out / f"ensemble_k{k}"
        ens_dir.mkdir(exist_ok=True)
        ensemble = harness.train_ensemble(trainset, plan, config,
                                          args.workers, ens_dir)
        aggregate.save_ensemble(ensemble, ens_dir,
                                plan.to_json("hash_spec.json"), spec.to_json())
        print(f"trained ensemble k={k} -> {ens_dir}")
    return 0


def cmd_predict(args) -> int:
    ensemble = aggregate.load_ensemble(args.ensemble)
    data = ds.load_dataset(args.input)
    for i in range(len(data)):
        t = aggregate.tally(ensemble, data.pixels[i])
        print(aggregate.dpa_predict(t))
    return 0


def cmd_certify(args) -> int:
    ensemble = aggregate.load_ensemble(args.ensemble)
    testset = ds.load_dataset(args.testset)
    y0, radius = harness.certificates_for(ensemble, testset)
    for pred, r in zip(y0, radius):
        print(f"{pred}\t{r}")
    correct = (y0 == testset.labels).mean()
    print(f"# accuracy={correct:.4f} mean_radius={radius.mean():.3f}",
          file=sys.stderr)
    return 0


def cmd_attack(args) -> int:
    config = _load_config(args)
    if not config.attacks:
        print("config has no [[attack]] sections", file=sys.stderr)
        return 1
    report = harness.run_experiment(config, workers=args.workers)
    for row in report["rows"]:
        for label, asr in row["asr"].items():
            print(f"k={row['k']} {label} ASR={asr:.4f}")
    return 0


def cmd_sweep_overfit(args) -> int:
    config = _load_config(args)
    if not config.attacks:
        print("config has no [[attack]] sections", file=sys.stderr)
        return 1
    trainset, valset = harness.load_train_val(config)
    spec = config.learner_spec(seed=config.train_seed)
    curve = attack.overfitting_sweep(trainset, config.attacks[0],
                                     args.scales, spec, valset)
    for size, asr in curve:
        print(f"train_size={size} ASR={asr:.4f}")
    return 0


def cmd_estimate_k(args) -> int:
    config = _load_config(args)
    k = harness.estimate_max_k(config, args.floor)
    print(k)
    return 0


def cmd_report(args) -> int:
    config = _load_config(args)
    report = harness.run_experiment(config, workers=args.workers)
    print(json.dumps(report["rows"], indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpakit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic blobs dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--shape", type=int, nargs=3, default=[8, 8, 3],
                   metavar=("H", "W", "C"))
    p.add_argument("--noise", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("hash-audit", help="collision statistics for a dataset")
    _add_config_arg(p)
    p.set_defaults(fn=cmd_hash_audit)

    p = sub.add_parser("train", help="train DPA ensembles")
    _add_config_arg(p)
    p.add_argument("--k", type=int, default=None, help="train only this k")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="DPA predictions for a dataset file")
    p.add_argument("--ensemble", required=True)
    p.add_argument("--input", required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("certify", help="predictions plus certified radii")
    p.add_argument("--ensemble", required=True)
    p.add_argument("--testset", required=True)
    p.set_defaults(fn=cmd_certify)

    p = sub.add_parser("attack", help="run configured backdoor attacks")
    _add_config_arg(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("sweep-overfit", help="ASR vs training-set scale")
    _add_config_arg(p)
    p.add_argument("--scales", type=float, nargs="+", default=[1.0, 0.25, 0.0625])
    p.set_defaults(fn=cmd_sweep_overfit)

    p = sub.add_parser("estimate-k", help="max partitions preserving accuracy")
    _add_config_arg(p)
    p.add_argument("--floor", type=float, required=True)
    p.set_defaults(fn=cmd_estimate_k)

    p = sub.add_parser("report", help="full experiment and report files")
    _add_config_arg(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except harness.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
