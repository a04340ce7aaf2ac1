"""Command-line entry point: dataset generation, training, ablation, evaluation."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import trainer
from .config import ConfigError, TrainConfig, parse_config, save_config
from .data import DatasetError, GenerationError, SampleDataset, generate_synthetic, load_manifest
from .evaluate import embedding_variance, evaluate_model
from .inference import threshold_classify


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="JSON config file")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-path config override (repeatable), beats file values",
    )
    p.add_argument("--seed", type=int, default=None, help="override the config seed")


def _resolve_config(args) -> TrainConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return parse_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ltuda",
        description="Partially-supervised multi-organ segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic partially-labeled dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-subset", type=int, default=10)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("train", help="train stage 1, stage 2, or both")
    _add_config_args(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p.add_argument("--stage1-ckpt", type=str, default=None, help="required for --stage 2")

    p = sub.add_parser("ablate", help="train baseline / +CDA / full and compare")
    _add_config_args(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--test-data", type=str, required=True)
    p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("eval", help="score a checkpoint against full labels")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True, help="report JSON path")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--model", choices=["student", "teacher"], default=None)

    p = sub.add_parser("predict", help="write hard label maps for a dataset")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--input", type=str, required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("inspect-protos", help="dump prototype norms and cosine similarities")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--out", type=str, required=True, help="output directory for CSV files")
    return parser


def _cmd_gen_data(args) -> int:
    generate_synthetic(
        num_classes=args.classes,
        n_per_subset=args.per_subset,
        image_size=(args.size, args.size),
        seed=args.seed,
        out_dir=args.out,
    )
    print(f"wrote {args.classes} subsets x {args.per_subset} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = _resolve_config(args)
    dataset = SampleDataset.from_manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.json")
    if args.stage == "1":
        ckpt = trainer.train_stage1(config, dataset, out)
    elif args.stage == "2":
        if not args.stage1_ckpt:
            raise ConfigError("--stage 2 requires --stage1-ckpt")
        ckpt = trainer.train_stage2(config, dataset, args.stage1_ckpt, out)
    else:
        ckpt = trainer.train_both(config, dataset, out)
    print(f"final checkpoint: {ckpt}")
    return 0


def _cmd_ablate(args) -> int:
    config = _resolve_config(args)
    train_ds = SampleDataset.from_manifest(args.data)
    test_ds = SampleDataset.from_manifest(args.test_data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.json")
    report = trainer.run_ablation(config, train_ds, test_ds, out)
    for row in report.rows:
        print(
            f"{row.name:>8}: mean dice {row.report.mean_dice:.4f}  "
            f"mean hd {row.report.mean_hd:.2f}  variance ratio {row.variance.ratio:.4f}"
        )
    return 0


def _cmd_eval(args) -> int:
    state = trainer.load_checkpoint(args.ckpt)
    config = TrainConfig.from_dict(state["config"])
    tau = args.tau if args.tau is not None else config.tau
    which = args.model if args.model is not None else config.eval_model
    model = trainer.build_model_from_checkpoint(state, which=which)
    dataset = SampleDataset.from_manifest(args.data)
    report = evaluate_model(model, dataset, tau)
    variance = embedding_variance(model, dataset)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["variance_ratio"] = variance.ratio
    out.write_text(json.dumps(payload, indent=2) + "\n")
    report.write_csv(out.with_suffix(".csv"))
    print(f"mean dice {report.mean_dice:.4f}, mean hd {report.mean_hd:.2f} -> {out}")
    return 0


def _cmd_predict(args) -> int:
    import torch

    state = trainer.load_checkpoint(args.ckpt)
    config = TrainConfig.from_dict(state["config"])
    model = trainer.build_model_from_checkpoint(state, which=config.eval_model)
    manifest = load_manifest(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    with torch.no_grad():
        for subset in manifest.subsets:
            for i in range(len(subset.samples)):
                from .data import load_sample

                rec = load_sample(manifest, subset.subset_id, i)
                x = torch.from_numpy(rec.image).float().unsqueeze(0).unsqueeze(0)
                _, probs = model(x)
                pred = threshold_classify(probs[0].numpy(), args.tau)
                rel = f"pred_subset{subset.subset_id}_{i:04d}.bin"
                pred.astype("<i2").tofile(out / rel)
                index.append({"subset_id": subset.subset_id, "index": i, "prediction": rel})
    (out / "predictions.json").write_text(
        json.dumps({"image_size": list(manifest.image_size), "predictions": index}, indent=2)
        + "\n"
    )
    print(f"wrote {len(index)} predictions to {out}")
    return 0


def _cmd_inspect_protos(args) -> int:
    from .prototypes import PrototypeBank

    state = trainer.load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wrote = 0
    for name in ("labeled_bank", "unlabeled_bank"):
        if state.get(name) is None:
            continue
        bank = PrototypeBank.from_state_dict(state[name])
        protos = bank.protos.reshape(-1, bank.dim).numpy()
        with open(out / f"{name}_norms.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "k", "norm", "initialized"])
            for c in range(bank.num_classes + 1):
                for k in range(bank.num_prototypes):
                    writer.writerow(
                        [
                            c,
                            k,
                            repr(float(np.linalg.norm(bank.protos[c, k].numpy()))),
                            int(bank.initialized[c, k]),
                        ]
                    )
        cosine = protos @ protos.T
        with open(out / f"{name}_cosine.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            k_total = bank.num_prototypes
            header = [""] + [f"c{c}k{k}" for c in range(bank.num_classes + 1) for k in range(k_total)]
            writer.writerow(header)
            for idx in range(cosine.shape[0]):
                label = f"c{idx // k_total}k{idx % k_total}"
                writer.writerow([label] + [repr(float(v)) for v in cosine[idx]])
        wrote += 1
    if wrote == 0:
        print("checkpoint has no prototype banks (stage 1?)", file=sys.stderr)
        return 1
    print(f"wrote prototype summaries for {wrote} bank(s) to {out}")
    return 0


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "ablate": _cmd_ablate,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "inspect-protos": _cmd_inspect_protos,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DatasetError, GenerationError, trainer.TrainingDivergedError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def run() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    run()
