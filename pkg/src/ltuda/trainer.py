"""Two-stage training orchestrator.

Stage 1 trains the linear classifier with cross-set mixing: the weak view is
supervised by partial ground truth, the strong views by masked pseudo-labels.
Stage 2 restarts from the stage-1 student (teacher included), adds the two
prototype classifiers, and maintains both banks with momentum updates and the
background copy rule; banks warm up for one epoch before their losses turn on.

Every random draw flows from a single numpy generator whose state is stored in
checkpoints, so a resumed run reproduces an uninterrupted one bit for bit.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import augment, losses, prototypes, teacher as teacher_mod
from .backbone import UNet, ema_update, make_teacher
from .config import TrainConfig
from .data import SampleDataset, sample_batch
from .evaluate import FeatureVariance, MetricReport, embedding_variance, evaluate_model

CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ["step", "L_pbce_weak", "L_linear_s", "L_lproto", "L_ulproto", "L_ppd", "L_ppc"]


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; the offending batch was dumped if a dump dir was set."""


def poly_lr(base_lr: float, step: int, total_steps: int, power: float) -> float:
    frac = min(step / total_steps, 1.0) if total_steps > 0 else 1.0
    return base_lr * (1.0 - frac) ** power


def _num_workers() -> int:
    try:
        return max(0, int(os.environ.get("LTUDA_NUM_WORKERS", "0")))
    except ValueError:
        return 0


def batch_binary_targets(
    partials: list, num_classes: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack per-record partial-label binary views into (B, C, H, W) tensors."""
    targets, valid = [], []
    for plm in partials:
        t, v = plm.binary_view(num_classes)
        targets.append(t)
        valid.append(v)
    return (
        torch.from_numpy(np.stack(targets)),
        torch.from_numpy(np.stack(valid)),
    )


class TrainingLoop:
    """One stage's training loop; variants toggle cross-set mixing and prototypes."""

    def __init__(
        self,
        config: TrainConfig,
        dataset: SampleDataset,
        use_cda: bool,
        use_pda: bool,
        epochs: int,
        dump_dir: Path | None = None,
        strong_warmup_epochs: int | None = None,
    ):
        if use_cda and config.strong_placement != "same":
            raise NotImplementedError(
                f"placement {config.strong_placement!r} is reserved; only 'same' is implemented"
            )
        self.config = config
        self.dataset = dataset
        self.use_cda = use_cda
        self.use_pda = use_pda
        self.epochs = epochs
        self.dump_dir = dump_dir
        self.strong_warmup_epochs = (
            config.strong_warmup_epochs if strong_warmup_epochs is None else strong_warmup_epochs
        )
        self.steps_per_epoch = max(1, len(dataset) // config.batch_size)
        self.total_steps = self.steps_per_epoch * epochs
        # stage 2 (prototype stage) may run on its own learning rate
        self.base_lr = config.lr
        if use_pda and config.stage2_lr is not None:
            self.base_lr = config.stage2_lr
        self.step_count = 0
        self.rng = np.random.default_rng(config.seed)
        # separate stream so bank seeding never perturbs data/augmentation draws
        self.bank_rng = np.random.default_rng([config.seed, 1])
        torch.manual_seed(config.seed)
        self.student = UNet(
            num_classes=dataset.num_classes,
            depth=config.depth,
            base_width=config.base_width,
            embedding_dim=config.embedding_dim,
        )
        self.teacher = make_teacher(self.student)
        self.optimizer = torch.optim.SGD(
            self.student.parameters(),
            lr=self.base_lr,
            momentum=config.sgd_momentum,
            weight_decay=config.weight_decay,
        )
        self.weights = losses.LossWeights(
            lambda_ppd=config.lambda_ppd,
            lambda_ppc=config.lambda_ppc,
            alpha=config.alpha,
            w_lproto=config.w_lproto,
            w_ulproto=config.w_ulproto,
        )
        self.labeled_bank: prototypes.PrototypeBank | None = None
        self.unlabeled_bank: prototypes.PrototypeBank | None = None
        if use_pda:
            self.labeled_bank = prototypes.PrototypeBank(
                dataset.num_classes,
                config.prototypes_per_class,
                config.embedding_dim,
                config.prototype_momentum,
            )
            self.unlabeled_bank = prototypes.PrototypeBank(
                dataset.num_classes,
                config.prototypes_per_class,
                config.embedding_dim,
                config.prototype_momentum,
            )
        self.history: list[dict[str, float]] = []

    # -- state ---------------------------------------------------------------

    def init_student_from(self, state_dict: dict) -> None:
        """Stage-2 contract: student and teacher both start from a trained student."""
        self.student.load_state_dict(state_dict)
        self.teacher.load_state_dict(state_dict)

    @property
    def epoch(self) -> int:
        return self.step_count // self.steps_per_epoch

    @property
    def prototypes_active(self) -> bool:
        if not self.use_pda:
            return False
        if self.epoch < self.config.prototype_warmup_epochs:
            return False
        return self.labeled_bank.fully_initialized and self.unlabeled_bank.fully_initialized

    def current_lr(self) -> float:
        return poly_lr(self.base_lr, self.step_count, self.total_steps, self.config.poly_power)

    # -- one step ------------------------------------------------------------

    def step(self) -> dict[str, float]:
        cfg = self.config
        records = sample_batch(self.dataset, cfg.batch_size, self.rng)
        specs = [
            augment.sample_weak_spec(self.rng, cfg.weak_max_angle, cfg.weak_scale_range)
            for _ in records
        ]
        workers = _num_workers()
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                weak = list(pool.map(augment.weak_augment, records, specs))
        else:
            weak = [augment.weak_augment(r, s) for r, s in zip(records, specs)]
        partials = [r.partial_label for r in weak]
        images = torch.from_numpy(np.stack([r.image for r in weak])).float().unsqueeze(1)

        views: list[list[augment.StrongView]] = []
        if self.use_cda and self.epoch >= self.strong_warmup_epochs:
            pseudos = teacher_mod.teacher_step(
                self.teacher, images, partials, cfg.tau, cfg.pseudo_conflict
            )
            views = augment.strong_views(weak, pseudos, cfg.strong_views, self.rng)

        self.student.train()
        _, weak_probs = self.student(images)
        targets, valid = batch_binary_targets(partials, self.dataset.num_classes)
        loss_weak = losses.masked_bce(weak_probs, targets.to(weak_probs.dtype), valid)

        proto_on = self.prototypes_active
        view_losses: list[torch.Tensor] = []
        view_embs: list[torch.Tensor] = []
        comp_sums = {"linear": 0.0, "lproto": 0.0, "ulproto": 0.0, "ppd": 0.0, "ppc": 0.0}
        for view in views:
            v_images = torch.from_numpy(np.stack([s.image for s in view])).float().unsqueeze(1)
            v_pseudo = torch.from_numpy(np.stack([s.pseudo for s in view]).astype(np.int64))
            emb, probs = self.student(v_images)
            loss_v, comps = losses.strong_view_loss(
                probs,
                emb if proto_on else None,
                v_pseudo,
                self.labeled_bank if proto_on else None,
                self.unlabeled_bank if proto_on else None,
                self.weights,
            )
            view_losses.append(loss_v)
            view_embs.append(emb.detach())
            for key in comp_sums:
                comp_sums[key] += comps[key]
        total = losses.total_loss(loss_weak, view_losses)

        if not torch.isfinite(total):
            self._dump_batch(weak, views)
            raise TrainingDivergedError(f"non-finite loss at step {self.step_count}")

        lr = self.current_lr()
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()

        if self.use_pda:
            self._update_banks(views, view_embs)
        ema_update(self.student, self.teacher, cfg.ema_momentum)

        n_views = max(1, len(views))
        row = {
            "step": float(self.step_count),
            "L_pbce_weak": float(loss_weak.detach()),
            "L_linear_s": comp_sums["linear"] / n_views,
            "L_lproto": comp_sums["lproto"] / n_views,
            "L_ulproto": comp_sums["ulproto"] / n_views,
            "L_ppd": comp_sums["ppd"] / n_views,
            "L_ppc": comp_sums["ppc"] / n_views,
        }
        row["total"] = float(total.detach())
        self.history.append(row)
        self.step_count += 1
        return row

    def _update_banks(
        self, views: list[list[augment.StrongView]], view_embs: list[torch.Tensor]
    ) -> None:
        for view, emb in zip(views, view_embs):
            partial = np.stack([s.partial for s in view])
            pseudo = np.stack([s.pseudo for s in view])
            flat_emb = emb.permute(0, 2, 3, 1).reshape(-1, emb.shape[1])
            labeled_targets = prototypes.build_labeled_bank_inputs(partial, pseudo).reshape(-1)
            unlabeled_targets = prototypes.build_unlabeled_bank_inputs(partial, pseudo).reshape(-1)
            prototypes.update_bank(self.labeled_bank, flat_emb, labeled_targets, self.bank_rng)
            prototypes.update_bank(self.unlabeled_bank, flat_emb, unlabeled_targets, self.bank_rng)
            prototypes.copy_background(self.labeled_bank, self.unlabeled_bank)

    def _dump_batch(self, weak, views) -> None:
        if self.dump_dir is None:
            return
        self.dump_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "weak_images": np.stack([r.image for r in weak]),
            "weak_partials": np.stack([r.partial_label.classes for r in weak]),
        }
        for vi, view in enumerate(views):
            payload[f"view{vi}_images"] = np.stack([s.image for s in view])
            payload[f"view{vi}_pseudo"] = np.stack([s.pseudo for s in view])
        np.savez(self.dump_dir / f"nan_dump_step{self.step_count}.npz", **payload)

    def run(self) -> None:
        while self.step_count < self.total_steps:
            self.step()

    # -- serialization ---------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "num_classes": self.dataset.num_classes,
            "image_size": list(self.dataset.image_size),
            "use_cda": self.use_cda,
            "use_pda": self.use_pda,
            "epochs": self.epochs,
            "strong_warmup_epochs": self.strong_warmup_epochs,
            "step_count": self.step_count,
            "student": self.student.state_dict(),
            "teacher": self.teacher.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "labeled_bank": self.labeled_bank.state_dict() if self.labeled_bank else None,
            "unlabeled_bank": self.unlabeled_bank.state_dict() if self.unlabeled_bank else None,
            "numpy_rng": self.rng.bit_generator.state,
            "bank_rng": self.bank_rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        }

    def load_state_dict(self, state: dict) -> None:
        if state.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {state.get('format_version')}")
        self.step_count = state["step_count"]
        self.student.load_state_dict(state["student"])
        self.teacher.load_state_dict(state["teacher"])
        self.optimizer.load_state_dict(state["optimizer"])
        if state["labeled_bank"] is not None:
            self.labeled_bank = prototypes.PrototypeBank.from_state_dict(state["labeled_bank"])
        if state["unlabeled_bank"] is not None:
            self.unlabeled_bank = prototypes.PrototypeBank.from_state_dict(state["unlabeled_bank"])
        self.rng.bit_generator.state = state["numpy_rng"]
        self.bank_rng.bit_generator.state = state["bank_rng"]
        torch.set_rng_state(state["torch_rng"])


def save_checkpoint(loop: TrainingLoop, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(loop.state_dict(), path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    state = torch.load(path, weights_only=False)
    if state.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {state.get('format_version')}")
    return state


def resume_loop(state: dict, dataset: SampleDataset, dump_dir: Path | None = None) -> TrainingLoop:
    """Rebuild a loop from a checkpoint; continues bit-exactly."""
    cfg = TrainConfig.from_dict(state["config"])
    loop = TrainingLoop(
        cfg,
        dataset,
        state["use_cda"],
        state["use_pda"],
        state["epochs"],
        dump_dir=dump_dir,
        strong_warmup_epochs=state["strong_warmup_epochs"],
    )
    loop.load_state_dict(state)
    return loop


def build_model_from_checkpoint(state: dict, which: str = "student") -> UNet:
    cfg = TrainConfig.from_dict(state["config"])
    model = UNet(
        num_classes=state["num_classes"],
        depth=cfg.depth,
        base_width=cfg.base_width,
        embedding_dim=cfg.embedding_dim,
    )
    model.load_state_dict(state[which])
    model.eval()
    return model


def _write_metrics_csv(history: list[dict[str, float]], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in history:
            writer.writerow(
                [int(row["step"])] + [repr(row[c]) for c in METRIC_COLUMNS[1:]]
            )


# ---------------------------------------------------------------------------
# Stage drivers
# ---------------------------------------------------------------------------


def train_stage1(
    config: TrainConfig,
    dataset: SampleDataset,
    out_dir: str | Path,
    use_cda: bool = True,
) -> Path:
    """Train the linear classifier (with cross-set mixing unless disabled)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    loop = TrainingLoop(
        config, dataset, use_cda=use_cda, use_pda=False, epochs=config.stage1_epochs, dump_dir=out
    )
    loop.run()
    _write_metrics_csv(loop.history, out / "metrics_stage1.csv")
    _write_metrics_csv(loop.history, out / "metrics.csv")
    return save_checkpoint(loop, out / "ckpt_stage1.bin")


def train_stage2(
    config: TrainConfig,
    dataset: SampleDataset,
    stage1_ckpt: str | Path,
    out_dir: str | Path,
) -> Path:
    """Add the prototype classifiers, starting student and teacher from stage 1."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = load_checkpoint(stage1_ckpt)
    # the stage-1 student already yields usable pseudo-labels: no strong warm-up
    loop = TrainingLoop(
        config,
        dataset,
        use_cda=True,
        use_pda=True,
        epochs=config.stage2_epochs,
        dump_dir=out,
        strong_warmup_epochs=0,
    )
    loop.init_student_from(state["student"])
    loop.run()
    _write_metrics_csv(loop.history, out / "metrics_stage2.csv")
    _write_metrics_csv(loop.history, out / "metrics.csv")
    return save_checkpoint(loop, out / "ckpt_stage2.bin")


def train_both(config: TrainConfig, dataset: SampleDataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    ckpt1 = train_stage1(config, dataset, out)
    ckpt2 = train_stage2(config, dataset, ckpt1, out)
    merged = []
    for name in ("metrics_stage1.csv", "metrics_stage2.csv"):
        with open(out / name) as fh:
            rows = list(csv.reader(fh))[1:]
        merged.extend(rows)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for i, row in enumerate(merged):
            writer.writerow([i] + row[1:])
    return ckpt2


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = ("baseline", "cda", "full")


@dataclass
class AblationRow:
    name: str
    report: MetricReport
    variance: FeatureVariance


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def to_dict(self) -> dict:
        return {
            "rows": [
                {
                    "name": r.name,
                    "metrics": r.report.to_dict(),
                    "variance": {
                        "intra": {str(k): v for k, v in r.variance.intra.items()},
                        "mean_intra": r.variance.mean_intra,
                        "inter": r.variance.inter,
                        "ratio": r.variance.ratio,
                    },
                }
                for r in self.rows
            ]
        }

    def write_csv(self, path: str | Path, num_classes: int) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["method"]
            header += [f"dice_{c}" for c in range(1, num_classes + 1)] + ["dice_mean"]
            header += [f"hd_{c}" for c in range(1, num_classes + 1)] + ["hd_mean"]
            header += ["variance_ratio"]
            writer.writerow(header)
            for row in self.rows:
                cells = [row.name]
                cells += [repr(row.report.per_class[c].dice) for c in range(1, num_classes + 1)]
                cells += [repr(row.report.mean_dice)]
                cells += [repr(row.report.per_class[c].hd) for c in range(1, num_classes + 1)]
                cells += [repr(row.report.mean_hd)]
                cells += [repr(row.variance.ratio)]
                writer.writerow(cells)


def train_variant(
    variant: str, config: TrainConfig, dataset: SampleDataset, out_dir: str | Path
) -> Path:
    """Train one ablation variant on a fixed total epoch budget.

    baseline: partial BCE on weak views only; cda: cross-set mixing for the
    whole budget; full: stage 1 then stage 2. All use stage1+stage2 epochs in
    total so the comparison is budget-matched.
    """
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"variant must be one of {ABLATION_VARIANTS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if variant == "full":
        return train_both(config, dataset, out)
    budget = config.stage1_epochs + config.stage2_epochs
    loop = TrainingLoop(
        config,
        dataset,
        use_cda=(variant == "cda"),
        use_pda=False,
        epochs=budget,
        dump_dir=out,
    )
    loop.run()
    _write_metrics_csv(loop.history, out / "metrics.csv")
    return save_checkpoint(loop, out / f"ckpt_{variant}.bin")


def run_ablation(
    config: TrainConfig,
    train_dataset: SampleDataset,
    test_dataset: SampleDataset,
    out_dir: str | Path,
) -> AblationReport:
    """Train baseline / +CDA / full on identical seed and data; score on held-out data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in ABLATION_VARIANTS:
        ckpt_path = train_variant(variant, config, train_dataset, out / variant)
        state = load_checkpoint(ckpt_path)
        model = build_model_from_checkpoint(state, which=config.eval_model)
        report = evaluate_model(model, test_dataset, config.tau)
        variance = embedding_variance(model, test_dataset)
        rows.append(AblationRow(name=variant, report=report, variance=variance))
    ablation = AblationReport(rows=rows)
    ablation.write_csv(out / "ablation.csv", train_dataset.num_classes)
    (out / "ablation.json").write_text(json.dumps(ablation.to_dict(), indent=2) + "\n")
    return ablation
