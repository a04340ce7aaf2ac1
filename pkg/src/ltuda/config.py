"""Training configuration: JSON files with nested keys, dotted-path overrides, defaults.

An empty or absent config resolves to the stock hyperparameters (threshold
0.5, 2 strong views, 5 prototypes per class, momentum 0.999, prototype-loss
weights 0.1 / 0.001 / 0.01, SGD at 1e-3 with poly(0.9) decay). Unknown keys
are rejected; the fully resolved config is echoed into every run directory.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid, unknown, or out-of-range configuration values."""


DEFAULTS: dict = {
    "seed": 7,
    "tau": 0.5,
    "batch_size": 4,
    "stage1_epochs": 40,
    "stage2_epochs": 40,
    "optim": {
        "lr": 1e-3,
        "stage2_lr": None,  # null -> same as lr
        "poly_power": 0.9,
        "momentum": 0.9,
        "weight_decay": 1e-4,
    },
    "ema": {"momentum": 0.999},
    "model": {"depth": 4, "base_width": 16, "embedding_dim": 64},
    "aug": {
        "weak": {"max_angle": 20.0, "scale_range": [0.9, 1.1]},
        # warmup_epochs delays the strong-view loss in fresh-start training
        # until the teacher produces usable pseudo-labels (0 disables).
        "strong": {"views": 2, "placement": "same", "warmup_epochs": 0},
    },
    "prototypes": {"per_class": 5, "momentum": 0.999, "warmup_epochs": 1},
    "loss": {
        "alpha": 0.1,
        "lambda_ppd": 0.001,
        "lambda_ppc": 0.01,
        "w_lproto": 1.0,
        "w_ulproto": 1.0,
    },
    "pseudo": {"conflict": "nextbest"},
    "eval": {"model": "student"},
}


@dataclass
class TrainConfig:
    seed: int = 7
    tau: float = 0.5
    batch_size: int = 4
    stage1_epochs: int = 40
    stage2_epochs: int = 40
    lr: float = 1e-3
    stage2_lr: float | None = None
    poly_power: float = 0.9
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    ema_momentum: float = 0.999
    depth: int = 4
    base_width: int = 16
    embedding_dim: int = 64
    weak_max_angle: float = 20.0
    weak_scale_range: tuple[float, float] = (0.9, 1.1)
    strong_views: int = 2
    strong_placement: str = "same"
    strong_warmup_epochs: int = 0
    prototypes_per_class: int = 5
    prototype_momentum: float = 0.999
    prototype_warmup_epochs: int = 1
    alpha: float = 0.1
    lambda_ppd: float = 0.001
    lambda_ppc: float = 0.01
    w_lproto: float = 1.0
    w_ulproto: float = 1.0
    pseudo_conflict: str = "nextbest"
    eval_model: str = "student"
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls(
            seed=int(d["seed"]),
            tau=float(d["tau"]),
            batch_size=int(d["batch_size"]),
            stage1_epochs=int(d["stage1_epochs"]),
            stage2_epochs=int(d["stage2_epochs"]),
            lr=float(d["optim"]["lr"]),
            stage2_lr=None if d["optim"]["stage2_lr"] is None else float(d["optim"]["stage2_lr"]),
            poly_power=float(d["optim"]["poly_power"]),
            sgd_momentum=float(d["optim"]["momentum"]),
            weight_decay=float(d["optim"]["weight_decay"]),
            ema_momentum=float(d["ema"]["momentum"]),
            depth=int(d["model"]["depth"]),
            base_width=int(d["model"]["base_width"]),
            embedding_dim=int(d["model"]["embedding_dim"]),
            weak_max_angle=float(d["aug"]["weak"]["max_angle"]),
            weak_scale_range=(
                float(d["aug"]["weak"]["scale_range"][0]),
                float(d["aug"]["weak"]["scale_range"][1]),
            ),
            strong_views=int(d["aug"]["strong"]["views"]),
            strong_placement=str(d["aug"]["strong"]["placement"]),
            strong_warmup_epochs=int(d["aug"]["strong"]["warmup_epochs"]),
            prototypes_per_class=int(d["prototypes"]["per_class"]),
            prototype_momentum=float(d["prototypes"]["momentum"]),
            prototype_warmup_epochs=int(d["prototypes"]["warmup_epochs"]),
            alpha=float(d["loss"]["alpha"]),
            lambda_ppd=float(d["loss"]["lambda_ppd"]),
            lambda_ppc=float(d["loss"]["lambda_ppc"]),
            w_lproto=float(d["loss"]["w_lproto"]),
            w_ulproto=float(d["loss"]["w_ulproto"]),
            pseudo_conflict=str(d["pseudo"]["conflict"]),
            eval_model=str(d["eval"]["model"]),
            raw=d,
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        checks = [
            (0.0 < self.tau < 1.0, "tau must be in (0, 1)"),
            (self.batch_size >= 2, "batch_size must be >= 2"),
            (self.stage1_epochs >= 1, "stage1_epochs must be >= 1"),
            (self.stage2_epochs >= 1, "stage2_epochs must be >= 1"),
            (self.lr > 0, "optim.lr must be > 0"),
            (self.stage2_lr is None or self.stage2_lr > 0, "optim.stage2_lr must be > 0"),
            (self.poly_power > 0, "optim.poly_power must be > 0"),
            (0.0 <= self.ema_momentum <= 1.0, "ema.momentum must be in [0, 1]"),
            (self.depth >= 1, "model.depth must be >= 1"),
            (self.base_width >= 1, "model.base_width must be >= 1"),
            (self.embedding_dim >= 1, "model.embedding_dim must be >= 1"),
            (self.weak_max_angle >= 0, "aug.weak.max_angle must be >= 0"),
            (
                0 < self.weak_scale_range[0] <= self.weak_scale_range[1],
                "aug.weak.scale_range must be an increasing positive pair",
            ),
            (self.strong_views >= 1, "aug.strong.views must be >= 1"),
            (self.strong_warmup_epochs >= 0, "aug.strong.warmup_epochs must be >= 0"),
            (
                self.strong_placement in ("same", "random", "prior"),
                "aug.strong.placement must be same|random|prior",
            ),
            (self.prototypes_per_class >= 1, "prototypes.per_class must be >= 1"),
            (
                0.0 <= self.prototype_momentum <= 1.0,
                "prototypes.momentum must be in [0, 1]",
            ),
            (self.prototype_warmup_epochs >= 0, "prototypes.warmup_epochs must be >= 0"),
            (self.alpha > 0, "loss.alpha must be > 0"),
            (self.lambda_ppd >= 0, "loss.lambda_ppd must be >= 0"),
            (self.lambda_ppc >= 0, "loss.lambda_ppc must be >= 0"),
            (self.w_lproto >= 0, "loss.w_lproto must be >= 0"),
            (self.w_ulproto >= 0, "loss.w_ulproto must be >= 0"),
            (
                self.pseudo_conflict in ("nextbest", "background"),
                "pseudo.conflict must be nextbest|background",
            ),
            (self.eval_model in ("student", "teacher"), "eval.model must be student|teacher"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw) if self.raw else copy.deepcopy(DEFAULTS)


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path} expects an object")
            out[key] = _merge(base[key], value, prefix=f"{path}.")
        else:
            out[key] = value
    return out


def _set_dotted(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[parts[-1]] = value


def parse_override(item: str) -> tuple[str, object]:
    """Parse one ``key.path=value`` override; values are JSON, falling back to string."""
    if "=" not in item:
        raise ConfigError(f"override must be key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def parse_config(
    path: str | Path | None = None, overrides: list[str] | None = None
) -> TrainConfig:
    """Resolve a config file plus CLI overrides against the defaults.

    Overrides beat file values; unknown keys anywhere are errors; an empty file
    means "all defaults".
    """
    tree = copy.deepcopy(DEFAULTS)
    if path is not None:
        text = Path(path).read_text().strip()
        if text:
            try:
                loaded = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from e
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path}: config must be a JSON object")
            tree = _merge(tree, loaded)
    for item in overrides or []:
        key, value = parse_override(item)
        _set_dotted(tree, key, value)
    return TrainConfig.from_dict(tree)


def save_config(config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
