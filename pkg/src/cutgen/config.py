"""Run configuration: one structured YAML file with every default
materialized, flag overrides winning, and a resolved sidecar written before
each command so reruns are reproducible from the record alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .attention import RefinementThresholds
from .generation import GenerationConfig
from .losses import LossConfig
from .trainer import TrainConfig
from .types import ValidationError


@dataclass
class RunConfig:
    # data
    dataset_root: str = ""
    layout: str = "mvtec"
    category: str = ""
    out: str = "runs/out"
    k: int | str = 1
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    runs: int = 1
    # generation
    gamma: float = 0.25
    steps: int = 200
    prompt_template: str = "A photo of a [cls] that is damaged"
    anomaly_word: str = "damaged"
    lambda_: float = 10.0
    per_image: int | None = None  # None resolves to 100 (k-shot) or 5 (full-shot)
    include_normals: bool = True
    min_pixels: int = 10
    max_pixels_for_stop: int = 50
    warmup_steps: int = 10
    refine_targets: list[float] = field(default_factory=lambda: [0.05, 0.5, 0.8])
    refine_checkpoints: list[float] = field(default_factory=lambda: [0.25, 0.5, 0.75])
    refine_max_iters: int = 20
    # backbone
    backbone: str = "toy"
    guidance_scale: float = 7.5
    # loss
    beta: float = 0.2
    omega: float = 6.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    # train
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-4
    input_side: int = 512
    temperature: float = 100.0
    resume: bool = False

    def generation(self, seed: int | None = None) -> GenerationConfig:
        return GenerationConfig(
            gamma=self.gamma, steps=self.steps, prompt_template=self.prompt_template,
            anomaly_word=self.anomaly_word, seed=self.seed if seed is None else seed,
            lambda_=self.lambda_, min_pixels=self.min_pixels,
            max_pixels_for_stop=self.max_pixels_for_stop, warmup_steps=self.warmup_steps,
            thresholds=RefinementThresholds(tuple(self.refine_targets),
                                            tuple(self.refine_checkpoints),
                                            self.refine_max_iters),
        )

    def training(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            input_side=self.input_side, seed=self.seed if seed is None else seed,
            temperature=self.temperature,
            loss=LossConfig(beta=self.beta, omega=self.omega,
                            focal_gamma=self.focal_gamma, focal_alpha=self.focal_alpha),
        )

    def resolved_per_image(self) -> int:
        if self.per_image is not None:
            return self.per_image
        return 5 if self.k == "all" else 100


def load_config(path: Path) -> RunConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    known = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**raw)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    for key, value in overrides.items():
        if value is None:
            continue
        if not hasattr(cfg, key):
            raise ValidationError(f"unknown config field {key!r}")
        setattr(cfg, key, value)
    return cfg


def write_sidecar(cfg: RunConfig, out_dir: Path, name: str = "resolved_config.yaml") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(yaml.safe_dump(asdict(cfg), sort_keys=True, default_flow_style=False))
    return path
