"""Adapter training on generated image-annotation pairs with the
focal + omega * (BCE + adapted Dice) objective, memory-bank construction
from the k-shot normals, and evaluation into metric reports.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import KShotSample, DatasetSpec, LoadedSample, load_image, load_split
from .losses import LossConfig, adapted_dice_loss, bce_loss, focal_loss
from .metrics import EvalReport, auroc, max_f1, pro, single_run_report
from .types import AnnotatedSample, ValidationError, derive_seed
from .vlad import (DEFAULT_TEMPERATURE, FeatureAdapter, FeatureExtractor, MemoryBank,
                   _normalize, detect, format_prompts)

log = logging.getLogger(__name__)

Scorer = Callable[[LoadedSample], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-4
    input_side: int = 512
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.lr < 0:
            raise ValidationError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries the last good adapter and log."""

    def __init__(self, message: str, adapter: FeatureAdapter, log_rows: list[dict]):
        super().__init__(message)
        self.adapter = adapter
        self.log_rows = log_rows


def resize_pixels(pixels: np.ndarray, side: int) -> np.ndarray:
    if pixels.shape[0] == side and pixels.shape[1] == side:
        return pixels
    t = torch.as_tensor(np.ascontiguousarray(pixels), dtype=torch.float32).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False)[0]
    return out.permute(1, 2, 0).numpy().astype(np.float64)


def _resize_map(m: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    if m.shape == hw:
        return m
    t = torch.as_tensor(m, dtype=torch.float32)[None, None]
    return F.interpolate(t, size=hw, mode="bilinear", align_corners=False)[0, 0].numpy()


def as_training_samples(annotated: Sequence[AnnotatedSample]) -> list[LoadedSample]:
    return [LoadedSample(image=s.image, y_img=s.y_img, mask=s.y_pix) for s in annotated]


def _stratified_batches(y_imgs: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffled batches; any batch without a normal gets one appended (cycled)."""
    order = rng.permutation(len(y_imgs))
    batches = [list(order[i:i + batch_size]) for i in range(0, len(order), batch_size)]
    normals = [int(i) for i in rng.permutation(np.nonzero(y_imgs == 0)[0])]
    if normals:
        cursor = 0
        for batch in batches:
            if not any(y_imgs[i] == 0 for i in batch):
                batch.append(normals[cursor % len(normals)])
                cursor += 1
    return batches


def _pixel_prediction(feats: dict[str, torch.Tensor], adapter: FeatureAdapter,
                      f_text: torch.Tensor, hw: tuple[int, int], temperature: float) -> torch.Tensor:
    """Mean over stages of the per-patch abnormal softmax, upsampled to hw."""
    ft = _normalize(f_text)
    total = None
    for stage in sorted(feats):
        adapted = adapter(stage, feats[stage])
        logits = temperature * (_normalize(adapted) @ ft.T)
        abn = torch.softmax(logits, dim=-1)[..., 1]
        up = F.interpolate(abn[None, None], size=hw, mode="bilinear", align_corners=False)[0, 0]
        total = up if total is None else total + up
    return total / len(feats)


def cosine_lr(base: float, epoch: int, epochs: int) -> float:
    """Cosine annealing from base to 0 across the run (closed form)."""
    if epochs <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))


def train(samples: Sequence[LoadedSample], extractor: FeatureExtractor,
          cfg: TrainConfig = TrainConfig(),
          state_path=None, resume: bool = False) -> tuple[FeatureAdapter, list[dict]]:
    """Train the feature adapter; returns it with the per-epoch loss log.

    The extractor is frozen: its tokens are computed once up front. The
    image-level training prediction is the max of the pixel probability map,
    so both loss terms flow through the adapter. When state_path is given,
    full training state is saved each epoch; resume=True continues from it
    and reproduces the uninterrupted run bit for bit.
    """
    samples = [s for s in samples]
    y_imgs = np.array([s.y_img for s in samples])
    if len(np.unique(y_imgs)) < 2:
        raise ValidationError("training set must contain both normal and anomalous samples")

    side = cfg.input_side
    hw = (side, side)
    feats, targets, texts = [], [], []
    f_text_cache: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for s in samples:
            px = resize_pixels(s.image.pixels, side)
            feats.append({st: extractor.patch_tokens(px, st) for st in extractor.stages})
            targets.append(torch.as_tensor(_resize_map(s.mask, hw), dtype=torch.float32))
            cat = s.image.category
            if cat not in f_text_cache:
                f_text_cache[cat] = extractor.text_embed(*format_prompts(cat))
            texts.append(f_text_cache[cat])

    adapter = FeatureAdapter(extractor.stage_dims, extractor.embed_dim, seed=cfg.seed,
                             neutral_dims=getattr(extractor, "neutral_dims", ()))
    opt = torch.optim.Adam(adapter.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(derive_seed(cfg.seed, "train-batches"))

    rows: list[dict] = []
    start_epoch = 0
    if resume and state_path is not None and Path(state_path).exists():
        state = torch.load(state_path, weights_only=False)
        adapter.load_state_dict(state["adapter"])
        opt.load_state_dict(state["optimizer"])
        rng.bit_generator.state = state["rng"]
        rows = state["rows"]
        start_epoch = state["next_epoch"]
        log.info("resuming training at epoch %d", start_epoch)

    last_good = {k: v.clone() for k, v in adapter.state_dict().items()}
    for epoch in range(start_epoch, cfg.epochs):
        lr_now = cosine_lr(cfg.lr, epoch, cfg.epochs)
        for group in opt.param_groups:
            group["lr"] = lr_now
        sums = {"focal": 0.0, "bce": 0.0, "dice": 0.0}
        n_seen = 0
        for batch in _stratified_batches(y_imgs, cfg.batch_size, rng):
            opt.zero_grad()
            batch_terms = []
            for i in batch:
                yhat_pix = _pixel_prediction(feats[i], adapter, texts[i], hw, cfg.temperature)
                yhat_img = yhat_pix.max()
                f = focal_loss(int(y_imgs[i]), yhat_img, cfg.loss.focal_gamma, cfg.loss.focal_alpha)
                b = bce_loss(targets[i], yhat_pix)
                d = adapted_dice_loss(targets[i], yhat_pix, cfg.loss.beta)
                batch_terms.append((f, b, d))
            focal_m = torch.stack([t[0] for t in batch_terms]).mean()
            bce_m = torch.stack([t[1] for t in batch_terms]).mean()
            dice_m = torch.stack([t[2] for t in batch_terms]).mean()
            loss = focal_m + cfg.loss.omega * (bce_m + dice_m)
            if not torch.isfinite(loss):
                adapter.load_state_dict(last_good)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", adapter, rows)
            loss.backward()
            opt.step()
            k = len(batch)
            sums["focal"] += float(focal_m.detach()) * k
            sums["bce"] += float(bce_m.detach()) * k
            sums["dice"] += float(dice_m.detach()) * k
            n_seen += k
        focal_e, bce_e, dice_e = (sums[k] / n_seen for k in ("focal", "bce", "dice"))
        rows.append({"epoch": epoch, "lr": lr_now, "focal": focal_e, "bce": bce_e,
                     "dice": dice_e,
                     "total": focal_e + cfg.loss.omega * (bce_e + dice_e)})
        last_good = {k: v.clone() for k, v in adapter.state_dict().items()}
        if state_path is not None:
            Path(state_path).parent.mkdir(parents=True, exist_ok=True)
            torch.save({"adapter": adapter.state_dict(), "optimizer": opt.state_dict(),
                        "rng": rng.bit_generator.state, "rows": rows,
                        "next_epoch": epoch + 1}, state_path)
    return adapter, rows


def build_bank(normals: KShotSample | Sequence[np.ndarray], extractor: FeatureExtractor,
               adapter: FeatureAdapter, input_side: int | None = None) -> MemoryBank:
    """Adapted, normalized patch tokens of the k normals, stacked per stage."""
    if isinstance(normals, KShotSample):
        images = [load_image(p) for p in normals.paths]
    else:
        images = list(normals)
    if not images:
        raise ValidationError("no normal images to build a bank from")
    per_stage: dict[str, list[torch.Tensor]] = {st: [] for st in extractor.stages}
    with torch.no_grad():
        for px in images:
            if input_side is not None:
                px = resize_pixels(px, input_side)
            for st in extractor.stages:
                tok = adapter(st, extractor.patch_tokens(px, st))
                per_stage[st].append(_normalize(tok.reshape(-1, tok.shape[-1])))
    return MemoryBank(banks={st: torch.cat(rows) for st, rows in per_stage.items()})


def make_scorer(extractor: FeatureExtractor, adapter: FeatureAdapter,
                bank: MemoryBank | None, temperature: float = DEFAULT_TEMPERATURE,
                input_side: int | None = None) -> Scorer:
    f_text_cache: dict[str, torch.Tensor] = {}

    def scorer(sample: LoadedSample) -> tuple[float, np.ndarray]:
        cat = sample.image.category
        if cat not in f_text_cache:
            f_text_cache[cat] = extractor.text_embed(*format_prompts(cat))
        px = sample.image.pixels
        native_hw = px.shape[:2]
        if input_side is not None:
            px = resize_pixels(px, input_side)
        res = detect(px, extractor, adapter, f_text_cache[cat], bank, temperature)
        return res.s_img, _resize_map(res.m_pix, native_hw)

    return scorer


def evaluate(scorer: Scorer, data: DatasetSpec | Sequence[LoadedSample],
             setup: str = "eval", seed: int = 0) -> EvalReport:
    """Score every (non-auxiliary) test sample and compute all five metrics
    per category."""
    samples = list(load_split(data)) if isinstance(data, DatasetSpec) else list(data)
    samples = [s for s in samples if not s.auxiliary]
    if not samples:
        raise ValidationError("no samples to evaluate")
    by_cat: dict[str, list[LoadedSample]] = {}
    for s in samples:
        by_cat.setdefault(s.image.category, []).append(s)

    values: dict[str, dict[str, float]] = {}
    for cat, cat_samples in sorted(by_cat.items()):
        labels, scores, maps, gts = [], [], [], []
        for s in cat_samples:
            s_img, m_pix = scorer(s)
            labels.append(s.y_img)
            scores.append(s_img)
            maps.append(m_pix)
            gts.append(np.asarray(s.mask) > 0.5)
        pix_scores = np.concatenate([m.ravel() for m in maps])
        pix_labels = np.concatenate([g.ravel() for g in gts])
        values[cat] = {
            "I-AUC": auroc(scores, labels),
            "I-F1": max_f1(scores, labels),
            "P-AUC": auroc(pix_scores, pix_labels),
            "P-F1": max_f1(pix_scores, pix_labels),
            "PRO": pro(maps, gts),
        }
    return single_run_report(setup, seed, values)
