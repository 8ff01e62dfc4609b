"""Training objective: focal image loss, pixel BCE, the regularization-
softened Dice loss, and their weighted total. Everything is torch-based and
differentiable; soft probability targets are accepted directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .types import ValidationError

EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.2
    omega: float = 6.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        if self.beta <= 0:
            raise ValidationError("beta must be > 0")
        if self.omega < 0:
            raise ValidationError("omega must be >= 0")


def _as_t(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)


def dice_coeff(y, yhat) -> torch.Tensor:
    """Soft Dice with +1 smoothing: (2 sum(y*yhat) + 1) / (sum y + sum yhat + 1)."""
    y, yhat = _as_t(y), _as_t(yhat)
    if y.shape != yhat.shape:
        raise ValidationError(f"shape mismatch: {tuple(y.shape)} vs {tuple(yhat.shape)}")
    return (2.0 * (y * yhat).sum() + 1.0) / (y.sum() + yhat.sum() + 1.0)


def adapted_from_dice(d, beta: float) -> torch.Tensor:
    return 1.0 - d / (d + beta)


def adapted_dice_loss(y, yhat, beta: float = 0.2) -> torch.Tensor:
    """1 - Dice/(Dice + beta): penalizes imprecise-but-overlapping soft
    predictions less than plain Dice when beta is small."""
    if beta <= 0:
        raise ValidationError("beta must be > 0")
    return adapted_from_dice(dice_coeff(y, yhat), beta)


def focal_loss(y_img: int, p, gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """Binary focal loss -alpha (1 - p_t)^gamma log p_t on the abnormal probability p."""
    p = _as_t(p).clamp(EPS, 1.0 - EPS)
    p_t = p if y_img == 1 else 1.0 - p
    return -alpha * (1.0 - p_t) ** gamma * torch.log(p_t)


def bce_loss(y, yhat) -> torch.Tensor:
    """Mean-reduced binary cross-entropy with soft targets."""
    y, yhat = _as_t(y), _as_t(yhat)
    if y.shape != yhat.shape:
        raise ValidationError(f"shape mismatch: {tuple(y.shape)} vs {tuple(yhat.shape)}")
    yhat = yhat.clamp(EPS, 1.0 - EPS)
    return -(y * torch.log(yhat) + (1.0 - y) * torch.log(1.0 - yhat)).mean()


def total_loss(y_img: int, p_img, y_pix, m_pix, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """focal + omega * (pixel BCE + adapted Dice)."""
    return (
        focal_loss(y_img, p_img, cfg.focal_gamma, cfg.focal_alpha)
        + cfg.omega * (bce_loss(y_pix, m_pix) + adapted_dice_loss(y_pix, m_pix, cfg.beta))
    )
