"""Adversarial, semantic, geometry-consistency and weighted total objectives."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Dict, Tuple

import math
import torch

from .geometry import TransformKind, apply_transform, invert_transform

EPS = 1e-7


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


@dataclass(frozen=True)
class LossWeights:
    lambda_spl: float = 10.0
    lambda_ht: float = 1.0
    lambda_geo: float = 20.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and non-negative, got {v}")


@dataclass
class LossBreakdown:
    adv: torch.Tensor | float = 0.0
    adv_t: torch.Tensor | float = 0.0
    spl: torch.Tensor | float = 0.0
    spl_t: torch.Tensor | float = 0.0
    ht: torch.Tensor | float = 0.0
    ht_t: torch.Tensor | float = 0.0
    pgeo: torch.Tensor | float = 0.0
    sgeo: torch.Tensor | float = 0.0
    total: torch.Tensor | float = 0.0

    PARTS = ("adv", "adv_t", "spl", "spl_t", "ht", "ht_t", "pgeo", "sgeo")

    def as_floats(self) -> Dict[str, float]:
        return {f.name: _scalar(getattr(self, f.name)) for f in fields(self)}


# --------------------------------------------------------------------------- adversarial

def lsgan_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((real_scores - 1) ** 2).mean() + 0.5 * (fake_scores ** 2).mean()


def lsgan_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((fake_scores - 1) ** 2).mean()


def lsgan_losses(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Least-squares GAN objectives with real -> 1, fake -> 0 targets; both minimised."""
    real_scores = torch.as_tensor(real_scores, dtype=torch.float64) if not torch.is_tensor(real_scores) else real_scores
    fake_scores = torch.as_tensor(fake_scores, dtype=torch.float64) if not torch.is_tensor(fake_scores) else fake_scores
    if real_scores.shape != fake_scores.shape:
        raise ValueError(f"score maps differ in shape: {tuple(real_scores.shape)} vs {tuple(fake_scores.shape)}")
    return lsgan_d_loss(real_scores, fake_scores), lsgan_g_loss(fake_scores)


# --------------------------------------------------------------------------- semantic

def semantic_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy averaged over every pixel; ``pred`` clamped to [eps, 1-eps]."""
    gt = torch.as_tensor(gt).to(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    p = pred.clamp(EPS, 1 - EPS)
    return -(gt * torch.log(p) + (1 - gt) * torch.log1p(-p)).mean()


# --------------------------------------------------------------------------- geometry

def _require_square(x: torch.Tensor) -> None:
    if x.shape[-1] != x.shape[-2]:
        raise ValueError(f"geometry losses need square inputs, got {x.shape[-2]}x{x.shape[-1]}")


def geometry_consistency(out: torch.Tensor, out_t: torch.Tensor, kind: TransformKind | str) -> torch.Tensor:
    """``mean|out - inv(out_t)| + mean|out_t - fwd(out)|`` for precomputed outputs on x and fwd(x)."""
    _require_square(out)
    return (out - invert_transform(out_t, kind)).abs().mean() + (out_t - apply_transform(out, kind)).abs().mean()


def geometry_loss_pl(G: Callable[[torch.Tensor], torch.Tensor], kind: TransformKind | str,
                     image: torch.Tensor) -> torch.Tensor:
    """Geometry consistency of an image-to-image map ``G`` under ``kind``."""
    _require_square(image)
    return geometry_consistency(G(image), G(apply_transform(image, kind)), kind)


def geometry_loss_sem(E_m: Callable, S: Callable, kind: TransformKind | str, image: torch.Tensor) -> torch.Tensor:
    _require_square(image)
    return geometry_consistency(S(E_m(image)), S(E_m(apply_transform(image, kind))), kind)


# --------------------------------------------------------------------------- total

def total_generator_loss(parts: LossBreakdown, w: LossWeights) -> LossBreakdown:
    for name in LossBreakdown.PARTS:
        v = _scalar(getattr(parts, name))
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
    total = (parts.adv + parts.adv_t
             + w.lambda_spl * (parts.spl + parts.spl_t)
             + w.lambda_ht * (parts.ht + parts.ht_t)
             + w.lambda_geo * (parts.pgeo + parts.sgeo))
    return LossBreakdown(**{n: getattr(parts, n) for n in LossBreakdown.PARTS}, total=total)
