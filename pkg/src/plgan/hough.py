"""Modified Hough transform of a confidence map and the parameter-space L1 loss.

Each pixel ``(i, j)`` with confidence ``p`` is mapped to the sinusoid
``p * (i cos(theta_l) + j sin(theta_l))`` sampled at ``theta_l = l * theta_max / M``.
Two variants are provided:

* ``per_pixel``: keeps the ``H x W x M`` tensor of per-pixel sinusoids.
* ``accumulator``: sums the sinusoid mass into an ``R x M`` (rho, theta) grid, with
  linear interpolation between the two nearest rho bins so it stays differentiable.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from functools import lru_cache
from typing import Tuple

import torch


class CoordMode(str, Enum):
    RAW = "raw"
    CENTERED_NORMALIZED = "centered_normalized"


class HoughVariant(str, Enum):
    PER_PIXEL = "per_pixel"
    ACCUMULATOR = "accumulator"


@dataclass(frozen=True)
class HoughConfig:
    M: int = 180
    theta_max: float = math.pi
    coord_mode: CoordMode = CoordMode.CENTERED_NORMALIZED
    variant: HoughVariant = HoughVariant.PER_PIXEL

    def __post_init__(self):
        object.__setattr__(self, "coord_mode", CoordMode(self.coord_mode))
        object.__setattr__(self, "variant", HoughVariant(self.variant))
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if not 0 < self.theta_max <= math.pi:
            raise ValueError(f"theta_max must lie in (0, pi], got {self.theta_max}")

    @property
    def thetas(self) -> torch.Tensor:
        return torch.arange(self.M, dtype=torch.float64) * (self.theta_max / self.M)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coord_mode"] = self.coord_mode.value
        d["variant"] = self.variant.value
        return d


@dataclass
class HoughTensor:
    values: torch.Tensor  # (..., H, W, M) for per_pixel, (..., R, M) for accumulator
    config: HoughConfig


def _coords(h: int, w: int, mode: CoordMode) -> Tuple[torch.Tensor, torch.Tensor]:
    i = torch.arange(h, dtype=torch.float64)
    j = torch.arange(w, dtype=torch.float64)
    if mode is CoordMode.CENTERED_NORMALIZED:
        half_diag = math.hypot(h, w) / 2
        i = (i - (h - 1) / 2) / half_diag
        j = (j - (w - 1) / 2) / half_diag
    return torch.meshgrid(i, j, indexing="ij")


@lru_cache(maxsize=32)
def _rho_table(h: int, w: int, cfg: HoughConfig) -> torch.Tensor:
    """rho(i, j, theta_l) as an (H, W, M) float64 table."""
    ii, jj = _coords(h, w, cfg.coord_mode)
    th = cfg.thetas
    return ii[..., None] * torch.cos(th) + jj[..., None] * torch.sin(th)


@lru_cache(maxsize=32)
def _abs_rho_weight(h: int, w: int, cfg: HoughConfig) -> torch.Tensor:
    """mean_l |rho(i, j, theta_l)| as an (H, W) table."""
    return _rho_table(h, w, cfg).abs().mean(dim=-1)


def rho_bound(h: int, w: int, mode: CoordMode | str) -> float:
    """Largest possible |rho| over the pixel grid."""
    if CoordMode(mode) is CoordMode.CENTERED_NORMALIZED:
        return 1.0
    return math.hypot(h - 1, w - 1)


@lru_cache(maxsize=16)
def _accumulator_plan(h: int, w: int, cfg: HoughConfig):
    rho = _rho_table(h, w, cfg)
    n_bins = max(2, math.ceil(math.hypot(h, w)))
    bound = rho_bound(h, w, cfg.coord_mode)
    pos = (rho + bound) / (2 * bound) * (n_bins - 1) if bound > 0 else torch.zeros_like(rho)
    lo = pos.floor().clamp(0, n_bins - 2)
    frac = (pos - lo).clamp(0, 1)
    lo = lo.long()
    l_idx = torch.arange(cfg.M)
    flat_lo = (lo * cfg.M + l_idx).reshape(-1)
    flat_hi = ((lo + 1) * cfg.M + l_idx).reshape(-1)
    return n_bins, flat_lo, flat_hi, (1 - frac).reshape(-1), frac.reshape(-1)


def _check_prob(p: torch.Tensor) -> None:
    if p.dim() < 2:
        raise ValueError(f"confidence map must have at least 2 dims, got {tuple(p.shape)}")
    with torch.no_grad():
        if p.numel() and (p.min() < 0 or p.max() > 1):
            raise ValueError("confidence values must lie in [0, 1]")


def hough_map(p: torch.Tensor, cfg: HoughConfig = HoughConfig()) -> HoughTensor:
    """Modified Hough transform of a confidence map ``p`` of shape ``(..., H, W)``."""
    p = torch.as_tensor(p)
    if not p.is_floating_point():
        p = p.to(torch.float64)
    _check_prob(p)
    h, w = p.shape[-2:]
    rho = _rho_table(h, w, cfg).to(device=p.device, dtype=p.dtype)
    if cfg.variant is HoughVariant.PER_PIXEL:
        return HoughTensor(p[..., None] * rho, cfg)

    n_bins, flat_lo, flat_hi, w_lo, w_hi = _accumulator_plan(h, w, cfg)
    lead = p.shape[:-2]
    pm = p.reshape(-1, h * w, 1).expand(-1, h * w, cfg.M).reshape(-1, h * w * cfg.M)
    out = p.new_zeros(pm.shape[0], n_bins * cfg.M)
    out.index_add_(1, flat_lo.to(p.device), pm * w_lo.to(p))
    out.index_add_(1, flat_hi.to(p.device), pm * w_hi.to(p))
    return HoughTensor(out.reshape(*lead, n_bins, cfg.M), cfg)


def hough_loss(gt: torch.Tensor, pred: torch.Tensor, cfg: HoughConfig = HoughConfig()) -> torch.Tensor:
    """Mean absolute difference between the Hough transforms of ``gt`` and ``pred``.

    Batched inputs ``(..., H, W)`` are averaged over every leading dim too.
    """
    gt = torch.as_tensor(gt).to(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {tuple(gt.shape)} vs pred {tuple(pred.shape)}")
    _check_prob(gt)
    _check_prob(pred)
    if cfg.variant is HoughVariant.PER_PIXEL:
        # |(g - p) * rho| = |g - p| * |rho|, so the per-angle mean folds into a
        # per-pixel weight and the H x W x M tensor is never materialised.
        h, w = pred.shape[-2:]
        weight = _abs_rho_weight(h, w, cfg).to(device=pred.device, dtype=pred.dtype)
        return ((gt - pred).abs() * weight).mean()
    return (hough_map(gt, cfg).values - hough_map(pred, cfg).values).abs().mean()
