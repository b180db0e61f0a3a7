"""Loss stack: partial cross entropy, local coherence, edge-aware smoothness
on the prompt branch; weighted BCE + weighted IoU consistency pulling the
no-prompt prediction toward the detached prompt-branch prediction."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import ScribbleMap
from .decoder import SiameseOutput
from .errors import ShapeError

EPS = 1e-6


@dataclass
class LossConfig:
    sigma_x: float = 3.0  # px, at the downsampled grid
    sigma_c: float = 0.1  # color bandwidth on [0,1] intensities
    window_radius: int = 5
    downsample: int = 4
    smooth_lambda: float = 10.0
    pool_window: int = 31


@dataclass
class LossBreakdown:
    pce: torch.Tensor
    lsc: torch.Tensor
    sl: torch.Tensor
    wbce: torch.Tensor
    wiou: torch.Tensor

    @property
    def scribble_loss(self) -> torch.Tensor:
        return self.pce + self.lsc + self.sl

    @property
    def consistency_loss(self) -> torch.Tensor:
        return self.wbce + self.wiou

    @property
    def total(self) -> torch.Tensor:
        return self.pce + self.lsc + self.sl + self.wbce + self.wiou

    def to_dict(self) -> dict[str, float]:
        return {
            "pce": float(self.pce.detach()),
            "lsc": float(self.lsc.detach()),
            "sl": float(self.sl.detach()),
            "wbce": float(self.wbce.detach()),
            "wiou": float(self.wiou.detach()),
            "total": float(self.total.detach()),
        }


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, ScribbleMap):
        x = x.values
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    return x


def _check_same_hw(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape[:2] != b.shape[:2]:
        raise ShapeError(f"raster shapes disagree: {tuple(a.shape)} vs {tuple(b.shape)}")


def pce(pred: torch.Tensor, scribble) -> torch.Tensor:
    """Cross entropy over labeled pixels only (1=fg, 2=bg, 0 skipped)."""
    s = _as_tensor(scribble)
    _check_same_hw(pred, s)
    labeled = s > 0
    if not labeled.any():
        warnings.warn("pce: scribble has no labeled pixels, returning 0")
        return pred.sum() * 0.0
    p = pred[labeled].clamp(EPS, 1.0 - EPS)
    g = (s[labeled] == 1).to(p.dtype)
    return -(g * p.log() + (1.0 - g) * (1.0 - p).log()).mean()


def lsc(
    pred: torch.Tensor, rgb: torch.Tensor, cfg: LossConfig = LossConfig()
) -> torch.Tensor:
    """Pairwise coherence: color-and-position kernel times |p_i - p_j| over an
    11x11 window, both rasters average-pooled by ``cfg.downsample`` first."""
    rgb = _as_tensor(rgb)
    _check_same_hw(pred, rgb)
    ds = cfg.downsample
    p = F.avg_pool2d(pred[None, None], ds)[0, 0] if ds > 1 else pred
    c = rgb.permute(2, 0, 1)[None]
    c = (F.avg_pool2d(c, ds) if ds > 1 else c)[0]

    h, w = p.shape
    two_sx2 = 2.0 * cfg.sigma_x**2
    two_sc2 = 2.0 * cfg.sigma_c**2
    num = p.new_zeros(())
    count = 0
    r = cfg.window_radius
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            if h - abs(dy) <= 0 or w - abs(dx) <= 0:
                continue
            y0, y1 = max(dy, 0), h + min(dy, 0)
            x0, x1 = max(dx, 0), w + min(dx, 0)
            pa = p[y0:y1, x0:x1]
            pb = p[y0 - dy : y1 - dy, x0 - dx : x1 - dx]
            ca = c[:, y0:y1, x0:x1]
            cb = c[:, y0 - dy : y1 - dy, x0 - dx : x1 - dx]
            w_pos = float(np.exp(-(dy * dy + dx * dx) / two_sx2))
            w_col = torch.exp(-((ca - cb) ** 2).sum(0) / two_sc2)
            num = num + (w_pos * w_col * (pa - pb).abs()).sum()
            count += pa.numel()
    if count == 0:
        return pred.sum() * 0.0
    return num / count


def smoothness(
    pred: torch.Tensor, rgb: torch.Tensor, cfg: LossConfig = LossConfig()
) -> torch.Tensor:
    """Edge-aware first-order smoothness: |dp| * exp(-lambda * |dI|)."""
    rgb = _as_tensor(rgb)
    _check_same_hw(pred, rgb)
    intensity = rgb.mean(-1)
    lam = cfg.smooth_lambda
    total = pred.sum() * 0.0
    count = 0
    if pred.shape[1] > 1:
        dp = (pred[:, 1:] - pred[:, :-1]).abs()
        di = (intensity[:, 1:] - intensity[:, :-1]).abs()
        total = total + (dp * torch.exp(-lam * di)).sum()
        count += dp.numel()
    if pred.shape[0] > 1:
        dp = (pred[1:, :] - pred[:-1, :]).abs()
        di = (intensity[1:, :] - intensity[:-1, :]).abs()
        total = total + (dp * torch.exp(-lam * di)).sum()
        count += dp.numel()
    if count == 0:
        return total
    return total / count


def _boundary_weights(target: torch.Tensor, window: int) -> torch.Tensor:
    """1 + 5 * |local mean - value|; emphasizes pixels near target boundaries."""
    pad = window // 2
    pooled = F.avg_pool2d(
        target[None, None], window, stride=1, padding=pad, count_include_pad=False
    )[0, 0]
    return 1.0 + 5.0 * (pooled - target).abs()


def wbce(
    pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig = LossConfig()
) -> torch.Tensor:
    """Boundary-weighted binary cross entropy; target carries no gradient."""
    _check_same_hw(pred, target)
    g = target.detach()
    w = _boundary_weights(g, cfg.pool_window)
    p = pred.clamp(EPS, 1.0 - EPS)
    bce = -(g * p.log() + (1.0 - g) * (1.0 - p).log())
    return (w * bce).sum() / w.sum()


def wiou(
    pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig = LossConfig()
) -> torch.Tensor:
    """Boundary-weighted soft IoU loss; target carries no gradient."""
    _check_same_hw(pred, target)
    g = target.detach()
    w = _boundary_weights(g, cfg.pool_window)
    inter = (w * pred * g).sum()
    union = (w * (pred + g - pred * g)).sum()
    return 1.0 - inter / (union + EPS)


def objective(
    out: SiameseOutput,
    scribble,
    rgb: torch.Tensor,
    cfg: LossConfig = LossConfig(),
) -> LossBreakdown:
    """Combined objective.

    The scribble terms supervise the prompt branch; the consistency terms pull
    the no-prompt branch toward the detached prompt prediction, so consistency
    gradients never reach the prompt branch.
    """
    target = out.pred_prompt.detach()
    return LossBreakdown(
        pce=pce(out.pred_prompt, scribble),
        lsc=lsc(out.pred_prompt, rgb, cfg),
        sl=smoothness(out.pred_prompt, rgb, cfg),
        wbce=wbce(out.pred_noprompt, target, cfg),
        wiou=wiou(out.pred_noprompt, target, cfg),
    )
