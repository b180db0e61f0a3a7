"""Point prompts sampled from scribbles and their sparse-token encoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import ScribbleMap
from .errors import EmptyScribbleError, PreconditionError, RangeError

POSITIVE = 1
NEGATIVE = 0

LABEL_NAMES = {POSITIVE: "positive", NEGATIVE: "negative"}


@dataclass
class PointPrompts:
    """k labeled image coordinates; x is column, y is row."""

    coords: np.ndarray  # (k, 2) int64, columns (x, y)
    labels: np.ndarray  # (k,) int64, POSITIVE/NEGATIVE

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.coords.shape[0] != self.labels.shape[0]:
            raise PreconditionError("coords and labels disagree in length")
        if self.coords.shape[0] < 1:
            raise PreconditionError("need at least one point")

    @property
    def k(self) -> int:
        return int(self.coords.shape[0])

    def to_json(self) -> list:
        return [
            [int(x), int(y), LABEL_NAMES[int(l)]]
            for (x, y), l in zip(self.coords, self.labels)
        ]


def _split_quota(k: int, n_fg: int, n_bg: int) -> tuple[int, int]:
    """Proportional fg/bg split with at least one point per nonempty class."""
    if n_fg == 0:
        return 0, k
    if n_bg == 0:
        return k, 0
    k_fg = int(round(k * n_fg / (n_fg + n_bg)))
    k_fg = min(max(k_fg, 1), k - 1)
    return k_fg, k - k_fg


def sample_points(
    scribble: ScribbleMap | np.ndarray, k: int, seed: int
) -> PointPrompts:
    """Draw k labeled points from the scribble, deterministic under seed.

    Points are drawn uniformly without replacement per class; a class whose
    pixel count falls below its quota is drawn with replacement instead.
    """
    if k < 1:
        raise PreconditionError(f"need k >= 1, got {k}")
    values = scribble.values if isinstance(scribble, ScribbleMap) else np.asarray(scribble)

    fg_y, fg_x = np.nonzero(values == 1)
    bg_y, bg_x = np.nonzero(values == 2)
    if fg_y.size == 0 and bg_y.size == 0:
        raise EmptyScribbleError("scribble has no labeled pixels")

    k_fg, k_bg = _split_quota(k, fg_y.size, bg_y.size)
    rng = np.random.default_rng(seed)

    def draw(xs, ys, quota):
        if quota == 0:
            return np.empty((0, 2), dtype=np.int64)
        replace = xs.size < quota
        idx = rng.choice(xs.size, size=quota, replace=replace)
        return np.stack([xs[idx], ys[idx]], axis=1)

    fg_pts = draw(fg_x, fg_y, k_fg)
    bg_pts = draw(bg_x, bg_y, k_bg)
    coords = np.concatenate([fg_pts, bg_pts], axis=0)
    labels = np.concatenate(
        [np.full(k_fg, POSITIVE), np.full(k_bg, NEGATIVE)]
    ).astype(np.int64)
    return PointPrompts(coords=coords, labels=labels)


class PointEncoder(nn.Module):
    """Random-Fourier positional encoding plus learned positive/negative embeddings.

    The Fourier matrix is a fixed buffer (never trained); the two label
    embeddings are the only trainable prompt-side parameters.
    """

    def __init__(self, dim: int, seed: int | None = None):
        super().__init__()
        if dim % 2 != 0:
            raise PreconditionError(f"token dim must be even, got {dim}")
        self.dim = dim
        if seed is None:
            mat = torch.randn(2, dim // 2)
        else:
            gen = torch.Generator()
            gen.manual_seed(seed)
            mat = torch.randn(2, dim // 2, generator=gen)
        self.register_buffer("fourier", mat)
        self.label_embed = nn.Embedding(2, dim)
        nn.init.normal_(self.label_embed.weight, std=0.02)

    def _pe(self, coords01: torch.Tensor) -> torch.Tensor:
        # coords01 in [0,1]^2 -> (..., dim)
        proj = (2.0 * coords01 - 1.0) @ self.fourier
        proj = 2.0 * torch.pi * proj
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)

    def encode_points(self, prompts: PointPrompts, image_side: int) -> torch.Tensor:
        """Tokens (k, dim) for labeled image coordinates."""
        coords = np.asarray(prompts.coords)
        if coords.min() < 0 or coords.max() >= image_side:
            raise RangeError(
                f"point coordinates must lie in [0, {image_side}), got "
                f"[{coords.min()}, {coords.max()}]"
            )
        dev = self.fourier.device
        xy = torch.as_tensor(coords, dtype=torch.float32, device=dev)
        xy = (xy + 0.5) / image_side
        labels = torch.as_tensor(prompts.labels, dtype=torch.long, device=dev)
        return self._pe(xy) + self.label_embed(labels)

    def grid_pe(self, grid: int) -> torch.Tensor:
        """Dense positional encoding for a grid x grid feature map, (grid*grid, dim)."""
        centers = (torch.arange(grid, dtype=torch.float32) + 0.5) / grid
        gy, gx = torch.meshgrid(centers, centers, indexing="ij")
        coords = torch.stack([gx, gy], dim=-1).to(self.fourier.device)
        return self._pe(coords).reshape(grid * grid, self.dim)


def point_encoder_trainable_count(dim: int) -> int:
    """Closed-form trainable parameter count of :class:`PointEncoder`."""
    return 2 * dim
