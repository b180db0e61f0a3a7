"""Frozen ViT image encoder with per-modality low-rank modulators.

One shared transformer trunk extracts modality-agnostic features; small
trainable factor pairs attached to the Q/K/V projections of the last blocks
carry all modality-specific knowledge. Features from different modalities are
fused by element-wise summation.

Construction is two-phase: the frozen trunk is built first and modulators are
attached afterwards, so models that differ only in modulator kind share
bit-identical base weights under the same seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, PreconditionError, ShapeError

MODULATED_FRACTIONS = (1.0 / 3.0, 1.0 / 2.0, 2.0 / 3.0)
MODULATOR_KINDS = ("lora", "adapter", "none")


@dataclass
class EncoderConfig:
    depth: int = 8
    embed_dim: int = 96
    heads: int = 4
    patch: int = 16
    image_side: int = 64
    lora_rank: int = 4
    lora_alpha: float | None = None  # None -> alpha = rank, i.e. unit delta scale
    modulated_fraction: float = 0.5
    mlp_ratio: float = 4.0
    adapter_bottleneck: int | None = None  # None -> embed_dim // 8

    def __post_init__(self):
        if self.lora_rank < 1:
            raise ConfigError(f"lora rank must be >= 1, got {self.lora_rank}")
        if self.lora_rank > self.embed_dim // 4:
            raise ConfigError(
                f"lora rank {self.lora_rank} too large for dim {self.embed_dim}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError("embed_dim must divide evenly into heads")
        if self.image_side % self.patch != 0:
            raise ConfigError("image_side must be divisible by patch")
        if not any(abs(self.modulated_fraction - f) < 1e-9 for f in MODULATED_FRACTIONS):
            raise ConfigError(
                f"modulated_fraction must be one of 1/3, 1/2, 2/3, "
                f"got {self.modulated_fraction}"
            )

    @property
    def grid(self) -> int:
        return self.image_side // self.patch

    @property
    def alpha(self) -> float:
        return self.lora_rank if self.lora_alpha is None else self.lora_alpha

    @property
    def bottleneck(self) -> int:
        if self.adapter_bottleneck is not None:
            return self.adapter_bottleneck
        return max(1, self.embed_dim // 8)

    def modulated_layers(self) -> tuple[int, ...]:
        n = int(math.floor(self.depth * self.modulated_fraction))
        return tuple(range(self.depth - n, self.depth))


def attn_projection(
    x: torch.Tensor,
    weight: torch.Tensor,
    lora: tuple[torch.Tensor, torch.Tensor] | None = None,
    alpha: float | None = None,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """x @ (W + (alpha/r) * A @ B^T)^T with W held out of the gradient path."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input dim {x.shape[-1]} != weight dim {weight.shape[1]}")
    out = F.linear(x, weight.detach(), bias.detach() if bias is not None else None)
    if lora is not None:
        a, b = lora
        if a.shape != b.shape or a.shape[0] != weight.shape[0]:
            raise ShapeError(
                f"lora factors {tuple(a.shape)}/{tuple(b.shape)} do not match "
                f"weight {tuple(weight.shape)}"
            )
        rank = a.shape[1]
        scale = (rank if alpha is None else alpha) / rank
        out = out + (x @ b) @ a.t() * scale
    return out


class LoraPair(nn.Module):
    """Low-rank factor pair; zero B keeps the initial delta at exactly zero."""

    def __init__(self, dim: int, rank: int, alpha: float):
        super().__init__()
        self.a = nn.Parameter(torch.randn(dim, rank) * 0.02)
        self.b = nn.Parameter(torch.zeros(dim, rank))
        self.scale = alpha / rank

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        return (x @ self.b) @ self.a.t() * self.scale


class Adapter(nn.Module):
    """Bottleneck adapter; zero-initialized up-projection for a zero start."""

    def __init__(self, dim: int, bottleneck: int):
        super().__init__()
        self.down = nn.Linear(dim, bottleneck)
        self.up = nn.Linear(bottleneck, dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.up(F.gelu(self.down(x)))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def _project(self, x, base: nn.Linear, proj_name: str, modality):
        out = base(x)
        if modality is not None and hasattr(self, "lora"):
            out = out + self.lora[modality][proj_name].delta(x)
        return out

    def forward(self, x: torch.Tensor, modality: str | None) -> torch.Tensor:
        b, n, d = x.shape
        dh = d // self.heads
        q = self._project(x, self.q, "q", modality)
        k = self._project(x, self.k, "k", modality)
        v = self._project(x, self.v, "v", modality)
        q = q.reshape(b, n, self.heads, dh).transpose(1, 2)
        k = k.reshape(b, n, self.heads, dh).transpose(1, 2)
        v = v.reshape(b, n, self.heads, dh).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block; modulators are attached post-construction."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.embed_dim
        hidden = int(d * cfg.mlp_ratio)
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, cfg.heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(
            nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d)
        )

    def forward(self, x: torch.Tensor, modality: str | None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), modality)
        h = self.norm2(x)
        ffn = self.mlp(h)
        if modality is not None and hasattr(self, "adapter"):
            ffn = ffn + self.adapter[modality](h)
        return x + ffn


class VitEncoder(nn.Module):
    """Patch embed + depth blocks; base weights frozen, modulators trainable."""

    def __init__(self, cfg: EncoderConfig, modality_tags: tuple[str, ...]):
        super().__init__()
        self.cfg = cfg
        self.modality_tags = tuple(modality_tags)
        self.modulator_kind = "none"

        d = cfg.embed_dim
        n_tokens = cfg.grid * cfg.grid
        self.patch_embed = nn.Conv2d(3, d, kernel_size=cfg.patch, stride=cfg.patch)
        self.pos_embed = nn.Parameter(torch.randn(1, n_tokens, d) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        for p in self.parameters():
            p.requires_grad_(False)

    def attach_modulators(self, kind: str = "lora") -> "VitEncoder":
        """Register per-modality modulators on the modulated blocks (trainable)."""
        if kind not in MODULATOR_KINDS:
            raise ConfigError(f"unknown modulator kind {kind!r}")
        self.modulator_kind = kind
        if kind == "none":
            return self
        cfg = self.cfg
        for i in cfg.modulated_layers():
            block = self.blocks[i]
            if kind == "lora":
                block.attn.lora = nn.ModuleDict(
                    {
                        m: nn.ModuleDict(
                            {
                                p: LoraPair(cfg.embed_dim, cfg.lora_rank, cfg.alpha)
                                for p in ("q", "k", "v")
                            }
                        )
                        for m in self.modality_tags
                    }
                )
            else:
                block.adapter = nn.ModuleDict(
                    {
                        m: Adapter(cfg.embed_dim, cfg.bottleneck)
                        for m in self.modality_tags
                    }
                )
        return self

    def lora_for(self, layer: int, projection: str, modality: str) -> LoraPair:
        """Factor pair for (layer, projection, modality); placement is checked."""
        if layer not in self.cfg.modulated_layers():
            raise ConfigError(f"layer {layer} is not in the modulated set")
        if modality not in self.modality_tags:
            raise ConfigError(f"unknown modality {modality!r}")
        attn = self.blocks[layer].attn
        if not hasattr(attn, "lora"):
            raise ConfigError(f"layer {layer} carries no low-rank factors")
        return attn.lora[modality][projection]

    def load_base_weights(self, state_dict: dict) -> None:
        """Optional hook: install externally supplied frozen base weights."""
        missing, unexpected = self.load_state_dict(state_dict, strict=False)
        if unexpected:
            raise ConfigError(f"unexpected tensors in base weights: {unexpected[:5]}")

    def forward(self, image: torch.Tensor, modality: str) -> torch.Tensor:
        """Encode one modality: (B, 3, S, S) -> feature grid (B, g, g, d)."""
        if modality not in self.modality_tags:
            raise ConfigError(
                f"modality {modality!r} not in configured set {self.modality_tags}"
            )
        if image.ndim == 3:
            image = image[None]
        if image.shape[-1] != self.cfg.image_side or image.shape[-2] != self.cfg.image_side:
            raise ShapeError(
                f"expected {self.cfg.image_side}px input, got {tuple(image.shape)}"
            )
        mod = modality if self.modulator_kind != "none" else None
        x = self.patch_embed(image)  # (B, d, g, g)
        b, d, g, _ = x.shape
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        for block in self.blocks:
            x = block(x, mod)
        x = self.norm(x)
        if not torch.isfinite(x).all():
            raise NumericsError(f"non-finite encoder features for modality {modality!r}")
        return x.reshape(b, g, g, d)


def fuse_modalities(features: dict[str, torch.Tensor]) -> torch.Tensor:
    """Element-wise sum of per-modality feature grids."""
    if not features:
        raise PreconditionError("no features to fuse")
    shapes = {m: tuple(f.shape) for m, f in features.items()}
    if len(set(shapes.values())) != 1:
        raise ShapeError(f"feature shapes disagree: {shapes}")
    out = None
    for f in features.values():
        out = f if out is None else out + f
    return out


# ---------------------------------------------------------------------------
# Parameter accounting (closed forms; tests compare against enumeration)
# ---------------------------------------------------------------------------


@dataclass
class ParamBreakdown:
    modulators: int
    decoders: int
    prompt_encoder: int
    frozen: int
    per_modality: dict[str, int] = field(default_factory=dict)

    @property
    def total_trainable(self) -> int:
        return self.modulators + self.decoders + self.prompt_encoder


def encoder_frozen_param_count(cfg: EncoderConfig) -> int:
    d = cfg.embed_dim
    h = int(d * cfg.mlp_ratio)
    patch = 3 * cfg.patch * cfg.patch * d + d
    pos = cfg.grid * cfg.grid * d
    block = 2 * d + 4 * (d * d + d) + 2 * d + (d * h + h) + (h * d + d)
    return patch + pos + cfg.depth * block + 2 * d


def modulator_param_count(
    cfg: EncoderConfig, n_modalities: int, kind: str = "lora"
) -> int:
    n_layers = len(cfg.modulated_layers())
    if kind == "none":
        return 0
    if kind == "lora":
        per = 2 * cfg.embed_dim * cfg.lora_rank * 3
    elif kind == "adapter":
        d, bn = cfg.embed_dim, cfg.bottleneck
        per = (d * bn + bn) + (bn * d + d)
    else:
        raise ConfigError(f"unknown modulator kind {kind!r}")
    return per * n_layers * n_modalities


def count_trainable_params(
    cfg: EncoderConfig,
    modality_tags: tuple[str, ...] | set[str],
    decoder_pair_params: int,
    prompt_encoder_params: int,
    modulator_kind: str = "lora",
) -> ParamBreakdown:
    """Closed-form trainable/frozen parameter breakdown for a full model."""
    tags = tuple(sorted(modality_tags))
    per_mod = modulator_param_count(cfg, 1, modulator_kind)
    return ParamBreakdown(
        modulators=per_mod * len(tags),
        decoders=decoder_pair_params,
        prompt_encoder=prompt_encoder_params,
        frozen=encoder_frozen_param_count(cfg),
        per_modality={m: per_mod for m in tags},
    )
