"""Siamese mask decoder.

Two structurally identical, independently parameterized branches read the
fused encoder features: one conditioned on sparse point tokens (training
teacher), one unconditioned (the branch deployed at test time). The no-prompt
branch starts as an exact copy of the prompt branch.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, PreconditionError, ShapeError
from .prompts import PointEncoder, PointPrompts


@dataclass
class DecoderConfig:
    d_dec: int = 96
    heads: int = 4
    cross_attn_layers: int = 2
    mask_tokens: int = 1
    upsample_stages: int = 2
    mlp_dim: int | None = None  # None -> 2 * d_dec
    use_null_token: bool = False  # learned stand-in token for the no-prompt branch

    def __post_init__(self):
        if self.d_dec % self.heads != 0:
            raise ConfigError("d_dec must divide evenly into heads")
        if self.mask_tokens < 1:
            raise ConfigError("need at least one mask token")
        if self.d_dec >> self.upsample_stages < 1:
            raise ConfigError("too many upsample stages for d_dec")

    @property
    def hidden(self) -> int:
        return 2 * self.d_dec if self.mlp_dim is None else self.mlp_dim

    @property
    def out_channels(self) -> int:
        return self.d_dec >> self.upsample_stages


@dataclass
class SiameseOutput:
    """Paired full-resolution saliency probability maps, each H x W in [0,1]."""

    pred_prompt: torch.Tensor
    pred_noprompt: torch.Tensor


class LayerNorm2d(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class TokenAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, q, k, v):
        b, n, d = q.shape
        dh = d // self.heads

        def split(t):
            return t.reshape(b, t.shape[1], self.heads, dh).transpose(1, 2)

        q = split(self.q_proj(q))
        k = split(self.k_proj(k))
        v = split(self.v_proj(v))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out_proj(out)


class TwoWayBlock(nn.Module):
    """Token self-attention, token->image and image->token cross-attention."""

    def __init__(self, cfg: DecoderConfig, skip_first_pe: bool):
        super().__init__()
        d = cfg.d_dec
        self.self_attn = TokenAttention(d, cfg.heads)
        self.norm1 = nn.LayerNorm(d)
        self.cross_t2i = TokenAttention(d, cfg.heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(
            nn.Linear(d, cfg.hidden), nn.GELU(), nn.Linear(cfg.hidden, d)
        )
        self.norm3 = nn.LayerNorm(d)
        self.cross_i2t = TokenAttention(d, cfg.heads)
        self.norm4 = nn.LayerNorm(d)
        self.skip_first_pe = skip_first_pe

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)

        q = queries + query_pe
        k = keys + key_pe
        queries = self.norm2(queries + self.cross_t2i(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))

        q = queries + query_pe
        k = keys + key_pe
        keys = self.norm4(keys + self.cross_i2t(k, q, queries))
        return queries, keys


class MaskDecoderBranch(nn.Module):
    """One decoder branch: tokens cross-attend the feature grid, the leading
    mask token is projected against the upsampled grid to produce logits."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_dec
        self.mask_tokens = nn.Embedding(cfg.mask_tokens, d)
        if cfg.use_null_token:
            self.null_token = nn.Parameter(torch.randn(1, d) * 0.02)
        self.layers = nn.ModuleList(
            TwoWayBlock(cfg, skip_first_pe=(i == 0))
            for i in range(cfg.cross_attn_layers)
        )
        self.final_attn = TokenAttention(d, cfg.heads)
        self.norm_final = nn.LayerNorm(d)

        ups = []
        ch = d
        for i in range(cfg.upsample_stages):
            ups.append(nn.ConvTranspose2d(ch, ch // 2, kernel_size=2, stride=2))
            ch //= 2
            if i < cfg.upsample_stages - 1:
                ups.append(LayerNorm2d(ch))
            ups.append(nn.GELU())
        self.upscale = nn.Sequential(*ups)

        self.out_mlp = nn.Sequential(
            nn.Linear(d, d), nn.GELU(), nn.Linear(d, d), nn.GELU(),
            nn.Linear(d, cfg.out_channels),
        )

    def forward(
        self,
        features: torch.Tensor,
        image_pe: torch.Tensor,
        sparse: torch.Tensor | None,
        out_side: int,
    ) -> torch.Tensor:
        """Decode to a probability raster (B, out_side, out_side)."""
        if features.ndim == 3:
            features = features[None]
        b, g, g2, d = features.shape
        if g != g2:
            raise ShapeError(f"feature grid must be square, got {g}x{g2}")
        if d != self.cfg.d_dec:
            raise ShapeError(f"feature dim {d} != decoder dim {self.cfg.d_dec}")

        tokens = self.mask_tokens.weight[None].expand(b, -1, -1)
        if sparse is not None:
            if sparse.ndim == 2:
                sparse = sparse[None].expand(b, -1, -1)
            if sparse.shape[-1] != d:
                raise ShapeError(f"sparse token dim {sparse.shape[-1]} != {d}")
            tokens = torch.cat([tokens, sparse], dim=1)
        elif self.cfg.use_null_token:
            tokens = torch.cat([tokens, self.null_token[None].expand(b, -1, -1)], dim=1)

        src = features.reshape(b, g * g, d)
        pe = image_pe[None].expand(b, -1, -1)
        if pe.shape[1] != src.shape[1]:
            raise ShapeError(f"pe length {pe.shape[1]} != grid tokens {src.shape[1]}")

        queries, keys = tokens, src
        for layer in self.layers:
            queries, keys = layer(queries, keys, tokens, pe)
        q = queries + tokens
        k = keys + pe
        queries = self.norm_final(queries + self.final_attn(q, k, keys))

        mask_tok = self.out_mlp(queries[:, 0])  # (B, out_ch)
        grid = keys.transpose(1, 2).reshape(b, d, g, g)
        up = self.upscale(grid)  # (B, out_ch, g', g')
        logits = torch.einsum("bc,bchw->bhw", mask_tok, up)
        logits = F.interpolate(
            logits[:, None], size=(out_side, out_side), mode="bilinear",
            align_corners=False,
        )
        return torch.sigmoid(logits[:, 0])


class SiameseDecoder(nn.Module):
    """Prompt branch + no-prompt branch over duplicated features."""

    def __init__(self, cfg: DecoderConfig, point_encoder: PointEncoder):
        super().__init__()
        if point_encoder.dim != cfg.d_dec:
            raise ShapeError(
                f"point encoder dim {point_encoder.dim} != decoder dim {cfg.d_dec}"
            )
        self.cfg = cfg
        self.point_encoder = point_encoder
        self.prompt_branch = MaskDecoderBranch(cfg)
        # the no-prompt branch starts as an exact parameter-wise copy
        self.noprompt_branch = copy.deepcopy(self.prompt_branch)

    def siamese_forward(
        self,
        features: torch.Tensor,
        prompts: PointPrompts,
        image_side: int,
        image_pe: torch.Tensor | None = None,
    ) -> SiameseOutput:
        """Run both branches on duplicated features for one sample."""
        if prompts is None or prompts.k < 1:
            raise PreconditionError("prompt branch requires at least one point")
        if features.ndim == 4 and features.shape[0] != 1:
            raise PreconditionError("siamese_forward handles one sample at a time")
        if image_pe is None:
            g = features.shape[-3] if features.ndim == 4 else features.shape[0]
            image_pe = self.point_encoder.grid_pe(g)
        sparse = self.point_encoder.encode_points(prompts, image_side)
        pred_p = self.prompt_branch(features, image_pe, sparse, image_side)
        pred_n = self.noprompt_branch(features, image_pe, None, image_side)
        return SiameseOutput(pred_prompt=pred_p[0], pred_noprompt=pred_n[0])

    def predict(self, features: torch.Tensor, image_side: int) -> torch.Tensor:
        """Inference path: only the no-prompt branch runs, (B, S, S)."""
        g = features.shape[-3] if features.ndim == 4 else features.shape[0]
        image_pe = self.point_encoder.grid_pe(g)
        return self.noprompt_branch(features, image_pe, None, image_side)


def decoder_branch_param_count(cfg: DecoderConfig) -> int:
    """Closed-form parameter count of one branch (cross-checked by tests)."""
    d = cfg.d_dec
    attn = 4 * (d * d + d)
    norm = 2 * d
    mlp = d * cfg.hidden + cfg.hidden + cfg.hidden * d + d
    block = attn * 3 + norm * 4 + mlp
    total = cfg.mask_tokens * d
    if cfg.use_null_token:
        total += d
    total += cfg.cross_attn_layers * block
    total += attn + norm  # final attention + norm
    ch = d
    for i in range(cfg.upsample_stages):
        total += ch * (ch // 2) * 4 + ch // 2  # 2x2 transposed conv
        ch //= 2
        if i < cfg.upsample_stages - 1:
            total += 2 * ch
    total += 2 * (d * d + d) + d * cfg.out_channels + cfg.out_channels
    return total
