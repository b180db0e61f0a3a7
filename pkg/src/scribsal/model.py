"""Full model: shared frozen encoder, point encoder, siamese decoder.

Build order matters: the frozen trunk, decoder pair, and point encoder are
constructed before any modulator parameters exist, so two models built under
the same torch seed share identical base weights regardless of modulator kind.
"""

from __future__ import annotations

import torch
from torch import nn

from .decoder import DecoderConfig, SiameseDecoder, SiameseOutput
from .encoder import EncoderConfig, VitEncoder, fuse_modalities
from .errors import ConfigError
from .prompts import PointEncoder, PointPrompts


class SaliencyModel(nn.Module):
    def __init__(
        self,
        enc_cfg: EncoderConfig,
        dec_cfg: DecoderConfig,
        modality_tags: tuple[str, ...],
        modulator_kind: str = "lora",
    ):
        super().__init__()
        if dec_cfg.d_dec != enc_cfg.embed_dim:
            raise ConfigError(
                f"decoder dim {dec_cfg.d_dec} must equal encoder dim "
                f"{enc_cfg.embed_dim} (no projection neck)"
            )
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg
        self.modality_tags = tuple(modality_tags)
        self.modulator_kind = modulator_kind

        self.encoder = VitEncoder(enc_cfg, self.modality_tags)
        self.siamese = SiameseDecoder(dec_cfg, PointEncoder(dec_cfg.d_dec))
        self.encoder.attach_modulators(modulator_kind)

    @property
    def point_encoder(self) -> PointEncoder:
        return self.siamese.point_encoder

    def encode(self, images: dict[str, torch.Tensor]) -> torch.Tensor:
        """Encode every modality and fuse by summation -> (B, g, g, d)."""
        feats = {m: self.encoder(img, m) for m, img in images.items()}
        return fuse_modalities(feats)

    def siamese_forward(
        self, images: dict[str, torch.Tensor], prompts: PointPrompts
    ) -> SiameseOutput:
        fused = self.encode(images)
        return self.siamese.siamese_forward(fused, prompts, self.enc_cfg.image_side)

    def predict(self, images: dict[str, torch.Tensor]) -> torch.Tensor:
        """Test-time path; the prompt branch is never evaluated."""
        fused = self.encode(images)
        return self.siamese.predict(fused, self.enc_cfg.image_side)


def build_model(
    enc_cfg: EncoderConfig,
    dec_cfg: DecoderConfig,
    modality_tags: tuple[str, ...],
    modulator_kind: str = "lora",
    seed: int | None = None,
) -> SaliencyModel:
    """Deterministic model construction under an explicit seed."""
    if seed is not None:
        torch.manual_seed(seed)
    return SaliencyModel(enc_cfg, dec_cfg, modality_tags, modulator_kind)
