"""Training loop: parameter partitioning by modality set, dual-gradient steps,
optimization, checkpointing with deterministic replay, and inference."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_archive, save_archive
from .data import (
    DEFAULT_MEAN,
    DEFAULT_STD,
    DatasetManifest,
    Sample,
    denormalize_rgb,
    load_sample,
    preprocess,
)
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import ConfigError, NumericsError, PartitionError, PreconditionError
from .losses import LossBreakdown, LossConfig, lsc, objective, pce, smoothness
from .model import SaliencyModel, build_model
from .prompts import sample_points

DECODER_REGIMES = ("siamese", "prompt_only", "noprompt_only")


@dataclass
class TrainConfig:
    # optimization
    lr: float = 5e-5
    epochs: int = 20
    batch: int = 1
    seed: int = 0
    # geometry
    image_side: int = 64
    patch: int = 16
    # encoder
    depth: int = 8
    embed_dim: int = 96
    heads: int = 4
    lora_rank: int = 4
    lora_alpha: float | None = None
    modulated_fraction: float = 0.5
    modulator_kind: str = "lora"
    # prompts / decoder
    prompt_k: int = 10
    modality_tags: tuple[str, ...] = ("v",)
    decoder_regime: str = "siamese"
    use_null_token: bool = False
    cross_attn_layers: int = 2
    mask_tokens: int = 1
    upsample_stages: int = 2
    # preprocessing
    norm_mean: float = DEFAULT_MEAN
    norm_std: float = DEFAULT_STD

    def __post_init__(self):
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.decoder_regime not in DECODER_REGIMES:
            raise ConfigError(f"unknown decoder regime {self.decoder_regime!r}")
        self.modality_tags = tuple(self.modality_tags)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            depth=self.depth,
            embed_dim=self.embed_dim,
            heads=self.heads,
            patch=self.patch,
            image_side=self.image_side,
            lora_rank=self.lora_rank,
            lora_alpha=self.lora_alpha,
            modulated_fraction=self.modulated_fraction,
        )

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            d_dec=self.embed_dim,
            heads=self.heads,
            cross_attn_layers=self.cross_attn_layers,
            mask_tokens=self.mask_tokens,
            upsample_stages=self.upsample_stages,
            use_null_token=self.use_null_token,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modality_tags"] = list(self.modality_tags)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["modality_tags"] = tuple(d.get("modality_tags", ("v",)))
        return cls(**d)


# ---------------------------------------------------------------------------
# Parameter partition
# ---------------------------------------------------------------------------


@dataclass
class ParamPartition:
    """Every model parameter assigned to exactly one group."""

    frozen: dict[str, nn.Parameter]
    modulators: dict[str, nn.Parameter]
    decoder_prompt: dict[str, nn.Parameter]
    decoder_noprompt: dict[str, nn.Parameter]
    prompt_trainable: dict[str, nn.Parameter]
    by_modality: dict[str, dict[str, nn.Parameter]] = field(default_factory=dict)

    @property
    def prompt_side(self) -> dict[str, nn.Parameter]:
        """Trainable prompt-branch set: modulators + prompt decoder + label embeds."""
        return {**self.modulators, **self.decoder_prompt, **self.prompt_trainable}

    @property
    def noprompt_side(self) -> dict[str, nn.Parameter]:
        """Trainable no-prompt-branch set: modulators + no-prompt decoder."""
        return {**self.modulators, **self.decoder_noprompt}

    @property
    def trainable(self) -> dict[str, nn.Parameter]:
        return {**self.prompt_side, **self.decoder_noprompt}

    def counts(self) -> dict[str, int]:
        def total(group):
            return sum(p.numel() for p in group.values())

        return {
            "frozen": total(self.frozen),
            "modulators": total(self.modulators),
            "decoder_prompt": total(self.decoder_prompt),
            "decoder_noprompt": total(self.decoder_noprompt),
            "prompt_trainable": total(self.prompt_trainable),
        }


def _modulator_modality(name: str) -> str:
    for marker in (".lora.", ".adapter."):
        if marker in name:
            return name.split(marker, 1)[1].split(".", 1)[0]
    raise PartitionError(f"{name} is not a modulator parameter")


def partition_params(
    model: SaliencyModel, modality_tags: tuple[str, ...] | None = None
) -> ParamPartition:
    """Assign every parameter to frozen / modulator / decoder / prompt groups."""
    tags = tuple(modality_tags) if modality_tags is not None else model.modality_tags
    part = ParamPartition({}, {}, {}, {}, {}, {m: {} for m in tags})

    for name, p in model.named_parameters():
        if ".lora." in name or ".adapter." in name:
            m = _modulator_modality(name)
            if m not in tags:
                raise PartitionError(f"modulator {name} for unexpected modality {m!r}")
            if not p.requires_grad:
                raise PartitionError(f"modulator {name} is frozen")
            part.modulators[name] = p
            part.by_modality[m][name] = p
        elif name.startswith("siamese.prompt_branch."):
            part.decoder_prompt[name] = p
        elif name.startswith("siamese.noprompt_branch."):
            part.decoder_noprompt[name] = p
        elif name.startswith("siamese.point_encoder.label_embed"):
            part.prompt_trainable[name] = p
        elif name.startswith("encoder."):
            if p.requires_grad:
                raise PartitionError(f"base encoder weight {name} is trainable")
            part.frozen[name] = p
        else:
            raise PartitionError(f"parameter {name} fits no partition group")

    n_assigned = sum(
        len(g)
        for g in (
            part.frozen,
            part.modulators,
            part.decoder_prompt,
            part.decoder_noprompt,
            part.prompt_trainable,
        )
    )
    n_total = sum(1 for _ in model.named_parameters())
    if n_assigned != n_total:
        raise PartitionError(f"assigned {n_assigned} of {n_total} parameters")
    return part


# ---------------------------------------------------------------------------
# Training state
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    model: SaliencyModel
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    partition: ParamPartition
    loss_cfg: LossConfig
    epoch: int = 0
    global_step: int = 0
    best_loss: float = float("inf")


def init_train_state(
    config: TrainConfig, loss_cfg: LossConfig | None = None
) -> TrainState:
    model = build_model(
        config.encoder_config(),
        config.decoder_config(),
        config.modality_tags,
        config.modulator_kind,
        seed=config.seed,
    )
    partition = partition_params(model)
    optimizer = torch.optim.Adam(list(partition.trainable.values()), lr=config.lr)
    return TrainState(
        model=model,
        optimizer=optimizer,
        config=config,
        partition=partition,
        loss_cfg=loss_cfg or LossConfig(),
    )


def _step_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence((seed, epoch, index)).generate_state(1)[0])


def _sample_images(sample: Sample, tags: tuple[str, ...]) -> dict[str, torch.Tensor]:
    images = {}
    for m in tags:
        if m not in sample.modalities:
            raise ConfigError(f"sample {sample.id} lacks modality {m!r}")
        arr = np.ascontiguousarray(sample.modalities[m], dtype=np.float32)
        images[m] = torch.from_numpy(arr).permute(2, 0, 1)[None]
    return images


def _zero_like(ref: torch.Tensor) -> torch.Tensor:
    return ref.sum() * 0.0


def forward_losses(
    state: TrainState, sample: Sample, prompt_seed: int
) -> LossBreakdown:
    """Forward pass and loss for one sample under the configured regime."""
    cfg = state.config
    model = state.model
    if sample.scribble is None:
        raise PreconditionError(f"sample {sample.id} has no scribble")
    images = _sample_images(sample, cfg.modality_tags)
    fused = model.encode(images)
    rgb01 = denormalize_rgb(
        torch.from_numpy(np.ascontiguousarray(sample.modalities["v"], dtype=np.float32)),
        cfg.norm_mean,
        cfg.norm_std,
    )
    scribble = sample.scribble.values

    if cfg.decoder_regime == "siamese":
        prompts = sample_points(scribble, cfg.prompt_k, prompt_seed)
        out = model.siamese.siamese_forward(fused, prompts, cfg.image_side)
        return objective(out, scribble, rgb01, state.loss_cfg)

    pe = model.point_encoder.grid_pe(fused.shape[-3] if fused.ndim == 4 else fused.shape[0])
    if cfg.decoder_regime == "prompt_only":
        prompts = sample_points(scribble, cfg.prompt_k, prompt_seed)
        sparse = model.point_encoder.encode_points(prompts, cfg.image_side)
        pred = model.siamese.prompt_branch(fused, pe, sparse, cfg.image_side)[0]
    else:  # noprompt_only
        pred = model.siamese.noprompt_branch(fused, pe, None, cfg.image_side)[0]
    zero = _zero_like(pred)
    return LossBreakdown(
        pce=pce(pred, scribble),
        lsc=lsc(pred, rgb01, state.loss_cfg),
        sl=smoothness(pred, rgb01, state.loss_cfg),
        wbce=zero,
        wiou=zero,
    )


def train_step(
    state: TrainState, sample: Sample, prompt_seed: int | None = None
) -> LossBreakdown:
    """One forward/backward/update on a single preprocessed sample."""
    if prompt_seed is None:
        prompt_seed = _step_seed(state.config.seed, state.epoch, state.global_step)
    state.model.train()
    state.optimizer.zero_grad()
    breakdown = forward_losses(state, sample, prompt_seed)
    total = breakdown.total
    if not torch.isfinite(total):
        raise NumericsError(
            f"non-finite loss at step {state.global_step} on sample {sample.id}: "
            f"{breakdown.to_dict()}"
        )
    total.backward()
    state.optimizer.step()
    state.global_step += 1
    return breakdown


def _train_batch(
    state: TrainState, batch: list[tuple[Sample, int]]
) -> list[LossBreakdown]:
    """Loss-averaged step over a batch of (sample, prompt_seed)."""
    state.model.train()
    state.optimizer.zero_grad()
    breakdowns = []
    for sample, prompt_seed in batch:
        bd = forward_losses(state, sample, prompt_seed)
        total = bd.total
        if not torch.isfinite(total):
            raise NumericsError(
                f"non-finite loss at step {state.global_step} on sample "
                f"{sample.id}: {bd.to_dict()}"
            )
        (total / len(batch)).backward()
        breakdowns.append(bd)
    state.optimizer.step()
    state.global_step += 1
    return breakdowns


# ---------------------------------------------------------------------------
# Checkpoint glue
# ---------------------------------------------------------------------------


def save_train_state(state: TrainState, path: str | Path, kind: str = "epoch") -> Path:
    opt_sd = state.optimizer.state_dict()
    tensors: dict[str, torch.Tensor] = {
        f"model.{k}": v for k, v in state.model.state_dict().items()
    }
    for idx, slots in opt_sd["state"].items():
        for slot, val in slots.items():
            if isinstance(val, torch.Tensor):
                tensors[f"optim.{idx}.{slot}"] = val.float()
    meta = {
        "kind": kind,
        "train_config": state.config.to_dict(),
        "loss_config": asdict(state.loss_cfg),
        "epoch": state.epoch,
        "global_step": state.global_step,
        "best_loss": state.best_loss,
        "optim_param_groups": json.loads(json.dumps(opt_sd["param_groups"])),
        "optim_param_names": list(state.partition.trainable.keys()),
    }
    return save_archive(path, meta, tensors)


def load_train_state(path: str | Path) -> TrainState:
    meta, tensors = load_archive(path)
    config = TrainConfig.from_dict(meta["train_config"])
    state = init_train_state(config, LossConfig(**meta.get("loss_config", {})))
    model_sd = {
        k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")
    }
    state.model.load_state_dict(model_sd, strict=True)

    names = meta.get("optim_param_names", [])
    if list(state.partition.trainable.keys()) != names:
        raise ConfigError("checkpoint trainable-parameter layout does not match model")
    opt_state = {}
    for idx in range(len(names)):
        slots = {
            key.rsplit(".", 1)[-1]: t
            for key, t in tensors.items()
            if key.startswith(f"optim.{idx}.")
        }
        if slots:
            opt_state[idx] = slots
    if opt_state:
        groups = []
        for g in meta["optim_param_groups"]:
            g = dict(g)
            if "betas" in g:
                g["betas"] = tuple(g["betas"])  # JSON stores tuples as lists
            groups.append(g)
        state.optimizer.load_state_dict({"state": opt_state, "param_groups": groups})
    state.epoch = meta["epoch"]
    state.global_step = meta["global_step"]
    state.best_loss = meta["best_loss"]
    return state


# ---------------------------------------------------------------------------
# fit / infer
# ---------------------------------------------------------------------------


def _load_split(manifest: DatasetManifest, config: TrainConfig) -> list[Sample]:
    samples = []
    for sid in manifest.sample_ids:
        s = load_sample(manifest, sid)
        samples.append(
            preprocess(s, config.image_side, config.patch, config.norm_mean, config.norm_std)
        )
    return samples


def fit(
    manifest: DatasetManifest,
    config: TrainConfig,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
    loss_cfg: LossConfig | None = None,
) -> Path:
    """Run the full training schedule; returns the best-by-training-loss path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        state = load_train_state(resume_from)
        ours = config.to_dict()
        theirs = state.config.to_dict()
        ours.pop("epochs")
        theirs.pop("epochs")
        if ours != theirs:
            diff = {k for k in ours if ours[k] != theirs[k]}
            raise ConfigError(f"resume config differs from checkpoint in {sorted(diff)}")
        state.config = config  # only the epoch budget may change
    else:
        state = init_train_state(config, loss_cfg)
    config = state.config

    samples = _load_split(manifest, config)
    if not samples:
        raise PreconditionError("empty training manifest")
    n = len(samples)
    log_path = out_dir / "train_log.jsonl"
    best_path = out_dir / "best.ckpt"

    with open(log_path, "a") as log:
        for epoch in range(state.epoch, config.epochs):
            order = np.random.default_rng(
                np.random.SeedSequence((config.seed, epoch))
            ).permutation(n)
            totals = []
            for pos in range(0, n, config.batch):
                chunk = [int(i) for i in order[pos : pos + config.batch]]
                batch = [
                    (samples[i], _step_seed(config.seed, epoch, i)) for i in chunk
                ]
                breakdowns = _train_batch(state, batch)
                for (sample, _), bd in zip(batch, breakdowns):
                    entry = {
                        "epoch": epoch,
                        "step": state.global_step,
                        "sample": sample.id,
                        **bd.to_dict(),
                    }
                    log.write(json.dumps(entry) + "\n")
                    totals.append(float(bd.total.detach()))
            state.epoch = epoch + 1
            epoch_mean = float(np.mean(totals))
            save_train_state(state, out_dir / f"epoch_{state.epoch:03d}.ckpt")
            if epoch_mean < state.best_loss:
                state.best_loss = epoch_mean
                save_train_state(state, best_path, kind="best")
    return best_path


def _predict_fused(
    model: SaliencyModel, fused: torch.Tensor, side: int, regime: str
) -> torch.Tensor:
    if regime == "prompt_only":
        grid = fused.shape[-3] if fused.ndim == 4 else fused.shape[0]
        pe = model.point_encoder.grid_pe(grid)
        return model.siamese.prompt_branch(fused, pe, None, side)
    return model.siamese.predict(fused, side)


def infer(
    checkpoint: str | Path, manifest: DatasetManifest, out_dir: str | Path
) -> Path:
    """Predict saliency for every manifest sample; PNGs at original size."""
    from PIL import Image

    state = load_train_state(checkpoint)
    config = state.config
    missing = set(config.modality_tags) - set(manifest.modality_tags)
    if missing:
        raise ConfigError(
            f"checkpoint needs modalities {sorted(missing)} absent from manifest"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = state.model
    model.eval()
    with torch.no_grad():
        for sid in manifest.sample_ids:
            raw = load_sample(manifest, sid)
            orig_h, orig_w = raw.side
            pre = preprocess(
                raw, config.image_side, config.patch, config.norm_mean, config.norm_std
            )
            images = _sample_images(pre, config.modality_tags)
            fused = model.encode(images)
            pred = _predict_fused(model, fused, config.image_side, config.decoder_regime)
            pred = torch.nn.functional.interpolate(
                pred[:, None], size=(orig_h, orig_w), mode="bilinear",
                align_corners=False,
            )[0, 0]
            arr = np.rint(pred.numpy() * 255.0).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(out_dir / f"{sid}.png")
    return out_dir
