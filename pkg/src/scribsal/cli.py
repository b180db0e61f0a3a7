"""Command-line entry point: synth | train | predict | eval | sample-prompts | params."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import metrics as metrics_mod
from .data import DatasetManifest, ScribbleMap, synth_dataset
from .decoder import decoder_branch_param_count
from .encoder import EncoderConfig, count_trainable_params
from .errors import ScribsalError
from .prompts import point_encoder_trainable_count, sample_points
from .trainer import TrainConfig, fit, infer

log = logging.getLogger("scribsal")

# Published-scale preset: ViT-L trunk, half the blocks modulated, rank-10
# factors; decoder pair pinned at its full-scale size since the toy decoder
# configs do not apply at this scale.
VITL_PRESET = {
    "depth": 24,
    "embed_dim": 1024,
    "heads": 16,
    "patch": 16,
    "image_side": 1024,
    "lora_rank": 10,
    "modulated_fraction": 0.5,
}
VITL_DECODER_PAIR_PARAMS = 7_740_000
VITL_PROMPT_DIM = 256

_TRAIN_FIELDS = (
    "lr", "epochs", "batch", "seed", "image_side", "patch", "depth", "embed_dim",
    "heads", "lora_rank", "lora_alpha", "modulated_fraction", "modulator_kind",
    "prompt_k", "modality_tags", "decoder_regime", "use_null_token",
    "cross_attn_layers", "mask_tokens", "upsample_stages",
)


def _parse_modalities(text: str) -> tuple[str, ...]:
    tags = tuple(t.strip() for t in text.split(",") if t.strip())
    return tags


def _fraction(text: str) -> float:
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _merged_train_config(args, parser) -> TrainConfig:
    payload = {}
    if getattr(args, "config", None):
        payload = json.loads(Path(args.config).read_text())
    for k in _TRAIN_FIELDS:
        v = getattr(args, k, None)
        if v is not None:
            payload[k] = v
    try:
        return TrainConfig.from_dict(payload)
    except (TypeError, ScribsalError) as e:
        parser.error(f"invalid configuration: {e}")


def cmd_synth(args, parser) -> int:
    if args.n < 1:
        parser.error("--n must be >= 1")
    if not args.modalities:
        parser.error("--modalities must name at least 'v'")
    manifest = synth_dataset(
        args.root, args.n, args.side, set(args.modalities), args.seed, args.split
    )
    print(f"wrote {manifest.counts} samples under {manifest.root}")
    return 0


def cmd_train(args, parser) -> int:
    config = _merged_train_config(args, parser)
    manifest = DatasetManifest.load(args.data)
    best = fit(manifest, config, args.out, resume_from=args.resume)
    print(f"best checkpoint: {best}")
    return 0


def cmd_predict(args, parser) -> int:
    manifest = DatasetManifest.load(args.data)
    out = infer(args.checkpoint, manifest, args.out)
    print(f"predictions written to {out}")
    return 0


def cmd_eval(args, parser) -> int:
    if not args.pair:
        parser.error("need at least one --pair PRED_DIR GT_DIR")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for pred_dir, gt_dir in args.pair:
        report = metrics_mod.evaluate(pred_dir, gt_dir)
        metrics_mod.write_csv(report, out_dir / f"{report.name}_per_image.csv")
        reports.append(report)
        d = report.dataset
        print(
            f"{report.name}: S={d.s:.4f} maxF={d.max_f:.4f} "
            f"maxE={d.max_e:.4f} MAE={d.mae:.4f} (n={report.counts})"
        )
    combined = metrics_mod.overall(reports, weighted=not args.unweighted)
    d = combined.dataset
    print(
        f"overall: S={d.s:.4f} maxF={d.max_f:.4f} maxE={d.max_e:.4f} "
        f"MAE={d.mae:.4f} (n={combined.counts})"
    )
    metrics_mod.write_summary(reports + [combined], out_dir / "summary.json")
    return 0


def cmd_sample_prompts(args, parser) -> int:
    with Image.open(args.scribble) as im:
        scribble = ScribbleMap(np.asarray(im))
    prompts = sample_points(scribble, args.k, args.seed)
    print(json.dumps(prompts.to_json()))
    return 0


def cmd_params(args, parser) -> int:
    overrides = {}
    if args.preset == "vitl":
        overrides.update(VITL_PRESET)
    for key in ("depth", "embed_dim", "heads", "lora_rank", "modulated_fraction",
                "image_side", "patch"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = v
    try:
        enc_cfg = EncoderConfig(**overrides)
    except ScribsalError as e:
        parser.error(str(e))

    if args.preset == "vitl":
        decoder_pair = VITL_DECODER_PAIR_PARAMS
        prompt_params = point_encoder_trainable_count(VITL_PROMPT_DIM)
    else:
        tc = TrainConfig(
            embed_dim=enc_cfg.embed_dim, heads=enc_cfg.heads,
            depth=enc_cfg.depth, patch=enc_cfg.patch,
            image_side=enc_cfg.image_side, lora_rank=enc_cfg.lora_rank,
            modulated_fraction=enc_cfg.modulated_fraction,
        )
        decoder_pair = 2 * decoder_branch_param_count(tc.decoder_config())
        prompt_params = point_encoder_trainable_count(enc_cfg.embed_dim)

    breakdown = count_trainable_params(
        enc_cfg, args.modalities, decoder_pair, prompt_params, args.kind
    )
    print(f"modulators ({args.kind}): {breakdown.modulators:,}")
    for m, c in breakdown.per_modality.items():
        print(f"  modality {m}: {c:,}")
    print(f"decoder pair: {breakdown.decoders:,}")
    print(f"prompt encoder (trainable): {breakdown.prompt_encoder:,}")
    print(f"total trainable: {breakdown.total_trainable:,}")
    print(f"frozen encoder: {breakdown.frozen:,}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scribsal",
        description="Scribble-supervised multimodal salient object detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multimodal dataset")
    p.add_argument("--root", required=True, help="output dataset root")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--side", type=int, default=64, help="raster side in px")
    p.add_argument("--modalities", type=_parse_modalities, default=("v", "d", "t"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train", choices=("train", "test"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a scribble-annotated dataset")
    p.add_argument("--data", required=True, help="dataset root or manifest path")
    p.add_argument("--out", required=True, help="run directory for checkpoints/logs")
    p.add_argument("--config", help="JSON config file; flags override fields")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--lr", type=float, help="initial learning rate (default 5e-5)")
    p.add_argument("--epochs", type=int, help="training epochs (default 20)")
    p.add_argument("--batch", type=int, help="batch size (default 1)")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--image-side", dest="image_side", type=int,
                   help="square input side (default 64; use 256 or 1024 at scale)")
    p.add_argument("--patch", type=int, help="patch size (default 16)")
    p.add_argument("--depth", type=int, help="encoder blocks (default 8; 24 at ViT-L)")
    p.add_argument("--embed-dim", dest="embed_dim", type=int,
                   help="encoder width (default 96)")
    p.add_argument("--heads", type=int, help="attention heads (default 4)")
    p.add_argument("--rank", dest="lora_rank", type=int,
                   help="low-rank factor rank (default 4; 10 at ViT-L)")
    p.add_argument("--alpha", dest="lora_alpha", type=float,
                   help="delta scale numerator (default: rank, i.e. scale 1)")
    p.add_argument("--fraction", dest="modulated_fraction", type=_fraction,
                   help="modulated fraction of last blocks: 1/3, 1/2, 2/3 (default 1/2)")
    p.add_argument("--modulator", dest="modulator_kind",
                   choices=("lora", "adapter", "none"),
                   help="modality modulator kind (default lora)")
    p.add_argument("--k", dest="prompt_k", type=int,
                   help="points sampled per prompt (default 10)")
    p.add_argument("--modalities", dest="modality_tags", type=_parse_modalities,
                   help="comma list from {v,d,t} (default v)")
    p.add_argument("--regime", dest="decoder_regime",
                   choices=("siamese", "prompt_only", "noprompt_only"),
                   help="decoder training regime (default siamese)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write saliency PNGs for a test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pair", nargs=2, action="append", metavar=("PRED_DIR", "GT_DIR"),
                   help="one dataset to score; repeatable")
    p.add_argument("--out", default="eval_out", help="directory for CSV/JSON reports")
    p.add_argument("--unweighted", action="store_true",
                   help="aggregate datasets by simple mean instead of image count")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample-prompts", help="draw labeled points from a scribble PNG")
    p.add_argument("--scribble", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample_prompts)

    p = sub.add_parser("params", help="trainable/frozen parameter accounting")
    p.add_argument("--preset", choices=("toy", "vitl"), default="toy")
    p.add_argument("--modalities", type=_parse_modalities, default=("v",))
    p.add_argument("--kind", choices=("lora", "adapter", "none"), default="lora")
    p.add_argument("--depth", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--rank", dest="lora_rank", type=int)
    p.add_argument("--fraction", dest="modulated_fraction", type=_fraction)
    p.add_argument("--image-side", dest="image_side", type=int)
    p.add_argument("--patch", type=int)
    p.set_defaults(func=cmd_params)

    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("SCRIBSAL_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except ScribsalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
