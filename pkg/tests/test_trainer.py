import json

import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn

from conftest import tiny_config
from scribsal.checkpoint import load_archive, save_archive
from scribsal.data import DatasetManifest, load_sample, preprocess, synth_dataset
from scribsal.errors import ConfigError, NumericsError, PartitionError
from scribsal.model import build_model
from scribsal.trainer import (
    TrainConfig,
    fit,
    infer,
    init_train_state,
    load_train_state,
    partition_params,
    save_train_state,
    train_step,
)


@pytest.fixture(scope="module")
def small_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("trainer_data")
    return synth_dataset(root, n=2, side=64, modality_tags={"v", "d", "t"}, seed=11)


def _samples(manifest, config):
    return [
        preprocess(load_sample(manifest, sid), config.image_side, config.patch)
        for sid in manifest.sample_ids
    ]


# -- partition ----------------------------------------------------------------


@pytest.mark.parametrize(
    "tags", [("v",), ("v", "d"), ("v", "t"), ("v", "d", "t")]
)
def test_partition_modality_cases(tags):
    cfg = tiny_config(modality_tags=tags)
    state = init_train_state(cfg)
    part = state.partition
    assert set(part.by_modality) == set(tags)
    n_modulated = len(cfg.encoder_config().modulated_layers())
    for m in tags:
        # one (A, B) pair per projection per modulated layer
        assert len(part.by_modality[m]) == n_modulated * 3 * 2


def test_partition_exhaustive():
    state = init_train_state(tiny_config())
    part = state.partition
    n_params = sum(1 for _ in state.model.named_parameters())
    groups = (
        part.frozen,
        part.modulators,
        part.decoder_prompt,
        part.decoder_noprompt,
        part.prompt_trainable,
    )
    names = [n for g in groups for n in g]
    assert len(names) == len(set(names)) == n_params
    total = sum(p.numel() for p in state.model.parameters())
    assert sum(part.counts().values()) == total


def test_partition_overlap_is_only_modulators():
    state = init_train_state(tiny_config())
    part = state.partition
    overlap = set(part.prompt_side) & set(part.noprompt_side)
    assert overlap == set(part.modulators)
    assert not set(part.frozen) & set(part.trainable)


def test_partition_rejects_stray_parameter():
    state = init_train_state(tiny_config())
    state.model.stray = nn.Parameter(torch.zeros(3))
    with pytest.raises(PartitionError):
        partition_params(state.model)


def test_partition_rejects_trainable_base():
    state = init_train_state(tiny_config())
    state.model.encoder.pos_embed.requires_grad_(True)
    with pytest.raises(PartitionError):
        partition_params(state.model)


# -- train_step ----------------------------------------------------------------


def test_train_step_updates_only_trainables(small_manifest):
    cfg = tiny_config(modality_tags=("v", "d", "t"))
    state = init_train_state(cfg)
    samples = _samples(small_manifest, cfg)
    frozen_before = {
        n: p.detach().clone() for n, p in state.partition.frozen.items()
    }
    trainable_before = {
        n: p.detach().clone() for n, p in state.partition.trainable.items()
    }
    for _ in range(3):
        train_step(state, samples[0])
    for n, p in state.partition.frozen.items():
        assert torch.equal(p, frozen_before[n]), n
    changed = sum(
        0 if torch.equal(p, trainable_before[n]) else 1
        for n, p in state.partition.trainable.items()
    )
    assert changed > 0


def test_optimizer_holds_no_frozen_state(small_manifest):
    cfg = tiny_config()
    state = init_train_state(cfg)
    samples = _samples(small_manifest, cfg)
    train_step(state, samples[0])
    trainable_ids = {id(p) for p in state.partition.trainable.values()}
    for p, slots in state.optimizer.state.items():
        assert id(p) in trainable_ids
        assert slots  # exp_avg etc. exist for stepped params
    frozen_ids = {id(p) for p in state.partition.frozen.values()}
    assert not frozen_ids & {id(p) for p in state.optimizer.state}


def test_modulator_none_trains_decoders_only(small_manifest):
    cfg = tiny_config(modulator_kind="none")
    state = init_train_state(cfg)
    assert state.partition.modulators == {}
    samples = _samples(small_manifest, cfg)
    bd = train_step(state, samples[0])
    assert np.isfinite(bd.to_dict()["total"])


@pytest.mark.parametrize("regime", ["prompt_only", "noprompt_only"])
def test_decoder_regimes_run(small_manifest, regime):
    cfg = tiny_config(decoder_regime=regime)
    state = init_train_state(cfg)
    samples = _samples(small_manifest, cfg)
    bd = train_step(state, samples[0])
    d = bd.to_dict()
    assert d["wbce"] == 0.0 and d["wiou"] == 0.0
    assert d["pce"] > 0.0


def test_numerics_error_on_poisoned_weights(small_manifest):
    cfg = tiny_config()
    state = init_train_state(cfg)
    samples = _samples(small_manifest, cfg)
    with torch.no_grad():
        next(iter(state.partition.decoder_prompt.values())).fill_(float("nan"))
    with pytest.raises(NumericsError):
        train_step(state, samples[0])


# -- fit: determinism, resume, checkpoints ---------------------------------------


def _read_log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_fit_deterministic_replay(small_manifest, tmp_path):
    cfg = tiny_config(epochs=2, modality_tags=("v", "d", "t"))
    fit(small_manifest, cfg, tmp_path / "run_a")
    fit(small_manifest, cfg, tmp_path / "run_b")
    log_a = _read_log(tmp_path / "run_a" / "train_log.jsonl")
    log_b = _read_log(tmp_path / "run_b" / "train_log.jsonl")
    assert log_a == log_b
    assert len(log_a) == 2 * small_manifest.counts


def test_fit_resume_matches_uninterrupted(small_manifest, tmp_path):
    cfg_full = tiny_config(epochs=3)
    fit(small_manifest, cfg_full, tmp_path / "full")

    cfg_half = tiny_config(epochs=1)
    fit(small_manifest, cfg_half, tmp_path / "part")
    fit(
        small_manifest,
        tiny_config(epochs=3),
        tmp_path / "part",
        resume_from=tmp_path / "part" / "epoch_001.ckpt",
    )

    full_log = _read_log(tmp_path / "full" / "train_log.jsonl")
    part_log = _read_log(tmp_path / "part" / "train_log.jsonl")
    assert [e for e in part_log if e["epoch"] >= 1] == [
        e for e in full_log if e["epoch"] >= 1
    ]


def test_fit_resume_rejects_config_drift(small_manifest, tmp_path):
    cfg = tiny_config(epochs=1)
    fit(small_manifest, cfg, tmp_path / "r")
    with pytest.raises(ConfigError):
        fit(
            small_manifest,
            tiny_config(epochs=2, lr=9e-4),
            tmp_path / "r2",
            resume_from=tmp_path / "r" / "epoch_001.ckpt",
        )


def test_fit_writes_epoch_and_best_checkpoints(small_manifest, tmp_path):
    cfg = tiny_config(epochs=2)
    best = fit(small_manifest, cfg, tmp_path / "ckpts")
    assert best.exists()
    assert (tmp_path / "ckpts" / "epoch_001.ckpt").exists()
    assert (tmp_path / "ckpts" / "epoch_002.ckpt").exists()


def test_train_state_checkpoint_round_trip(small_manifest, tmp_path):
    cfg = tiny_config()
    state = init_train_state(cfg)
    samples = _samples(small_manifest, cfg)
    for _ in range(2):
        train_step(state, samples[0])
    path = save_train_state(state, tmp_path / "state.ckpt")
    loaded = load_train_state(path)
    for (n1, p1), (n2, p2) in zip(
        state.model.state_dict().items(), loaded.model.state_dict().items()
    ):
        assert n1 == n2
        assert torch.equal(p1, p2), n1
    s1 = state.optimizer.state_dict()
    s2 = loaded.optimizer.state_dict()
    assert s1["param_groups"] == s2["param_groups"]
    for idx in s1["state"]:
        for slot in ("exp_avg", "exp_avg_sq", "step"):
            assert torch.equal(s1["state"][idx][slot], s2["state"][idx][slot])


def test_archive_format_is_le_float32(tmp_path):
    t = torch.tensor([1.5, -2.25, 3.125])
    path = save_archive(tmp_path / "x.ckpt", {"note": "test"}, {"t": t})
    raw = path.read_bytes()
    import struct

    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + hlen])
    assert header["meta"]["note"] == "test"
    payload = np.frombuffer(raw[8 + hlen :], dtype="<f4")
    assert payload.tolist() == [1.5, -2.25, 3.125]
    meta, tensors = load_archive(path)
    assert torch.equal(tensors["t"], t)


# -- inference -------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained_run(small_manifest, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    cfg = tiny_config(epochs=1, modality_tags=("v", "d", "t"))
    best = fit(small_manifest, cfg, out)
    return best, small_manifest


def test_infer_writes_all_predictions(trained_run, tmp_path):
    best, manifest = trained_run
    out = infer(best, manifest, tmp_path / "preds")
    files = sorted(out.glob("*.png"))
    assert len(files) == manifest.counts
    with Image.open(files[0]) as im:
        assert im.size == (64, 64)


def test_infer_prompt_branch_never_runs(trained_run, tmp_path):
    best, manifest = trained_run
    state = load_train_state(best)
    calls = []
    handle = state.model.siamese.prompt_branch.register_forward_hook(
        lambda *a: calls.append(1)
    )
    try:
        sample = preprocess(load_sample(manifest, manifest.sample_ids[0]), 64)
        from scribsal.trainer import _sample_images

        with torch.no_grad():
            fused = state.model.encode(_sample_images(sample, state.config.modality_tags))
            state.model.siamese.predict(fused, 64)
    finally:
        handle.remove()
    assert calls == []


def test_infer_png_round_trip_quantization(trained_run, tmp_path):
    best, manifest = trained_run
    out = infer(best, manifest, tmp_path / "rt")
    state = load_train_state(best)
    sid = manifest.sample_ids[0]
    sample = preprocess(load_sample(manifest, sid), 64)
    from scribsal.trainer import _sample_images

    state.model.eval()
    with torch.no_grad():
        fused = state.model.encode(_sample_images(sample, state.config.modality_tags))
        prob = state.model.siamese.predict(fused, 64)[0].numpy()
    with Image.open(out / f"{sid}.png") as im:
        saved = np.asarray(im, dtype=np.float64) / 255.0
    assert np.abs(saved - prob).max() <= 1.0 / 255.0


def test_infer_missing_modality_rejected(trained_run, tmp_path):
    best, _ = trained_run
    rgb_only = synth_dataset(
        tmp_path / "rgb_only", n=1, side=64, modality_tags={"v"}, seed=2
    )
    with pytest.raises(ConfigError):
        infer(best, rgb_only, tmp_path / "nope")


def test_train_config_round_trip():
    cfg = tiny_config(modality_tags=("v", "t"), modulated_fraction=1 / 3)
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_batch_averaging_runs(small_manifest, tmp_path):
    cfg = tiny_config(epochs=1, batch=2)
    fit(small_manifest, cfg, tmp_path / "batched")
    log = _read_log(tmp_path / "batched" / "train_log.jsonl")
    assert len(log) == small_manifest.counts
    # two samples in one optimizer step share the step counter
    assert log[0]["step"] == log[1]["step"]
