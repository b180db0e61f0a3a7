import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from scribsal.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_synth_and_rerun_identical(tmp_path, capsys):
    args = ["synth", "--root", str(tmp_path / "d"), "--n", "2", "--side", "64",
            "--modalities", "v,d", "--seed", "7"]
    code, out, _ = run(capsys, *args)
    assert code == 0 and "2 samples" in out

    def digest(root):
        return [hashlib.md5(p.read_bytes()).hexdigest()
                for p in sorted(Path(root).rglob("*.png"))]

    first = digest(tmp_path / "d")
    assert run(capsys, *args)[0] == 0
    assert digest(tmp_path / "d") == first


def test_synth_rejects_zero_samples(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--root", str(tmp_path / "z"), "--n", "0"])
    assert exc.value.code == 2


def test_full_pipeline(tmp_path, capsys):
    root = tmp_path / "data"
    code, _, _ = run(capsys, "synth", "--root", str(root), "--n", "2",
                     "--side", "64", "--modalities", "v,d", "--seed", "3")
    assert code == 0

    run_dir = tmp_path / "run"
    code, out, _ = run(
        capsys, "train", "--data", str(root), "--out", str(run_dir),
        "--epochs", "1", "--depth", "2", "--embed-dim", "32", "--heads", "4",
        "--rank", "4", "--modalities", "v,d", "--lr", "1e-3", "--k", "4",
    )
    assert code == 0 and "best checkpoint" in out
    best = run_dir / "best.ckpt"
    assert best.exists()

    pred_dir = tmp_path / "preds"
    code, out, _ = run(capsys, "predict", "--checkpoint", str(best),
                       "--data", str(root), "--out", str(pred_dir))
    assert code == 0
    assert len(list(pred_dir.glob("*.png"))) == 2

    eval_dir = tmp_path / "eval"
    code, out, _ = run(capsys, "eval", "--pair", str(pred_dir), str(root / "gt"),
                       "--out", str(eval_dir))
    assert code == 0
    assert "overall:" in out
    summary = json.loads((eval_dir / "summary.json").read_text())
    assert "overall" in summary
    assert (eval_dir / "preds_per_image.csv").exists()


def test_train_config_file_with_flag_override(tmp_path, capsys):
    root = tmp_path / "data"
    run(capsys, "synth", "--root", str(root), "--n", "1", "--side", "64",
        "--modalities", "v", "--seed", "1")
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({
        "epochs": 5, "depth": 2, "embed_dim": 32, "heads": 4, "lora_rank": 4,
        "modality_tags": ["v"], "lr": 1e-3, "prompt_k": 4,
    }))
    code, out, _ = run(
        capsys, "train", "--data", str(root), "--out", str(tmp_path / "run"),
        "--config", str(cfg_file), "--epochs", "1",  # flag wins over file
    )
    assert code == 0
    log = (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()
    assert len(log) == 1  # 1 epoch x 1 sample


def test_eval_mismatch_exits_one(tmp_path, capsys):
    from PIL import Image

    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(a / "x.png")
    Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(b / "y.png")
    code, _, err = run(capsys, "eval", "--pair", str(a), str(b),
                       "--out", str(tmp_path / "out"))
    assert code == 1
    assert "mismatch" in err


def test_sample_prompts_output(tmp_path, capsys):
    from PIL import Image

    scr = np.zeros((16, 16), dtype=np.uint8)
    scr[2:5, 2:10] = 1
    scr[10:12, 2:10] = 2
    path = tmp_path / "scr.png"
    Image.fromarray(scr, mode="L").save(path)
    code, out, _ = run(capsys, "sample-prompts", "--scribble", str(path),
                       "--k", "6", "--seed", "0")
    assert code == 0
    points = json.loads(out)
    assert len(points) == 6
    for x, y, label in points:
        assert scr[y, x] == (1 if label == "positive" else 2)


def test_params_vitl_preset(capsys):
    code, out, _ = run(capsys, "params", "--preset", "vitl",
                       "--modalities", "v,d", "--rank", "10")
    assert code == 0
    assert "1,474,560" in out
    total = int(out.split("total trainable:")[1].splitlines()[0].strip().replace(",", ""))
    assert abs(total - 9_240_000) / 9_240_000 < 0.05


def test_params_toy_counts_match_model(capsys):
    code, out, _ = run(capsys, "params", "--modalities", "v,d", "--depth", "2",
                       "--embed-dim", "32", "--heads", "4", "--rank", "4")
    assert code == 0
    lora = int(out.split("modulators (lora):")[1].splitlines()[0].strip().replace(",", ""))
    assert lora == 2 * 32 * 4 * 3 * 1 * 2  # one modulated layer at depth 2


def test_help_shows_paper_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for needle in ("5e-5", "20", "10"):
        assert needle in out


@pytest.mark.parametrize(
    "cmd", ["synth", "train", "predict", "eval", "sample-prompts", "params"]
)
def test_every_subcommand_has_help(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
