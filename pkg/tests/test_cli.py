"""End-to-end command-line flows against tiny datasets."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from querytrack.cli import main
from querytrack.ppm import load_pgm

MODEL_FLAGS = ["--stages", "2", "--frames-per-clip", "4", "--frame-size", "32",
               "--patch-size", "8", "--channels", "8", "--window-radius", "1",
               "--top-n", "2", "--pool-size", "2", "--backbone-depth", "1",
               "--max-frames", "4"]


def _gen(out, pairs=2, seed=3):
    return main(["gen-data", "--pairs", str(pairs), "--clip-len", "4",
                 "--canvas", "32", "--seed", str(seed), "--out", str(out)])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A generated dataset plus one short training run, shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    assert _gen(root / "data") == 0
    assert main(["train", "--data", str(root / "data"),
                 "--out", str(root / "run"), "--iterations", "2",
                 "--seed", "0"] + MODEL_FLAGS) == 0
    return root


# ----------------------------------------------------------------- gen-data

def test_gen_data_writes_a_loadable_dataset(tmp_path, capsys):
    assert _gen(tmp_path / "d", pairs=1) == 0
    lines = capsys.readouterr().out.strip().split("\n")
    assert len(lines) == 2
    echo = json.loads(lines[0])
    assert echo["command"] == "gen-data"
    assert echo["scene"]["canvas"] == 32
    stats = json.loads(lines[1])["stats"]
    assert stats["pairs"] == 1
    assert (tmp_path / "d" / "manifest.json").exists()
    assert (tmp_path / "d" / "pair_00000" / "query.ppm").exists()


def test_gen_data_is_deterministic(tmp_path):
    assert _gen(tmp_path / "a", pairs=1) == 0
    assert _gen(tmp_path / "b", pairs=1) == 0
    for name in ("manifest.json", "pair_00000/annotation.json",
                 "pair_00000/query.ppm", "pair_00000/frame_0002.ppm"):
        assert ((tmp_path / "a" / name).read_bytes()
                == (tmp_path / "b" / name).read_bytes()), name


def test_gen_data_rejects_nonpositive_pairs(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        main(["gen-data", "--pairs", "0", "--out", str(tmp_path / "d")])
    assert err.value.code == 2
    assert "--pairs must be a positive integer" in capsys.readouterr().err


def test_unknown_config_section_fails_cleanly(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"scena": {}}')
    rc = main(["gen-data", "--pairs", "1", "--out", str(tmp_path / "d"),
               "--config", str(cfg)])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ")
    assert "unknown config sections ['scena']" in err


def test_scene_flags_override_config_file(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"scene": {"canvas": 48, "blur_prob": 0.0}}))
    assert main(["gen-data", "--pairs", "1", "--clip-len", "2",
                 "--out", str(tmp_path / "d"), "--config", str(cfg),
                 "--canvas", "32"]) == 0
    ann = json.loads(
        (tmp_path / "d" / "pair_00000" / "annotation.json").read_text())
    assert ann["scene"]["canvas"] == 32       # flag wins
    assert ann["scene"]["blur_prob"] == 0.0   # file survives
    capsys.readouterr()


# -------------------------------------------------------------------- train

def test_train_artifacts_and_echo(workspace, capsys):
    run = workspace / "run"
    assert (run / "checkpoint.bin").exists()
    assert (run / "model_config.json").exists()
    lines = (run / "loss.csv").read_text().strip().split("\n")
    assert lines[0] == "iter,stage_1,stage_2,total"
    assert len(lines) == 3


def test_train_reads_model_and_train_sections(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    model = {"stages": 2, "frames_per_clip": 4, "frame_size": 32,
             "patch_size": 8, "channels": 8, "window_radius": 1, "top_n": 2,
             "pool_size": 2, "backbone_depth": 1, "max_frames": 4}
    cfg.write_text(json.dumps({"model": model, "train": {"iterations": 2}}))
    assert _gen(tmp_path / "d", pairs=1) == 0
    assert main(["train", "--data", str(tmp_path / "d"),
                 "--out", str(tmp_path / "r"), "--config", str(cfg),
                 "--iterations", "1"]) == 0
    out_lines = capsys.readouterr().out.strip().split("\n")
    done = json.loads(out_lines[-1])
    assert set(done) >= {"checkpoint", "loss_log", "first_loss", "final_loss"}
    # The --iterations flag overrode the config file's 2.
    assert len((tmp_path / "r" / "loss.csv").read_text()
               .strip().split("\n")) == 2


def test_train_rejects_unknown_train_field(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"momentum": 0.9}}))
    assert _gen(tmp_path / "d", pairs=1) == 0
    rc = main(["train", "--data", str(tmp_path / "d"),
               "--out", str(tmp_path / "r"), "--config", str(cfg)]
              + MODEL_FLAGS)
    assert rc == 1
    assert "unknown train config fields ['momentum']" in capsys.readouterr().err


# -------------------------------------------------------------------- infer

def test_infer_writes_one_line_per_pair(workspace, capsys):
    preds = workspace / "preds.jsonl"
    assert main(["infer", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
                 "--data", str(workspace / "data"),
                 "--out", str(preds)]) == 0
    tail = json.loads(capsys.readouterr().out.strip().split("\n")[-1])
    assert tail["pairs"] == 2
    lines = preds.read_text().strip().split("\n")
    assert len(lines) == 2
    ids = [json.loads(line)["pair_id"] for line in lines]
    assert ids == ["pair_00000", "pair_00001"]


def test_infer_dumps_attention_and_boxes(workspace, capsys):
    attn = workspace / "attn"
    boxes = workspace / "boxes.jsonl"
    assert main(["infer", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
                 "--data", str(workspace / "data"),
                 "--out", str(workspace / "preds2.jsonl"),
                 "--dump-attention", str(attn),
                 "--dump-boxes", str(boxes)]) == 0
    capsys.readouterr()
    # Saliency exists on the one non-final stage: 2 pairs x 4 frames.
    pgms = sorted(os.listdir(attn))
    assert len(pgms) == 8
    assert pgms[0] == "pair_00000_stage1_frame0000.pgm"
    assert all("_stage1_" in name for name in pgms)
    assert load_pgm(attn / pgms[0]).shape == (32, 32)
    # Box dump covers every stage: 2 pairs x 2 stages x 4 frames.
    records = [json.loads(line) for line in
               boxes.read_text().strip().split("\n")]
    assert len(records) == 16
    assert {r["stage"] for r in records} == {1, 2}
    for r in records:
        assert set(r) == {"pair_id", "stage", "frame", "box", "score"}
        assert len(r["box"]) == 4
        assert 0.0 < r["score"] < 1.0


def test_infer_requires_checkpoint(workspace, capsys):
    rc = main(["infer", "--checkpoint", str(workspace / "nope.bin"),
               "--data", str(workspace / "data"),
               "--out", str(workspace / "x.jsonl")])
    assert rc == 1
    assert "error: checkpoint not found" in capsys.readouterr().err


def test_infer_requires_model_config(workspace, tmp_path, capsys):
    bare = tmp_path / "checkpoint.bin"
    bare.write_bytes((workspace / "run" / "checkpoint.bin").read_bytes())
    rc = main(["infer", "--checkpoint", str(bare),
               "--data", str(workspace / "data"),
               "--out", str(tmp_path / "x.jsonl")])
    assert rc == 1
    assert "no model config" in capsys.readouterr().err


def test_infer_is_deterministic(workspace, capsys):
    a = workspace / "det_a.jsonl"
    b = workspace / "det_b.jsonl"
    for out in (a, b):
        assert main(["infer",
                     "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
                     "--data", str(workspace / "data"),
                     "--out", str(out)]) == 0
    capsys.readouterr()
    assert a.read_bytes() == b.read_bytes()


# --------------------------------------------------------------------- eval

def test_eval_prints_the_four_metrics(workspace, capsys):
    preds = workspace / "eval_preds.jsonl"
    assert main(["infer", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
                 "--data", str(workspace / "data"), "--out", str(preds)]) == 0
    report = workspace / "report.json"
    assert main(["eval", "--predictions", str(preds),
                 "--data", str(workspace / "data"),
                 "--out", str(report)]) == 0
    metrics = json.loads(capsys.readouterr().out.strip().split("\n")[-1])
    assert set(metrics) == {"temporal_ap_25", "tube_ap_25", "recovery_pct",
                            "success_pct"}
    for value in metrics.values():
        assert 0.0 <= value <= 100.0
    saved = json.loads(report.read_text())
    assert saved["temporal_ap_25"] == metrics["temporal_ap_25"]
    assert len(saved["pairs"]) == 2


def test_eval_rejects_predictions_for_unknown_pairs(workspace, tmp_path,
                                                    capsys):
    rogue = tmp_path / "rogue.jsonl"
    rogue.write_text('{"pair_id": "mystery", "start": null, "end": null, '
                     '"boxes": null, "peak_score": null}\n')
    rc = main(["eval", "--predictions", str(rogue),
               "--data", str(workspace / "data")])
    assert rc == 1
    assert "unknown pairs" in capsys.readouterr().err


# ---------------------------------------------------------------- gradcheck

def test_gradcheck_single_block(capsys):
    assert main(["gradcheck", "--block", "linear"]) == 0
    out = capsys.readouterr().out.strip().split("\n")
    assert json.loads(out[0])["blocks"] == ["linear"]
    assert out[1].startswith("PASS linear max_rel_err=")
    assert "tol=0.0001" in out[1]


def test_gradcheck_unknown_block(capsys):
    rc = main(["gradcheck", "--block", "flux_capacitor"])
    assert rc == 1
    assert "unknown block 'flux_capacitor'" in capsys.readouterr().err


def test_module_entry_point_and_float64_env(tmp_path):
    # `python -m querytrack` must behave like the console script; the env
    # switch is exercised in a subprocess so the dtype change cannot leak
    # into this test session.
    env = dict(os.environ, QUERYTRACK_FLOAT64="1")
    proc = subprocess.run(
        [sys.executable, "-m", "querytrack", "gradcheck", "--block", "linear"],
        capture_output=True, text=True, env=env, cwd=str(tmp_path))
    assert proc.returncode == 0, proc.stderr
    assert "PASS linear" in proc.stdout
