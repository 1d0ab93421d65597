import json

import numpy as np
import pytest

from conftest import TINY
from fusion_detect import cli, gradcheck, nn, pipeline
from fusion_detect.data.manifest import DatasetManifest, LabeledImage, save_manifest
from fusion_detect.data.transforms import write_image
from fusion_detect.detection.anchors import read_anchor_file
from fusion_detect.detection.boxes import Box
from fusion_detect.detection.model import Detection


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Config, a small written dataset and a 4-iteration checkpoint, shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert cli.main(["synth", "--config", str(root / "tiny.json"), "--n", "6", "--out", str(root / "ds")]) == 0
    assert cli.main(["train", "--config", str(root / "tiny.json"), "--manifest", str(root / "ds/manifest.jsonl"),
                     "--out", str(root / "run")]) == 0
    return root


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ("checkpoint.fdck", "config.json", "train_log.jsonl", "anchors.txt", "loss.png"):
        assert (run / name).exists(), name
    assert len((run / "train_log.jsonl").read_text().splitlines()) == 4


def test_estimate_anchors(workspace, capsys):
    out = workspace / "anchors_k1.txt"
    code = cli.main(["estimate-anchors", "--config", str(workspace / "tiny.json"),
                     "--manifest", str(workspace / "ds/manifest.jsonl"), "--k", "1", "--out", str(out)])
    assert code == 0
    assert "mean IoU" in capsys.readouterr().out
    anchors = read_anchor_file(out)
    assert anchors.k == 1
    assert len(out.read_text().splitlines()) == 1


def test_estimate_anchors_uniform_boxes(tmp_path):
    write_image(np.zeros((32, 32, 3), np.uint8), tmp_path / "a.png")
    boxes = np.array([[1, 1, 10, 6], [12, 14, 10, 6]], float)
    save_manifest(DatasetManifest([LabeledImage("a.png", boxes, ["vehicle"] * 2)], ("vehicle",), tmp_path),
                  tmp_path / "m.jsonl")
    (tmp_path / "c.json").write_text(json.dumps({"profile": "desk", "model": {"input_dims": [32, 32, 3]}}))
    assert cli.main(["estimate-anchors", "--config", str(tmp_path / "c.json"), "--manifest",
                     str(tmp_path / "m.jsonl"), "--k", "1", "--out", str(tmp_path / "a.txt")]) == 0
    assert read_anchor_file(tmp_path / "a.txt").shapes == ((10.0, 6.0),)


def test_missing_manifest_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "manifest.jsonl"
    code = cli.main(["estimate-anchors", "--manifest", str(missing), "--out", str(tmp_path / "a.txt")])
    assert code == 2
    assert str(missing) in capsys.readouterr().err


def test_usage_errors(capsys):
    assert cli.main([]) == 1
    assert cli.main(["train", "--synth"]) == 1
    assert cli.main(["bogus"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_bad_log_level(monkeypatch):
    monkeypatch.setenv("FUSION_DETECT_LOG", "loud")
    assert cli.main(["gradcheck"]) == 1


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"lr": 1}}))
    assert cli.main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2
    assert "train.lr: unknown key" in capsys.readouterr().err


def test_detect_twice_identical(workspace):
    ck = workspace / "run/checkpoint.fdck"
    outs = []
    for i in range(2):
        out = workspace / f"det{i}.json"
        assert cli.main(["detect", "--checkpoint", str(ck), "--dir", str(workspace / "ds/images"),
                         "--out", str(out)]) == 0
        outs.append(out.read_text())
    assert outs[0] == outs[1]
    data = json.loads(outs[0])
    assert [d["image"] for d in data] == [f"scene_{i:05d}.png" for i in range(6)]
    for d in data:
        for det in d["detections"]:
            assert set(det) == {"box", "label", "score"} and det["label"] == "vehicle"


def test_detect_resizes_other_sizes(workspace, tmp_path):
    write_image(np.full((48, 80, 3), 120, np.uint8), tmp_path / "wide.png")
    out = tmp_path / "d.json"
    assert cli.main(["detect", "--checkpoint", str(workspace / "run/checkpoint.fdck"),
                     "--image", str(tmp_path / "wide.png"), "--out", str(out), "--annotate",
                     str(tmp_path / "ann")]) == 0
    (res,) = json.loads(out.read_text())
    for det in res["detections"]:
        b = det["box"]
        assert 0 <= b["x"] and b["x"] + b["w"] <= 80 + 1e-9 and b["y"] + b["h"] <= 48 + 1e-9
    assert (tmp_path / "ann/wide.png").exists()


def test_detect_empty_dir(workspace, tmp_path):
    (tmp_path / "empty").mkdir()
    out = tmp_path / "d.json"
    assert cli.main(["detect", "--checkpoint", str(workspace / "run/checkpoint.fdck"),
                     "--dir", str(tmp_path / "empty"), "--out", str(out)]) == 0
    assert json.loads(out.read_text()) == []


def test_corrupt_checkpoint(workspace, tmp_path, capsys):
    data = bytearray((workspace / "run/checkpoint.fdck").read_bytes())
    data[100] ^= 1
    (tmp_path / "bad.fdck").write_bytes(bytes(data))
    code = cli.main(["detect", "--checkpoint", str(tmp_path / "bad.fdck"), "--dir", str(tmp_path)])
    assert code == 2
    assert "format version" in capsys.readouterr().err


def test_resume_matches_uninterrupted(workspace):
    cfg = str(workspace / "tiny.json")
    man = str(workspace / "ds/manifest.jsonl")
    assert cli.main(["train", "--config", cfg, "--manifest", man, "--iterations", "2",
                     "--out", str(workspace / "half")]) == 0
    assert cli.main(["train", "--resume", str(workspace / "half/checkpoint.fdck"), "--manifest", man,
                     "--iterations", "4", "--out", str(workspace / "resumed")]) == 0
    assert (workspace / "resumed/checkpoint.fdck").read_bytes() == \
        (workspace / "run/checkpoint.fdck").read_bytes()


def test_eval_report(workspace, capsys):
    out = workspace / "eval"
    assert cli.main(["eval", "--checkpoint", str(workspace / "run/checkpoint.fdck"),
                     "--manifest", str(workspace / "ds/manifest.jsonl"), "--split", "all",
                     "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    (row,) = report["rows"]
    n_gt = sum(len(json.loads(l)["boxes"]) for l in
               (workspace / "ds/manifest.jsonl").read_text().splitlines())
    assert row["tp"] + row["fn"] == n_gt
    assert row["fps"] > 0
    assert (out / "report.txt").exists() and (out / "report.png").exists()
    assert "Frame Rate (fps)" in capsys.readouterr().out


def test_eval_perfect_detector(workspace, monkeypatch):
    def perfect(model, images, cfg, batch=16):
        return [[Detection(Box.from_array(b), 1, 1.0) for b in gt] for gt in boxes]
    data = pipeline.load_images(pipeline.read_manifest(workspace / "ds/manifest.jsonl"), (32, 32))
    boxes = data.boxes
    monkeypatch.setattr(pipeline, "detect_images", perfect)
    out = workspace / "eval_perfect"
    assert cli.main(["eval", "--checkpoint", str(workspace / "run/checkpoint.fdck"), "--manifest",
                     str(workspace / "ds/manifest.jsonl"), "--split", "all", "--no-figure",
                     "--out", str(out)]) == 0
    (row,) = json.loads((out / "report.json").read_text())["rows"]
    assert (row["tpr"], row["fdr"]) == (100.0, 0.0)


def test_eval_no_gt_marks_undefined(workspace, tmp_path):
    write_image(np.zeros((32, 32, 3), np.uint8), tmp_path / "a.png")
    write_image(np.zeros((32, 32, 3), np.uint8), tmp_path / "b.png")
    recs = [LabeledImage(n, np.zeros((0, 4)), []) for n in ("a.png", "b.png")]
    save_manifest(DatasetManifest(recs, ("vehicle",), tmp_path), tmp_path / "m.jsonl")
    assert cli.main(["eval", "--checkpoint", str(workspace / "run/checkpoint.fdck"), "--manifest",
                     str(tmp_path / "m.jsonl"), "--split", "all", "--no-figure",
                     "--out", str(tmp_path / "out")]) == 0
    (row,) = json.loads((tmp_path / "out/report.json").read_text())["rows"]
    assert row["tpr"] is None
    assert "undefined" in (tmp_path / "out/report.txt").read_text()


def test_gradcheck_same_seed_identical(tmp_path, monkeypatch):
    # restrict to the quick components; the full default run is exercised elsewhere
    fast = {k: gradcheck.COMPONENTS[k] for k in ("conv", "roi_pool", "rpn_loss")}
    monkeypatch.setattr(gradcheck, "COMPONENTS", fast)
    for i in range(2):
        assert cli.main(["gradcheck", "--seed", "5", "--out", str(tmp_path / f"g{i}.json")]) == 0
    assert (tmp_path / "g0.json").read_text() == (tmp_path / "g1.json").read_text()


def test_gradcheck_corrupted_backward_fails(monkeypatch, capsys):
    fast = {k: gradcheck.COMPONENTS[k] for k in ("relu", "maxpool")}
    monkeypatch.setattr(gradcheck, "COMPONENTS", fast)
    real = nn.relu_backward
    monkeypatch.setattr(gradcheck.nn, "relu_backward", lambda x, g: real(x, g) * 0.9)
    assert cli.main(["gradcheck"]) == 3
    err = capsys.readouterr().err
    assert "relu" in err and "maxpool" not in err
