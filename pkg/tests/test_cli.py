"""Tests for the itnn-codec command line."""

from __future__ import annotations

import json

import numpy as np
import pytest
from PIL import Image

from itnn_codec.cli import dispatch
from itnn_codec.evaluation import RateCurve, write_curve_csv
from itnn_codec.frame_io import LuminancePlane, load_pgm, save_pgm

TRAIN_FLAGS = ["--hidden-width", "8", "--stages", "3:1,2:0.1", "--batch-size", "4", "--q", "2", "--qp-set", "32"]


def _last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_encode_decode_round_trip(corpus_dir, tmp_path, capsys):
    stream = tmp_path / "img.itnc"
    records = tmp_path / "records.csv"
    code = dispatch(
        ["encode", "--in", str(corpus_dir / "img_00.pgm"), "--out", str(stream), "--qp", "27", "--dump-records", str(records)]
    )
    assert code == 0
    encoded = _last_json(capsys)
    assert encoded["nn_ratio"] == 0.0

    assert dispatch(["decode", "--in", str(stream), "--out", str(tmp_path / "out.pgm")]) == 0
    decoded = _last_json(capsys)
    assert decoded["recon_sha256"] == encoded["recon_sha256"]
    assert (decoded["width"], decoded["height"]) == (64, 64)
    assert load_pgm(tmp_path / "out.pgm").width == 64

    assert dispatch(["stats", "--records", str(records)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "size,qp,mode,percent"


def test_nn_encode_needs_models(corpus_dir, tmp_path):
    args = ["encode", "--in", str(corpus_dir / "img_00.pgm"), "--out", str(tmp_path / "x.itnc"), "--nn", "on"]
    assert dispatch(args) == 2


def test_decode_of_corrupt_stream(tmp_path):
    (tmp_path / "bad.itnc").write_bytes(b"ITNC\x01")
    assert dispatch(["decode", "--in", str(tmp_path / "bad.itnc"), "--out", str(tmp_path / "o.pgm")]) == 5


def test_usage_errors_exit_2(tmp_path):
    assert dispatch(["encode", "--bogus"]) == 2
    assert dispatch(["train-iter", "--corpus", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2


def test_invalid_config_file(tmp_path, corpus_dir):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"pipeline": {"q": "lots"}}))
    args = ["--config", str(config), "train-iter", "--corpus", str(corpus_dir), "--out", str(tmp_path / "o")]
    assert dispatch(args) == 2


def test_eval_of_identical_curves(tmp_path, capsys):
    curve = RateCurve.from_pairs([(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 39.0)])
    path = write_curve_csv(curve, tmp_path / "a.csv")
    assert dispatch(["eval", "--anchor", str(path), "--test", str(path), "--plot", str(tmp_path / "rd.svg")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# BD-rate method:")
    assert "BD-rate: 0.00%" in out
    assert (tmp_path / "rd.svg").exists()


def test_eval_needs_both_curves(tmp_path):
    curve = RateCurve.from_pairs([(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 39.0)])
    path = write_curve_csv(curve, tmp_path / "a.csv")
    assert dispatch(["eval", "--anchor", str(path)]) == 2


def test_train_then_report(corpus_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert dispatch(["train-iter", "--corpus", str(corpus_dir), "--out", str(out), "--iters", "1", *TRAIN_FLAGS]) == 0
    assert _last_json(capsys)["stages"] == ["get_partition"]
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["cleansing_stages"] == 0
    assert manifest["effective_config"]["pipeline"]["q"] == 2
    models = out / "models"
    assert (models / "model_8x8.bin").exists()

    report = tmp_path / "report.csv"
    args = [
        "report",
        "--corpus",
        str(corpus_dir),
        "--models-i",
        str(models),
        "--models-j",
        str(models),
        "--samples",
        "3",
        "--seed",
        "2",
        "--out",
        str(report),
    ]
    assert dispatch(args) == 0
    assert _last_json(capsys) == {"rows": 3, "improved": 0, "degraded": 0, "unchanged": 3}
    assert len(report.read_text().splitlines()) == 4


@pytest.mark.parametrize("flag", ["--no-cleansing", "--cold-start"])
def test_train_flags_reach_the_manifest(corpus_dir, tmp_path, flag):
    out = tmp_path / "run"
    assert dispatch(["train-iter", "--corpus", str(corpus_dir), "--out", str(out), "--iters", "2", flag, *TRAIN_FLAGS]) == 0
    manifest = json.loads((out / "iter_1" / "manifest.json").read_text())
    if flag == "--no-cleansing":
        assert not manifest["cleansing"]
    else:
        assert not manifest["warm_start"]
        assert all(entry["parent_model_sha256"] is None for entry in manifest["sizes"].values())


def test_ingest_converts_ppm_and_pgm(tmp_path, capsys):
    source = tmp_path / "raw"
    source.mkdir()
    Image.new("RGB", (3, 2), (0, 255, 0)).save(source / "green.ppm")
    save_pgm(LuminancePlane(np.full((2, 3), 200, dtype=np.uint8)), source / "light.pgm")
    out = tmp_path / "corpus"

    assert dispatch(["ingest", "--in", str(source), "--out", str(out)]) == 0

    assert _last_json(capsys) == {"ingested": 2, "output_dir": str(out)}
    assert np.all(load_pgm(out / "green.pgm").samples == 150)
    assert np.all(load_pgm(out / "light.pgm").samples == 200)
    assert dispatch(["ingest", "--in", str(tmp_path / "missing"), "--out", str(out)]) == 2
