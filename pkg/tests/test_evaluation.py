"""Tests for BD-rate, rate curves, mode statistics and prediction reports."""

from __future__ import annotations

import math

import numpy as np
import pytest

from itnn_codec.codec import NN_MODE, BlockRecord
from itnn_codec.errors import CurveError, UnsupportedBlockSizeError
from itnn_codec.evaluation import (
    REPORT_FIELDS,
    RateCurve,
    RatePoint,
    bd_rate,
    corpus_rate_curve,
    measure_corpus,
    frequency_rows,
    mode_frequencies,
    mode_frequency_delta,
    plot_rate_curves,
    prediction_report,
    read_curve_csv,
    write_curve_csv,
    write_report_csv,
)
from itnn_codec.frame_io import Corpus, LuminancePlane

ANCHOR = RateCurve.from_pairs([(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 39.0)])


def _records(modes, w=8, qp=32):
    return [BlockRecord(x=0, y=0, h=w, w=w, n0=0, n1=0, s=mode, d_nn=None, d_c=None, qp=qp) for mode in modes]


def test_identical_curves_have_zero_bd_rate():
    assert bd_rate(ANCHOR, ANCHOR) == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize(("factor", "expected"), [(0.95, -5.0), (1.10, 10.0)])
def test_scaled_rates(factor, expected):
    assert bd_rate(ANCHOR, ANCHOR.scaled(factor)) == pytest.approx(expected, abs=1e-6)


def test_bd_rate_is_reciprocal():
    test = RateCurve.from_pairs([(0.09, 30.5), (0.17, 33.2), (0.35, 36.4), (0.75, 39.1)])
    forward = bd_rate(ANCHOR, test) / 100.0
    backward = bd_rate(test, ANCHOR) / 100.0
    assert (1 + forward) * (1 + backward) == pytest.approx(1.0)


def test_bd_rate_without_overlap():
    far = RateCurve.from_pairs([(0.1, 50.0), (0.2, 53.0), (0.4, 56.0), (0.8, 59.0)])
    with pytest.raises(CurveError, match="overlap"):
        bd_rate(ANCHOR, far)


def test_bd_rate_rejects_duplicate_or_infinite_psnr():
    duplicate = RateCurve.from_pairs([(0.1, 30.0), (0.2, 30.0), (0.4, 36.0), (0.8, 39.0)])
    with pytest.raises(CurveError):
        bd_rate(ANCHOR, duplicate)
    lossless = RateCurve.from_pairs([(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (8.0, math.inf)])
    with pytest.raises(CurveError):
        bd_rate(lossless, ANCHOR)


def test_curve_validation():
    with pytest.raises(CurveError):
        RateCurve.from_pairs([(0.1, 30.0), (0.2, 33.0), (0.4, 36.0)])
    with pytest.raises(CurveError):
        RateCurve.from_pairs([(0.1, 30.0), (0.1, 33.0), (0.4, 36.0), (0.8, 39.0)])
    with pytest.raises(CurveError):
        RateCurve.from_pairs([(0.0, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 39.0)])


def test_curve_points_are_sorted_by_rate():
    curve = RateCurve.from_pairs([(0.8, 39.0), (0.1, 30.0), (0.4, 36.0), (0.2, 33.0)])
    assert curve.rates.tolist() == [0.1, 0.2, 0.4, 0.8]


def test_curve_csv_round_trip(tmp_path):
    curve = RateCurve(tuple(RatePoint(p.bpp, p.psnr, qp=20 + k, nn_ratio=0.25) for k, p in enumerate(ANCHOR.points)))
    loaded = read_curve_csv(write_curve_csv(curve, tmp_path / "curve.csv"))
    assert loaded == curve

    (tmp_path / "bad.csv").write_text("rate,quality\n1,2\n")
    with pytest.raises(CurveError):
        read_curve_csv(tmp_path / "bad.csv")


def test_plot_writes_svg(tmp_path):
    path = plot_rate_curves({"anchor": ANCHOR, "test": ANCHOR.scaled(0.9)}, tmp_path / "rd.svg")
    assert "<svg" in path.read_text()


def test_mode_frequencies():
    table = mode_frequencies(_records([NN_MODE, NN_MODE, 0, 1]) + _records([0], w=4))
    assert table[(8, 32)][NN_MODE] == 50.0
    assert table[(8, 32)][0] == 25.0
    assert table[(4, 32)][0] == 100.0
    assert sum(table[(8, 32)].values()) == pytest.approx(100.0)


def test_mode_frequency_delta():
    delta = mode_frequency_delta(_records([0, 0]), _records([NN_MODE, NN_MODE]))
    assert delta[(8, 32)][NN_MODE] == 100.0
    assert delta[(8, 32)][0] == -100.0
    assert sum(delta[(8, 32)].values()) == pytest.approx(0.0)
    rows = frequency_rows(delta)
    assert len(rows) == NN_MODE + 1
    assert rows[0] == {"size": 8, "qp": 32, "mode": 0, "percent": -100.0}


def test_mode_frequency_delta_with_one_sided_group():
    delta = mode_frequency_delta(_records([0]), _records([0]) + _records([3], qp=37))
    assert delta[(8, 37)][3] == 100.0
    assert not any(delta[(8, 32)].values())


def test_mode_frequencies_need_records():
    with pytest.raises(CurveError):
        mode_frequencies([])


def test_prediction_report(small_corpus, tiny_models, tmp_path):
    rows = prediction_report(small_corpus, tiny_models, tiny_models, samples=5, seed=1, dump_dir=tmp_path / "dump")
    assert len(rows) == 5
    assert all(row["change"] == "unchanged" for row in rows)
    assert all(row["psnr_nn_i"] == row["psnr_nn_j"] for row in rows)
    assert all(8 <= row["x"] <= 64 - 16 and 8 <= row["y"] <= 64 - 16 for row in rows)
    assert len(list((tmp_path / "dump").glob("*.pgm"))) == 25
    write_report_csv(rows, tmp_path / "report.csv")
    assert (tmp_path / "report.csv").read_text().splitlines()[0] == ",".join(REPORT_FIELDS)

    again = prediction_report(small_corpus, tiny_models, tiny_models, samples=5, seed=1)
    assert [(row["image_id"], row["x"], row["y"]) for row in again] == [
        (row["image_id"], row["x"], row["y"]) for row in rows
    ]


def test_prediction_report_on_flat_image(tiny_models):
    corpus = Corpus((("flat", LuminancePlane(np.full((64, 64), 50, dtype=np.uint8))),))
    rows = prediction_report(corpus, tiny_models, tiny_models, samples=2, seed=0)
    assert all(math.isinf(row["psnr_best_classic"]) for row in rows)
    assert all(math.isinf(row["psnr_nn_i"]) for row in rows)


def test_prediction_report_unknown_size(small_corpus, tiny_models):
    with pytest.raises(UnsupportedBlockSizeError):
        prediction_report(small_corpus, tiny_models, tiny_models, samples=1, seed=0, size=(64, 64))


def test_corpus_rate_curve(corpus_dir):
    corpus = Corpus.from_directory(corpus_dir)
    corpus = Corpus(corpus.entries[:1])
    curve = corpus_rate_curve(corpus, (22, 27, 32, 37), False)
    assert [point.qp for point in curve.points] == [37, 32, 27, 22]
    assert all(point.nn_ratio == 0.0 for point in curve.points)
    assert np.all(np.diff(curve.psnrs) > 0)
    assert bd_rate(curve, curve) == pytest.approx(0.0, abs=1e-9)


def test_parallel_measurement_matches_serial(corpus_dir, tiny_models):
    corpus = Corpus.from_directory(corpus_dir)
    serial = measure_corpus(corpus, (27, 37), True, tiny_models)
    parallel = measure_corpus(corpus, (27, 37), True, tiny_models, jobs=2)
    assert parallel == serial
    assert [(m.image_id, m.qp) for m in serial][:2] == [("img_00", 27), ("img_01", 27)]
