"""Tests for PGM parsing, RGB conversion and PSNR."""

from __future__ import annotations

import math

import numpy as np
import pytest
from PIL import Image

from itnn_codec.errors import (
    DimensionMismatchError,
    FrameFormatError,
    PgmHeaderError,
    TruncatedPayloadError,
    UnsupportedMaxvalError,
)
from itnn_codec.frame_io import (
    Corpus,
    LuminancePlane,
    ingest_directory,
    load_pgm,
    parse_pgm,
    psnr,
    rgb_array_to_luma,
    rgb_to_luma,
    save_pgm,
)


def test_parse_2x2_pgm():
    plane = parse_pgm(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    assert (plane.width, plane.height) == (2, 2)
    assert plane.samples.ravel().tolist() == [0, 255, 128, 64]


def test_parse_header_with_comment():
    plane = parse_pgm(b"P5\n# written by hand\n3 1\n255\n" + bytes([1, 2, 3]))
    assert plane.samples.tolist() == [[1, 2, 3]]


def test_parse_rejects_16_bit():
    with pytest.raises(UnsupportedMaxvalError, match="unsupported maxval"):
        parse_pgm(b"P5\n1 1\n65535\n" + bytes(2))


def test_parse_rejects_truncated_payload():
    with pytest.raises(TruncatedPayloadError, match="truncated"):
        parse_pgm(b"P5\n4 4\n255\n" + bytes(15))


@pytest.mark.parametrize("data", [b"P6\n1 1\n255\n\x00", b"P5\n1\n", b""])
def test_parse_rejects_bad_header(data):
    with pytest.raises(PgmHeaderError):
        parse_pgm(data)


def test_save_then_load(tmp_path):
    plane = LuminancePlane(np.arange(12, dtype=np.uint8).reshape(3, 4))
    save_pgm(plane, tmp_path / "a.pgm")
    loaded = load_pgm(tmp_path / "a.pgm")
    assert np.array_equal(loaded.samples, plane.samples)


def test_plane_is_read_only():
    plane = LuminancePlane(np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(ValueError, match="read-only"):
        plane.samples[0, 0] = 1


def test_plane_rejects_out_of_range_samples():
    with pytest.raises(FrameFormatError):
        LuminancePlane(np.array([[0, 256]]))


@pytest.mark.parametrize(
    ("rgb", "luma"),
    [((0, 0, 0), 0), ((255, 255, 255), 255), ((255, 0, 0), 76), ((0, 255, 0), 150), ((0, 0, 255), 29)],
)
def test_rgb_to_luma(rgb, luma):
    assert rgb_to_luma(*rgb) == luma
    assert rgb_array_to_luma(np.array([[rgb]]))[0, 0] == luma


def test_psnr_examples():
    same = LuminancePlane(np.full((2, 2), 7, dtype=np.uint8))
    assert psnr(same, same) == math.inf
    assert psnr(LuminancePlane(np.array([[0]])), LuminancePlane(np.array([[255]]))) == pytest.approx(0.0)
    a = LuminancePlane(np.array([[100, 100]]))
    b = LuminancePlane(np.array([[110, 90]]))
    assert psnr(a, b) == pytest.approx(10 * math.log10(255**2 / 100), abs=1e-9)
    assert psnr(a, b) == pytest.approx(28.13, abs=0.01)


def test_psnr_rejects_mismatched_planes():
    with pytest.raises(DimensionMismatchError):
        psnr(LuminancePlane(np.zeros((2, 2))), LuminancePlane(np.zeros((2, 3))))


def test_corpus_orders_by_identifier():
    plane = LuminancePlane(np.zeros((1, 1)))
    corpus = Corpus((("b", plane), ("a", plane), ("c", plane)))
    assert [image_id for image_id, _ in corpus] == ["a", "b", "c"]


def test_corpus_rejects_duplicates():
    plane = LuminancePlane(np.zeros((1, 1)))
    with pytest.raises(FrameFormatError):
        Corpus((("a", plane), ("a", plane)))


def test_ingest_converts_rgb_and_keeps_pgm(tmp_path):
    source = tmp_path / "src"
    source.mkdir()
    Image.new("RGB", (4, 2), (255, 0, 0)).save(source / "red.png")
    save_pgm(LuminancePlane(np.full((2, 2), 9, dtype=np.uint8)), source / "gray.pgm")
    (source / "notes.txt").write_text("not an image")

    written = ingest_directory(source, tmp_path / "out")

    assert [path.name for path in written] == ["gray.pgm", "red.pgm"]
    assert np.all(load_pgm(tmp_path / "out" / "red.pgm").samples == 76)
    assert np.all(load_pgm(tmp_path / "out" / "gray.pgm").samples == 9)
