"""Tests standard tap features using the built-in SDK tests library."""

import tempfile
from pathlib import Path

from singer_sdk.testing import get_tap_test_class

from itnn_codec.frame_io import LuminancePlane, save_pgm
from itnn_codec.tap import TapItnnCodec
from tests.helpers import textured_samples

CORPUS_DIR = Path(tempfile.mkdtemp(prefix="itnn-tap-corpus-"))
for _k in range(2):
    save_pgm(LuminancePlane(textured_samples(64, 64, seed=_k)), CORPUS_DIR / f"img_{_k:02d}.pgm")

SAMPLE_CONFIG = {
    "corpus_dir": str(CORPUS_DIR),
    "qp_set": [32, 37],
}


# Run standard built-in tap tests from the SDK:
TestTapItnnCodec = get_tap_test_class(
    tap_class=TapItnnCodec,
    config=SAMPLE_CONFIG,
)


def test_streams_share_encodes():
    tap = TapItnnCodec(config=SAMPLE_CONFIG, parse_env_config=False)
    first = tap.encode("img_00", 32)
    assert tap.encode("img_00", 32) is first
    names = sorted(stream.name for stream in tap.discover_streams())
    assert names == ["block_records", "rate_points"]


def test_rate_points_cover_every_encode():
    tap = TapItnnCodec(config=SAMPLE_CONFIG, parse_env_config=False)
    stream = tap.streams["rate_points"]
    rows = list(stream.get_records(None))
    assert [(row["image_id"], row["qp"]) for row in rows] == [
        ("img_00", 32),
        ("img_00", 37),
        ("img_01", 32),
        ("img_01", 37),
    ]
    assert all(row["nn_ratio"] == 0.0 for row in rows)
    assert all(row["bpp"] == row["bits"] / (64 * 64) for row in rows)
