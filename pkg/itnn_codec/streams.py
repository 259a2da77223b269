"""Stream type classes for tap-itnn-codec."""

from __future__ import annotations

import math
import typing as t
from pathlib import Path

from singer_sdk import Stream

from itnn_codec.frame_io import psnr
from itnn_codec.pipeline import DEFAULT_QP_SET

if t.TYPE_CHECKING:
    from itnn_codec.tap import TapItnnCodec

SCHEMAS_DIR = Path(__file__).parent / "schemas"


class CorpusStream(Stream):
    """Base stream over every (image, QP) encode of the configured corpus."""

    tap: TapItnnCodec

    def __init__(self, tap: TapItnnCodec) -> None:
        """Initialize the stream.

        Args:
            tap: The parent tap, which owns the corpus and the encodes.
        """
        super().__init__(tap=tap)
        self.tap = tap

    def encodes(self) -> t.Iterator[tuple[str, int, t.Any]]:
        """Yield ``(image_id, qp, EncodeResult)`` in image then QP order."""
        for image_id, _ in self.tap.corpus:
            for qp in self.config.get("qp_set") or DEFAULT_QP_SET:
                yield image_id, qp, self.tap.encode(image_id, qp)


class BlockRecordsStream(CorpusStream):
    """One record per quadtree leaf of every encode."""

    name = "block_records"
    primary_keys: t.ClassVar[list[str]] = ["image_id", "qp", "x", "y"]
    replication_key = None
    schema_filepath = SCHEMAS_DIR / "block_records.json"

    def get_records(self, context: dict | None) -> t.Iterable[dict]:  # noqa: ARG002
        """Return the leaves of every encode."""
        for image_id, qp, result in self.encodes():
            for record in result.records:
                yield {
                    "image_id": image_id,
                    "qp": qp,
                    "x": record.x,
                    "y": record.y,
                    "h": record.h,
                    "w": record.w,
                    "n0": record.n0,
                    "n1": record.n1,
                    "s": record.s,
                    "d_nn": record.d_nn,
                    "d_c": record.d_c,
                    "isSplitTBs": record.is_split_tbs,
                }


class RatePointsStream(CorpusStream):
    """One rate-distortion point per encode."""

    name = "rate_points"
    primary_keys: t.ClassVar[list[str]] = ["image_id", "qp"]
    replication_key = None
    schema_filepath = SCHEMAS_DIR / "rate_points.json"

    def get_records(self, context: dict | None) -> t.Iterable[dict]:  # noqa: ARG002
        """Return bits, PSNR and NN usage of every encode."""
        planes = dict(self.tap.corpus)
        for image_id, qp, result in self.encodes():
            quality = psnr(planes[image_id], result.recon)
            yield {
                "image_id": image_id,
                "qp": qp,
                "width": result.recon.width,
                "height": result.recon.height,
                "bits": result.bits,
                "bpp": result.bits_per_pixel(),
                "psnr": quality if math.isfinite(quality) else None,
                "leaves": len(result.records),
                "nn_ratio": result.nn_ratio(),
            }
