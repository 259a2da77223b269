"""ItnnCodec tap class."""

from __future__ import annotations

import typing as t
from functools import cached_property

from singer_sdk import Tap
from singer_sdk import typing as th
from singer_sdk.helpers.capabilities import CapabilitiesEnum, PluginCapabilities, TapCapabilities

from itnn_codec import streams
from itnn_codec.codec import EncodeResult, encode_frame
from itnn_codec.errors import ConfigError
from itnn_codec.frame_io import Corpus
from itnn_codec.nn_predict import NetworkParams, load_models

STREAM_TYPES = [
    streams.BlockRecordsStream,
    streams.RatePointsStream,
]


class TapItnnCodec(Tap):
    """Singer tap emitting block records and rate points of corpus encodes."""

    name = "tap-itnn-codec"
    capabilities: t.ClassVar[list[CapabilitiesEnum]] = [
        TapCapabilities.CATALOG,
        TapCapabilities.DISCOVER,
        PluginCapabilities.ABOUT,
        PluginCapabilities.STREAM_MAPS,
    ]

    config_jsonschema = th.PropertiesList(
        th.Property(
            "corpus_dir",
            th.StringType,
            required=True,
            description="Directory of PGM images to encode",
        ),
        th.Property(
            "qp_set",
            th.ArrayType(th.IntegerType),
            default=[22, 27, 32, 37, 42],
            description="Quantization parameters each image is encoded at",
        ),
        th.Property(
            "nn_enabled",
            th.BooleanType,
            default=False,
            description="Whether the neural-network intra mode is enabled",
        ),
        th.Property(
            "models_dir",
            th.StringType,
            description="Directory of model_<h>x<w>.bin files, required with nn_enabled",
        ),
    ).to_dict()

    @cached_property
    def corpus(self) -> Corpus:
        """Images of ``corpus_dir``, loaded once."""
        return Corpus.from_directory(self.config["corpus_dir"])

    @cached_property
    def models(self) -> dict[tuple[int, int], NetworkParams] | None:
        """Networks of ``models_dir`` when the NN mode is enabled."""
        if not self.config.get("nn_enabled", False):
            return None
        if not self.config.get("models_dir"):
            msg = "models_dir is required when nn_enabled is true"
            raise ConfigError(msg)
        return load_models(self.config["models_dir"])

    @cached_property
    def _encodes(self) -> dict[tuple[str, int], EncodeResult]:
        return {}

    def encode(self, image_id: str, qp: int) -> EncodeResult:
        """Encode one corpus image, shared by every stream."""
        key = (image_id, qp)
        if key not in self._encodes:
            plane = dict(self.corpus)[image_id]
            self.logger.info(f"Encoding {image_id} at QP {qp}")
            self._encodes[key] = encode_frame(plane, qp, self.models is not None, self.models)
        return self._encodes[key]

    def discover_streams(self) -> list[streams.CorpusStream]:
        """Return a list of discovered streams."""
        return [stream_class(tap=self) for stream_class in STREAM_TYPES]


if __name__ == "__main__":
    TapItnnCodec.cli()
