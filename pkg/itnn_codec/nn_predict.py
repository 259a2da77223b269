"""Context extraction, fully-connected inference and postprocessing.

The context of a ``h x w`` block is an L-shape of decoded pixels: ``n_a``
rows of ``n_l + 2w`` pixels above the block and ``n_l`` columns of ``2h``
pixels on its left, with ``n_a = n_l = min(h, w)``. It is flattened as the
above rectangle row-major followed by the left rectangle row-major.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import typing as t
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from itnn_codec.errors import (
    ContextOutOfFrameError,
    DimensionMismatchError,
    ModelFormatError,
)

logger = logging.getLogger(__name__)

MASK_VALUE = 255.0
LEAKY_SLOPE = 0.1
HIDDEN_WIDTH = 1200
HIDDEN_LAYERS = 3

# Block sizes served by a network, as (h, w).
NETWORK_SIZES: tuple[tuple[int, int], ...] = ((4, 4), (8, 8), (16, 16), (32, 32))

MODEL_MAGIC = b"ITNN"
MODEL_VERSION = 1
# Context flattening: above rectangle row-major, then left rectangle row-major.
CONTEXT_ORDER_ABOVE_THEN_LEFT = 0
_MODEL_HEADER = struct.Struct("<4sHHHHHBHd")


@dataclass(frozen=True)
class ContextGeometry:
    """Shape of the context of a ``h x w`` block."""

    h: int
    w: int

    @property
    def n_a(self) -> int:
        """Rows of the above rectangle."""
        return min(self.h, self.w)

    @property
    def n_l(self) -> int:
        """Columns of the left rectangle."""
        return min(self.h, self.w)

    @property
    def above_shape(self) -> tuple[int, int]:
        """``(rows, columns)`` of the above rectangle."""
        return self.n_a, self.n_l + 2 * self.w

    @property
    def left_shape(self) -> tuple[int, int]:
        """``(rows, columns)`` of the left rectangle."""
        return 2 * self.h, self.n_l

    @property
    def length(self) -> int:
        """Number of context pixels, ``n_l * 2h + n_a * (n_l + 2w)``."""
        return self.n_l * 2 * self.h + self.n_a * (self.n_l + 2 * self.w)

    @property
    def delta(self) -> Fraction:
        """Ratio of context size to block size."""
        m = min(self.h, self.w)
        return m * (Fraction(m, self.h * self.w) + Fraction(2, self.h) + Fraction(2, self.w))

    @property
    def block_pixels(self) -> int:
        """``h * w``."""
        return self.h * self.w


@dataclass(frozen=True)
class RawContext:
    """Flattened context pixels and their availability."""

    values: np.ndarray
    available: np.ndarray

    def __post_init__(self) -> None:
        """Check the parallel arrays."""
        if self.values.shape != self.available.shape:
            msg = f"Context values {self.values.shape} and flags {self.available.shape} differ"
            raise DimensionMismatchError(msg)


@dataclass(frozen=True)
class PreprocessedContext:
    """Masked and centered context ``x_c`` with the centering mean ``mu``."""

    x_c: np.ndarray
    mu: float


def gate_allows_context(x: int, y: int, h: int, w: int) -> bool:
    """Whether the context of the block lies below and right of the frame origin."""
    m = min(h, w)
    return x >= m and y >= m


def context_coordinates(x: int, y: int, w: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column of every context pixel, in flattening order."""
    geometry = ContextGeometry(h, w)
    n_a, n_l = geometry.n_a, geometry.n_l
    above_rows, above_cols = np.mgrid[y - n_a : y, x - n_l : x + 2 * w]
    left_rows, left_cols = np.mgrid[y : y + 2 * h, x - n_l : x]
    rows = np.concatenate([above_rows.ravel(), left_rows.ravel()])
    cols = np.concatenate([above_cols.ravel(), left_cols.ravel()])
    return rows, cols


def extract_context(  # noqa: PLR0913
    recon: np.ndarray,
    decoded: np.ndarray,
    x: int,
    y: int,
    w: int,
    h: int,
) -> RawContext:
    """Cut the L-shaped context of a block out of the reconstruction.

    Pixels beyond the right or bottom edge of the frame, or not yet decoded,
    are flagged unavailable.

    Raises:
        ContextOutOfFrameError: The context crosses the top or left boundary.
    """
    if not gate_allows_context(x, y, h, w):
        msg = f"Context of {w}x{h} block at ({x}, {y}) crosses the frame boundary"
        raise ContextOutOfFrameError(msg)
    height, width = recon.shape
    rows, cols = context_coordinates(x, y, w, h)
    inside = (rows < height) & (cols < width)
    values = np.zeros(rows.size, dtype=np.float64)
    available = np.zeros(rows.size, dtype=bool)
    available[inside] = decoded[rows[inside], cols[inside]]
    values[inside] = recon[rows[inside], cols[inside]]
    return RawContext(values=values, available=available)


def holes_mask(geometry: ContextGeometry, n0: int, n1: int) -> np.ndarray:
    """Availability of a context whose ``n0`` bottom left-rows and ``n1`` right above-columns are missing."""
    above = np.ones(geometry.above_shape, dtype=bool)
    left = np.ones(geometry.left_shape, dtype=bool)
    if n1:
        above[:, above.shape[1] - n1 :] = False
    if n0:
        left[left.shape[0] - n0 :, :] = False
    return np.concatenate([above.ravel(), left.ravel()])


def preprocess(raw: RawContext) -> PreprocessedContext:
    """Mask unavailable pixels with 255 and center available ones on their mean."""
    available = raw.available
    if available.any():
        mu = float(np.mean(raw.values[available]))
    else:
        mu = 128.0
    x_c = np.where(available, raw.values - mu, MASK_VALUE)
    return PreprocessedContext(x_c=x_c, mu=mu)


def layer_dims(h: int, w: int, hidden: int = HIDDEN_WIDTH, hidden_layers: int = HIDDEN_LAYERS) -> tuple[int, ...]:
    """Layer widths ``d_in -> hidden x hidden_layers -> h*w``."""
    return (ContextGeometry(h, w).length, *([hidden] * hidden_layers), h * w)


@dataclass(frozen=True)
class NetworkParams:
    """Weights and biases of one per-size fully-connected predictor.

    ``weights[k]`` has shape ``(fan_in, fan_out)``; LeakyReLU follows every
    layer but the last.
    """

    h: int
    w: int
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    slope: float = LEAKY_SLOPE

    def __post_init__(self) -> None:
        """Check consistency of the layer shapes."""
        if len(self.weights) != len(self.biases) or not self.weights:
            msg = "Weights and biases must describe the same non-empty list of layers"
            raise DimensionMismatchError(msg)
        for k, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            if weight.ndim != 2 or bias.shape != (weight.shape[1],):  # noqa: PLR2004
                msg = f"Layer {k}: weight {weight.shape} and bias {bias.shape} disagree"
                raise DimensionMismatchError(msg)
            if k and weight.shape[0] != self.weights[k - 1].shape[1]:
                msg = f"Layer {k}: fan-in {weight.shape[0]} != previous fan-out {self.weights[k - 1].shape[1]}"
                raise DimensionMismatchError(msg)
        if self.weights[-1].shape[1] != self.h * self.w:
            msg = f"Output width {self.weights[-1].shape[1]} != {self.h}x{self.w}"
            raise DimensionMismatchError(msg)

    @property
    def dims(self) -> tuple[int, ...]:
        """Layer widths, input first."""
        return (self.weights[0].shape[0], *(weight.shape[1] for weight in self.weights))

    @property
    def input_dim(self) -> int:
        """Context length the network expects."""
        return int(self.weights[0].shape[0])

    @property
    def parameter_count(self) -> int:
        """Total number of weights and biases."""
        return sum(weight.size + bias.size for weight, bias in zip(self.weights, self.biases))

    def astype(self, dtype: np.dtype | type) -> NetworkParams:
        """Copy with every array cast to ``dtype``."""
        return replace(
            self,
            weights=tuple(weight.astype(dtype) for weight in self.weights),
            biases=tuple(bias.astype(dtype) for bias in self.biases),
        )

    def digest(self) -> str:
        """SHA-256 of the serialized float32 parameters."""
        return hashlib.sha256(serialize_params(self)).hexdigest()


def forward(params: NetworkParams, x_c: np.ndarray) -> np.ndarray:
    """Predict centered blocks from centered contexts.

    Args:
        params: Network parameters.
        x_c: One context of length ``d_in`` or a batch of shape ``(n, d_in)``.

    Returns:
        ``h * w`` values per context, float64.

    Raises:
        DimensionMismatchError: Context length differs from ``d_in``.
    """
    x_c = np.asarray(x_c, dtype=np.float64)
    if x_c.shape[-1] != params.input_dim:
        msg = f"Context length {x_c.shape[-1]} != network input {params.input_dim}"
        raise DimensionMismatchError(msg)
    activation = x_c
    last = len(params.weights) - 1
    for k, (weight, bias) in enumerate(zip(params.weights, params.biases)):
        activation = activation @ weight.astype(np.float64) + bias.astype(np.float64)
        if k < last:
            activation = np.where(activation > 0, activation, params.slope * activation)
    return activation


def postprocess(y_hat_c: np.ndarray, mu: float, bit_depth: int = 8, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Un-center, rescale to ``bit_depth``, clip and round to integers.

    ``round(min(max(2 ** (b - 8) * (y_hat_c + mu), 0), 2 ** b - 1))`` with
    ties away from zero.
    """
    scaled = (2.0 ** (bit_depth - 8)) * (np.asarray(y_hat_c, dtype=np.float64) + mu)
    clipped = np.clip(scaled, 0.0, float((1 << bit_depth) - 1))
    block = np.floor(clipped + 0.5).astype(np.int32)
    return block.reshape(shape) if shape is not None else block


def predict_block(  # noqa: PLR0913
    params: NetworkParams,
    recon: np.ndarray,
    decoded: np.ndarray,
    x: int,
    y: int,
    bit_depth: int = 8,
) -> tuple[np.ndarray, PreprocessedContext]:
    """Extract, preprocess, infer and postprocess for one block."""
    context = preprocess(extract_context(recon, decoded, x, y, params.w, params.h))
    block = postprocess(forward(params, context.x_c), context.mu, bit_depth, (params.h, params.w))
    return block, context


def serialize_params(params: NetworkParams) -> bytes:
    """Encode parameters in the versioned little-endian model format."""
    geometry = ContextGeometry(params.h, params.w)
    dims = params.dims
    header = _MODEL_HEADER.pack(
        MODEL_MAGIC,
        MODEL_VERSION,
        params.h,
        params.w,
        geometry.n_a,
        geometry.n_l,
        CONTEXT_ORDER_ABOVE_THEN_LEFT,
        len(dims),
        params.slope,
    )
    chunks = [header, struct.pack(f"<{len(dims)}I", *dims)]
    chunks.extend(np.ascontiguousarray(weight, dtype="<f4").tobytes() for weight in params.weights)
    chunks.extend(np.ascontiguousarray(bias, dtype="<f4").tobytes() for bias in params.biases)
    return b"".join(chunks)


def deserialize_params(data: bytes) -> NetworkParams:
    """Decode :func:`serialize_params` output.

    Raises:
        ModelFormatError: Bad magic, version, geometry or length.
    """
    if len(data) < _MODEL_HEADER.size:
        msg = "Model file shorter than its header"
        raise ModelFormatError(msg)
    magic, version, h, w, n_a, n_l, order, n_dims, slope = _MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        msg = f"Bad model magic {magic!r}"
        raise ModelFormatError(msg)
    if version != MODEL_VERSION:
        msg = f"Unsupported model version {version}"
        raise ModelFormatError(msg)
    geometry = ContextGeometry(h, w)
    if (n_a, n_l) != (geometry.n_a, geometry.n_l) or order != CONTEXT_ORDER_ABOVE_THEN_LEFT:
        msg = f"Unsupported context geometry n_a={n_a}, n_l={n_l}, order={order}"
        raise ModelFormatError(msg)
    offset = _MODEL_HEADER.size
    try:
        dims = struct.unpack_from(f"<{n_dims}I", data, offset)
    except struct.error as exc:
        msg = "Model file truncated in layer dimensions"
        raise ModelFormatError(msg) from exc
    offset += 4 * n_dims
    pairs = list(zip(dims[:-1], dims[1:]))
    expected = offset + 4 * sum(fan_in * fan_out + fan_out for fan_in, fan_out in pairs)
    if len(data) != expected:
        msg = f"Model file has {len(data)} bytes, expected {expected}"
        raise ModelFormatError(msg)
    weights = []
    for fan_in, fan_out in pairs:
        count = fan_in * fan_out
        weights.append(np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(fan_in, fan_out).astype(np.float32))
        offset += 4 * count
    biases = []
    for _, fan_out in pairs:
        biases.append(np.frombuffer(data, dtype="<f4", count=fan_out, offset=offset).astype(np.float32))
        offset += 4 * fan_out
    try:
        return NetworkParams(h=h, w=w, weights=tuple(weights), biases=tuple(biases), slope=slope)
    except DimensionMismatchError as exc:
        raise ModelFormatError(str(exc)) from exc


def model_filename(h: int, w: int) -> str:
    """File name of the model for one block size."""
    return f"model_{h}x{w}.bin"


def save_params(params: NetworkParams, path: Path | str) -> Path:
    """Write one model file."""
    path = Path(path)
    path.write_bytes(serialize_params(params))
    return path


def load_params(path: Path | str) -> NetworkParams:
    """Read one model file."""
    return deserialize_params(Path(path).read_bytes())


def save_models(params_by_size: dict[tuple[int, int], NetworkParams], directory: Path | str) -> dict[tuple[int, int], Path]:
    """Write every per-size model into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return {size: save_params(params, directory / model_filename(*size)) for size, params in sorted(params_by_size.items())}


def load_models(directory: Path | str) -> dict[tuple[int, int], NetworkParams]:
    """Read every ``model_{h}x{w}.bin`` of ``directory``."""
    directory = Path(directory)
    models = {}
    for h, w in NETWORK_SIZES:
        path = directory / model_filename(h, w)
        if path.exists():
            models[(h, w)] = load_params(path)
    logger.info(f"Loaded {len(models)} models from {directory}: {sorted(models)}")
    return models


_worker_networks: t.Mapping[tuple[int, int], NetworkParams] | None = None


def install_worker_networks(params_by_size: t.Mapping[tuple[int, int], NetworkParams] | None) -> None:
    """Process pool initializer: hand the networks to a worker once, not with every task."""
    global _worker_networks  # noqa: PLW0603
    _worker_networks = params_by_size


def worker_networks() -> t.Mapping[tuple[int, int], NetworkParams] | None:
    """Networks installed in this worker by :func:`install_worker_networks`."""
    return _worker_networks
