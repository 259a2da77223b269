"""Block-based intra codec with one neural-network prediction mode.

Frames are split into 64x64 coding tree blocks (CTBs) visited in raster
order. Each CTB is force-split once and then recursively partitioned down to
4x4 by comparing the rate-distortion cost ``J = SSE + lambda_rd * bits`` of
coding a block as one leaf against coding its four quadrants. Every leaf is
one prediction and transform block.

Leaf syntax, in order:

- split flag (1 bit) for 32x32, 16x16 and 8x8 blocks;
- ``itnnFlag`` (1 bit) when the NN gate is open, 1 selects the NN mode;
- MPM flag (1 bit, 0 = in the MPM list), then the MPM index as ``0``,
  ``10`` or ``11``, or a 5-bit index among the 32 remaining classic modes;
- ``ue(n)`` coded length followed by ``se(level)`` of the first ``n``
  zigzag-ordered levels.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import struct
import time
import typing as t
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from itnn_codec.bitstream import BitReader, BitWriter
from itnn_codec.errors import (
    DimensionMismatchError,
    MalformedStreamError,
    ModelFormatError,
    ModeNotRepresentableError,
    ReconstructionMismatchError,
    TruncatedStreamError,
)
from itnn_codec.frame_io import LuminancePlane, mse
from itnn_codec.intra_classic import (
    DC,
    NUM_CLASSIC_MODES,
    PLANAR,
    VERTICAL,
    ReferenceSamples,
    build_reference_samples,
    check_mode,
    predict_all_classic,
    predict_classic,
    prediction_mse,
    third_lowest_mse,
)
from itnn_codec.nn_predict import (
    ContextGeometry,
    NetworkParams,
    PreprocessedContext,
    extract_context,
    forward,
    gate_allows_context,
    postprocess,
    predict_block,
    preprocess,
)
from itnn_codec.transform import (
    level_bits,
    reconstruct,
    transform_quantize,
    zigzag_order,
)

logger = logging.getLogger(__name__)

NN_MODE = NUM_CLASSIC_MODES  # s_nn
CTB_SIZE = 64
MIN_BLOCK_SIZE = 4
LEAF_SIZES = (4, 8, 16, 32)
DEFAULT_MPM = (PLANAR, DC, VERTICAL)
MPM_INDEX_CODES = ((0, 1), (0b10, 2), (0b11, 2))  # (value, bits)
REMAINING_MODE_BITS = 5

STREAM_MAGIC = b"ITNC"
STREAM_VERSION = 1
_STREAM_HEADER = struct.Struct("<4sBHHBBB")
_HASH_BYTES = 32

RECORD_FIELDS = ("x", "y", "h", "w", "n0", "n1", "s", "d_nn", "d_c", "isSplitTBs", "qp")


@dataclass(frozen=True)
class RateDistortionConfig:
    """Rate-distortion settings of one encode.

    ``lambda_rd`` weighs bits against the sum of squared errors; it is not
    the weight decay of network training.
    """

    qp: int
    lambda_scale: float = 0.57
    bit_depth: int = 8

    def __post_init__(self) -> None:
        """Validate the QP range representable in the stream header."""
        if not 0 <= self.qp <= 255:  # noqa: PLR2004
            msg = f"QP {self.qp} outside [0, 255]"
            raise DimensionMismatchError(msg)

    @property
    def lambda_rd(self) -> float:
        """``lambda_scale * 2 ** ((QP - 12) / 3)``."""
        return self.lambda_scale * 2.0 ** ((self.qp - 12) / 3.0)


@dataclass(frozen=True)
class BlockRecord:
    """Characteristics of one leaf of the partitioning.

    Attributes:
        n0: Undecoded bottom rows of the left context rectangle, in ``[0, h]``.
        n1: Undecoded right columns of the above context rectangle, in ``[0, w]``.
        s: Selected mode, ``NN_MODE`` for the neural-network mode.
        d_nn: MSE of the NN prediction, ``None`` when the gate was closed.
        d_c: Third-lowest classic prediction MSE. Zero, not strictly
            positive, on flat content where three classic modes predict
            exactly; cleansing then keeps the block only if ``d_nn`` is zero too.
        is_split_tbs: Whether the block was split into several transform
            blocks; always false in this codec.
    """

    x: int
    y: int
    h: int
    w: int
    n0: int
    n1: int
    s: int
    d_nn: float | None
    d_c: float | None
    is_split_tbs: bool = False
    qp: int | None = None

    def to_row(self) -> dict[str, t.Any]:
        """CSV row keyed by :data:`RECORD_FIELDS`."""
        return {
            "x": self.x,
            "y": self.y,
            "h": self.h,
            "w": self.w,
            "n0": self.n0,
            "n1": self.n1,
            "s": self.s,
            "d_nn": "" if self.d_nn is None else repr(self.d_nn),
            "d_c": "" if self.d_c is None else repr(self.d_c),
            "isSplitTBs": int(self.is_split_tbs),
            "qp": "" if self.qp is None else self.qp,
        }

    @classmethod
    def from_row(cls, row: t.Mapping[str, str]) -> BlockRecord:
        """Parse a CSV row written by :meth:`to_row`."""

        def optional_float(value: str | None) -> float | None:
            return None if value in (None, "") else float(value)

        return cls(
            x=int(row["x"]),
            y=int(row["y"]),
            h=int(row["h"]),
            w=int(row["w"]),
            n0=int(row["n0"]),
            n1=int(row["n1"]),
            s=int(row["s"]),
            d_nn=optional_float(row.get("d_nn")),
            d_c=optional_float(row.get("d_c")),
            is_split_tbs=row.get("isSplitTBs", "0") in ("1", "True", "true"),
            qp=None if row.get("qp") in (None, "") else int(row["qp"]),
        )


def write_records_csv(
    path: Path | str,
    rows: t.Iterable[t.Mapping[str, t.Any]],
    leading: t.Sequence[str] = (),
    trailing: t.Sequence[str] = (),
) -> Path:
    """Write record rows with optional extra columns around :data:`RECORD_FIELDS`."""
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=[*leading, *RECORD_FIELDS, *trailing])
        writer.writeheader()
        writer.writerows(rows)
    return path


def read_records_csv(path: Path | str) -> list[dict[str, str]]:
    """Read the raw rows of a record CSV."""
    with Path(path).open(newline="") as handle:
        return list(csv.DictReader(handle))


def signalling_gate(x: int, y: int, h: int, w: int, sizes: t.Collection[tuple[int, int]]) -> bool:
    """Whether the NN mode is signalled for a block."""
    return (h, w) in sizes and gate_allows_context(x, y, h, w)


def mpm_list(left: int | None, above: int | None) -> tuple[int, int, int]:
    """Three most probable classic modes from the left and above neighbour modes.

    Unavailable neighbours count as DC and NN-coded ones as PLANAR.
    """
    cand_a = DC if left is None else (PLANAR if left == NN_MODE else left)
    cand_b = DC if above is None else (PLANAR if above == NN_MODE else above)
    if cand_a == cand_b:
        if cand_a < 2:  # noqa: PLR2004
            return DEFAULT_MPM
        return cand_a, 2 + ((cand_a + 29) % 32), 2 + ((cand_a - 2 + 1) % 32)
    if PLANAR not in (cand_a, cand_b):
        third = PLANAR
    elif DC not in (cand_a, cand_b):
        third = DC
    else:
        third = VERTICAL
    return cand_a, cand_b, third


def _remaining_modes(mpm: t.Sequence[int]) -> list[int]:
    return [mode for mode in range(NUM_CLASSIC_MODES) if mode not in mpm]


def mode_bits(s: int, gate_open: bool, mpm: t.Sequence[int]) -> int:  # noqa: FBT001
    """Bits :func:`encode_mode` spends on ``s``."""
    bits = 1 if gate_open else 0
    if s == NN_MODE:
        if not gate_open:
            msg = "NN mode selected while the gate is closed"
            raise ModeNotRepresentableError(msg)
        return bits
    check_mode(s)
    if s in mpm:
        return bits + 1 + MPM_INDEX_CODES[list(mpm).index(s)][1]
    return bits + 1 + REMAINING_MODE_BITS


def encode_mode(stream: BitWriter, s: int, gate_open: bool, mpm: t.Sequence[int]) -> int:  # noqa: FBT001
    """Write the mode syntax of a leaf, ``itnnFlag`` first.

    Returns:
        Number of bits written.

    Raises:
        ModeNotRepresentableError: NN mode with the gate closed.
    """
    start = len(stream)
    mode_bits(s, gate_open, mpm)
    if gate_open:
        stream.write_bit(s == NN_MODE)
        if s == NN_MODE:
            return len(stream) - start
    if s in mpm:
        stream.write_bit(0)
        stream.write_bits(*MPM_INDEX_CODES[list(mpm).index(s)])
    else:
        stream.write_bit(1)
        stream.write_bits(_remaining_modes(mpm).index(s), REMAINING_MODE_BITS)
    return len(stream) - start


def decode_mode(stream: BitReader, gate_open: bool, mpm: t.Sequence[int]) -> int:  # noqa: FBT001
    """Read the mode syntax written by :func:`encode_mode`."""
    if gate_open and stream.read_bit():
        return NN_MODE
    if stream.read_bit() == 0:
        if stream.read_bit() == 0:
            return mpm[0]
        return mpm[1 + stream.read_bit()]
    return _remaining_modes(mpm)[stream.read_bits(REMAINING_MODE_BITS)]


def write_levels(stream: BitWriter, levels: np.ndarray) -> None:
    """Write a level block: coded length then the signed levels in zigzag order."""
    size = levels.shape[-1]
    scanned = levels.reshape(-1)[zigzag_order(size)]
    nonzero = np.flatnonzero(scanned)
    count = int(nonzero[-1]) + 1 if nonzero.size else 0
    stream.write_ue(count)
    for level in scanned[:count]:
        stream.write_se(int(level))


def read_levels(stream: BitReader, size: int) -> np.ndarray:
    """Read a level block written by :func:`write_levels`."""
    count = stream.read_ue()
    if count > size * size:
        msg = f"Coded length {count} exceeds a {size}x{size} block"
        raise MalformedStreamError(msg)
    scanned = np.zeros(size * size, dtype=np.int64)
    for k in range(count):
        scanned[k] = stream.read_se()
    levels = np.zeros(size * size, dtype=np.int64)
    levels[zigzag_order(size)] = scanned
    return levels.reshape(size, size)


@dataclass(frozen=True)
class ModeDecision:
    """Outcome of the mode search for one block."""

    mode: int
    levels: np.ndarray
    recon: np.ndarray
    cost: float
    bits: int
    distortion: float
    d_nn: float | None
    d_c: float
    mpm: tuple[int, int, int]
    gate_open: bool
    costs: np.ndarray = field(repr=False)


def rd_select(  # noqa: PLR0913
    block: np.ndarray,
    refs: ReferenceSamples,
    context: PreprocessedContext | None,
    params_by_size: t.Mapping[tuple[int, int], NetworkParams],
    cfg: RateDistortionConfig,
    mpm: tuple[int, int, int] = DEFAULT_MPM,
) -> ModeDecision:
    """Choose the mode minimising ``SSE + lambda_rd * bits`` for one block.

    The NN mode competes when a context is given and a network serves the
    block size. Ties go to the lower mode index, the NN mode last.
    """
    size = block.shape[0]
    predictions = predict_all_classic(refs, size)
    classic_errors = prediction_mse(block, predictions)
    d_c = third_lowest_mse(classic_errors)
    params = params_by_size.get((size, size)) if context is not None else None
    gate_open = params is not None
    d_nn = None
    if gate_open:
        nn_prediction = postprocess(forward(params, context.x_c), context.mu, cfg.bit_depth, (size, size))
        d_nn = mse(block, nn_prediction)
        predictions = np.concatenate([predictions, nn_prediction[np.newaxis]])

    original = block.astype(np.int64)
    levels = transform_quantize(original - predictions, cfg.qp)
    recon = reconstruct(predictions, levels, cfg.qp, cfg.bit_depth)
    diff = recon.astype(np.int64) - original
    distortion = np.sum(diff * diff, axis=(1, 2)).astype(np.float64)
    signalling = np.array([mode_bits(mode, gate_open, mpm) for mode in range(len(predictions))])
    bits = level_bits(levels) + signalling
    costs = distortion + cfg.lambda_rd * bits
    best = int(np.argmin(costs))
    return ModeDecision(
        mode=best,
        levels=levels[best],
        recon=recon[best],
        cost=float(costs[best]),
        bits=int(bits[best]),
        distortion=float(distortion[best]),
        d_nn=d_nn,
        d_c=d_c,
        mpm=mpm,
        gate_open=gate_open,
        costs=costs,
    )


def pad_to_ctb(samples: np.ndarray, multiple: int = CTB_SIZE) -> np.ndarray:
    """Replicate the right and bottom edges up to a multiple of ``multiple``."""
    height, width = samples.shape
    pad_h = -height % multiple
    pad_w = -width % multiple
    return np.pad(samples, ((0, pad_h), (0, pad_w)), mode="edge")


def measure_holes(decoded: np.ndarray, x: int, y: int, w: int, h: int) -> tuple[int, int]:
    """``(n0, n1)``: undecoded bottom rows of the left and right columns of the above context rectangles."""
    geometry = ContextGeometry(h, w)
    height, width = decoded.shape
    n_a, n_l = geometry.n_a, geometry.n_l

    def covered(rows: range, cols: range) -> np.ndarray:
        grid = np.zeros((len(rows), len(cols)), dtype=bool)
        r0, r1 = max(rows.start, 0), min(rows.stop, height)
        c0, c1 = max(cols.start, 0), min(cols.stop, width)
        if r0 < r1 and c0 < c1:
            grid[r0 - rows.start : r1 - rows.start, c0 - cols.start : c1 - cols.start] = decoded[r0:r1, c0:c1]
        return grid

    left = covered(range(y, y + 2 * h), range(x - n_l, x)).all(axis=1)
    above = covered(range(y - n_a, y), range(x - n_l, x + 2 * w)).all(axis=0)
    n0 = len(left) - int(np.flatnonzero(left)[-1]) - 1 if left.any() else len(left)
    n1 = len(above) - int(np.flatnonzero(above)[-1]) - 1 if above.any() else len(above)
    return min(n0, h), min(n1, w)


@dataclass
class _Leaf:
    x: int
    y: int
    size: int
    decision: ModeDecision
    n0: int
    n1: int


@dataclass
class _Node:
    x: int
    y: int
    size: int
    leaf: _Leaf | None = None
    children: list[_Node] = field(default_factory=list)


class _CodingState:
    """Causal reconstruction, decoded mask and mode map of a padded frame."""

    def __init__(self, height: int, width: int) -> None:
        self.recon = np.zeros((height, width), dtype=np.int32)
        self.decoded = np.zeros((height, width), dtype=bool)
        self.modes = np.full((height // MIN_BLOCK_SIZE, width // MIN_BLOCK_SIZE), -1, dtype=np.int16)

    def mpm(self, x: int, y: int, size: int) -> tuple[int, int, int]:
        left = None
        if x > 0:
            mode = int(self.modes[(y + size - 1) // MIN_BLOCK_SIZE, (x - 1) // MIN_BLOCK_SIZE])
            left = mode if mode >= 0 else None
        above = None
        ctb_top = y - y % CTB_SIZE
        if y - 1 >= ctb_top:
            mode = int(self.modes[(y - 1) // MIN_BLOCK_SIZE, (x + size - 1) // MIN_BLOCK_SIZE])
            above = mode if mode >= 0 else None
        return mpm_list(left, above)

    def snapshot(self, x: int, y: int, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        region = np.s_[y : y + size, x : x + size]
        cells = np.s_[y // MIN_BLOCK_SIZE : (y + size) // MIN_BLOCK_SIZE, x // MIN_BLOCK_SIZE : (x + size) // MIN_BLOCK_SIZE]
        return self.recon[region].copy(), self.decoded[region].copy(), self.modes[cells].copy()

    def restore(self, x: int, y: int, size: int, saved: tuple[np.ndarray, np.ndarray, np.ndarray]) -> None:
        recon, decoded, modes = saved
        self.recon[y : y + size, x : x + size] = recon
        self.decoded[y : y + size, x : x + size] = decoded
        self.modes[y // MIN_BLOCK_SIZE : (y + size) // MIN_BLOCK_SIZE, x // MIN_BLOCK_SIZE : (x + size) // MIN_BLOCK_SIZE] = modes

    def commit(self, x: int, y: int, size: int, mode: int, recon: np.ndarray) -> None:
        self.recon[y : y + size, x : x + size] = recon
        self.decoded[y : y + size, x : x + size] = True
        self.modes[y // MIN_BLOCK_SIZE : (y + size) // MIN_BLOCK_SIZE, x // MIN_BLOCK_SIZE : (x + size) // MIN_BLOCK_SIZE] = mode


def _split_flag_coded(size: int) -> bool:
    return MIN_BLOCK_SIZE < size < CTB_SIZE


def _quadrants(x: int, y: int, size: int) -> list[tuple[int, int]]:
    half = size // 2
    return [(x, y), (x + half, y), (x, y + half), (x + half, y + half)]


@dataclass(frozen=True)
class EncodeResult:
    """Output of :func:`encode_frame`.

    Attributes:
        bitstream: Container bytes.
        recon: Reconstruction cropped to the input size.
        records: One record per leaf, in coding order.
        payload_bits: Bits of the leaf/split syntax in the payload.
        rd_bits: Bits accounted inside the rate-distortion costs.
        padded_recon: Reconstruction of the padded frame.
    """

    bitstream: bytes
    recon: LuminancePlane
    records: tuple[BlockRecord, ...]
    payload_bits: int
    rd_bits: int
    padded_recon: np.ndarray = field(repr=False)

    @property
    def bits(self) -> int:
        """Total container size in bits."""
        return 8 * len(self.bitstream)

    def bits_per_pixel(self) -> float:
        """Container bits per original pixel."""
        return self.bits / (self.recon.width * self.recon.height)

    def nn_ratio(self) -> float:
        """Fraction of leaves coded with the NN mode."""
        return sum(record.s == NN_MODE for record in self.records) / max(len(self.records), 1)


class FrameEncoder:
    """Rate-distortion optimised encoder for one frame."""

    def __init__(
        self,
        cfg: RateDistortionConfig,
        params_by_size: t.Mapping[tuple[int, int], NetworkParams] | None = None,
        *,
        nn_enabled: bool = True,
    ) -> None:
        """Initialize the encoder.

        Args:
            cfg: Rate-distortion settings.
            params_by_size: Networks by ``(h, w)``.
            nn_enabled: Whether the NN mode may be signalled at all.
        """
        self.cfg = cfg
        self.params_by_size = dict(params_by_size or {}) if nn_enabled else {}
        self.sizes = tuple(sorted(size for size in self.params_by_size if size[0] in LEAF_SIZES and size[0] == size[1]))
        self.nn_enabled = nn_enabled
        self._original: np.ndarray = np.zeros((0, 0), dtype=np.int32)
        self._state = _CodingState(0, 0)

    def encode(self, plane: LuminancePlane, *, pad: bool = True) -> EncodeResult:
        """Encode one frame.

        Raises:
            DimensionMismatchError: ``pad`` is false and the frame is not a
                whole number of CTBs.
        """
        started = time.perf_counter()
        if not pad and (plane.width % CTB_SIZE or plane.height % CTB_SIZE):
            msg = f"Frame {plane.width}x{plane.height} is not a multiple of {CTB_SIZE}"
            raise DimensionMismatchError(msg)
        self._original = pad_to_ctb(plane.samples).astype(np.int32)
        height, width = self._original.shape
        self._state = _CodingState(height, width)

        writer = BitWriter()
        records: list[BlockRecord] = []
        rd_bits = 0
        for ctb_y in range(0, height, CTB_SIZE):
            for ctb_x in range(0, width, CTB_SIZE):
                _, node = self._search(ctb_x, ctb_y, CTB_SIZE)
                rd_bits += self._write_node(writer, node, records)

        recon = LuminancePlane(self._state.recon[: plane.height, : plane.width].astype(np.uint8))
        payload = writer.to_bytes()
        header = _STREAM_HEADER.pack(
            STREAM_MAGIC, STREAM_VERSION, plane.width, plane.height, self.cfg.qp, int(self.nn_enabled), len(self.sizes)
        )
        sizes = b"".join(struct.pack("<BB", h, w) for h, w in self.sizes)
        bitstream = b"".join(
            [header, sizes, struct.pack("<I", len(writer)), payload, hashlib.sha256(recon.to_bytes()).digest()]
        )
        logger.info(
            f"Encoded {plane.width}x{plane.height} frame at QP {self.cfg.qp} "
            f"(nn={'on' if self.nn_enabled else 'off'}): {len(bitstream)} bytes, "
            f"{len(records)} leaves in {time.perf_counter() - started:.2f}s"
        )
        return EncodeResult(
            bitstream=bitstream,
            recon=recon,
            records=tuple(records),
            payload_bits=len(writer),
            rd_bits=rd_bits,
            padded_recon=self._state.recon.copy(),
        )

    def _decide(self, x: int, y: int, size: int) -> _Leaf:
        state = self._state
        block = self._original[y : y + size, x : x + size]
        refs = build_reference_samples(state.recon, state.decoded, x, y, size, size, self.cfg.bit_depth)
        context = None
        if self.nn_enabled and signalling_gate(x, y, size, size, self.sizes):
            context = preprocess(extract_context(state.recon, state.decoded, x, y, size, size))
        decision = rd_select(block, refs, context, self.params_by_size, self.cfg, state.mpm(x, y, size))
        n0, n1 = measure_holes(state.decoded, x, y, size, size)
        return _Leaf(x, y, size, decision, n0, n1)

    def _search(self, x: int, y: int, size: int) -> tuple[float, _Node]:
        flag_cost = self.cfg.lambda_rd if _split_flag_coded(size) else 0.0
        leaf = None
        leaf_cost = math.inf
        if size in LEAF_SIZES:
            leaf = self._decide(x, y, size)
            leaf_cost = leaf.decision.cost + flag_cost
            if size == MIN_BLOCK_SIZE:
                self._state.commit(x, y, size, leaf.decision.mode, leaf.decision.recon)
                return leaf_cost, _Node(x, y, size, leaf=leaf)

        saved = self._state.snapshot(x, y, size)
        split_cost = flag_cost
        children = []
        for child_x, child_y in _quadrants(x, y, size):
            cost, child = self._search(child_x, child_y, size // 2)
            split_cost += cost
            children.append(child)

        if leaf is not None and leaf_cost <= split_cost:
            self._state.restore(x, y, size, saved)
            self._state.commit(x, y, size, leaf.decision.mode, leaf.decision.recon)
            return leaf_cost, _Node(x, y, size, leaf=leaf)
        return split_cost, _Node(x, y, size, children=children)

    def _write_node(self, writer: BitWriter, node: _Node, records: list[BlockRecord]) -> int:
        """Write the syntax of a chosen subtree; returns the bits accounted by RDO."""
        bits = 0
        if _split_flag_coded(node.size):
            writer.write_bit(node.leaf is None)
            bits += 1
        if node.leaf is None:
            for child in node.children:
                bits += self._write_node(writer, child, records)
            return bits
        leaf = node.leaf
        decision = leaf.decision
        start = len(writer)
        encode_mode(writer, decision.mode, decision.gate_open, decision.mpm)
        write_levels(writer, decision.levels)
        if len(writer) - start != decision.bits:
            msg = f"Leaf at ({leaf.x}, {leaf.y}) wrote {len(writer) - start} bits, RDO counted {decision.bits}"
            raise MalformedStreamError(msg)
        records.append(
            BlockRecord(
                x=leaf.x,
                y=leaf.y,
                h=leaf.size,
                w=leaf.size,
                n0=leaf.n0,
                n1=leaf.n1,
                s=decision.mode,
                d_nn=decision.d_nn,
                d_c=decision.d_c,
                is_split_tbs=False,
                qp=self.cfg.qp,
            )
        )
        return bits + decision.bits


def encode_frame(
    plane: LuminancePlane,
    qp: int,
    nn_enabled: bool,  # noqa: FBT001
    params_by_size: t.Mapping[tuple[int, int], NetworkParams] | None = None,
    cfg: RateDistortionConfig | None = None,
) -> EncodeResult:
    """Encode a frame; ``cfg`` overrides the default settings for ``qp``."""
    cfg = cfg if cfg is not None else RateDistortionConfig(qp=qp)
    if cfg.qp != qp:
        cfg = RateDistortionConfig(qp=qp, lambda_scale=cfg.lambda_scale, bit_depth=cfg.bit_depth)
    return FrameEncoder(cfg, params_by_size, nn_enabled=nn_enabled).encode(plane)


@dataclass(frozen=True)
class StreamHeader:
    """Fixed fields of a container."""

    width: int
    height: int
    qp: int
    nn_enabled: bool
    sizes: tuple[tuple[int, int], ...]
    payload_bits: int


def parse_container(data: bytes) -> tuple[StreamHeader, bytes, bytes]:
    """Split a container into header, payload and reconstruction hash.

    Raises:
        TruncatedStreamError: The container is shorter than its declared size.
        MalformedStreamError: Bad magic, version or trailing bytes.
    """
    if len(data) < _STREAM_HEADER.size:
        msg = "Stream shorter than its header"
        raise TruncatedStreamError(msg)
    magic, version, width, height, qp, nn_enabled, n_sizes = _STREAM_HEADER.unpack_from(data)
    if magic != STREAM_MAGIC:
        msg = f"Bad stream magic {magic!r}"
        raise MalformedStreamError(msg)
    if version != STREAM_VERSION:
        msg = f"Unsupported stream version {version}"
        raise MalformedStreamError(msg)
    if width == 0 or height == 0:
        msg = "Stream declares an empty frame"
        raise MalformedStreamError(msg)
    offset = _STREAM_HEADER.size
    if len(data) < offset + 2 * n_sizes + 4:
        msg = "Stream truncated in its size descriptor"
        raise TruncatedStreamError(msg)
    sizes = tuple(struct.unpack_from("<BB", data, offset + 2 * k) for k in range(n_sizes))
    offset += 2 * n_sizes
    (payload_bits,) = struct.unpack_from("<I", data, offset)
    offset += 4
    payload_bytes = (payload_bits + 7) // 8
    expected = offset + payload_bytes + _HASH_BYTES
    if len(data) < expected:
        msg = f"Stream truncated: {len(data)} bytes, expected {expected}"
        raise TruncatedStreamError(msg)
    if len(data) > expected:
        msg = f"Stream has {len(data) - expected} trailing bytes"
        raise MalformedStreamError(msg)
    header = StreamHeader(width, height, qp, bool(nn_enabled), sizes, payload_bits)
    return header, data[offset : offset + payload_bytes], data[offset + payload_bytes :]


class FrameDecoder:
    """Decoder mirroring :class:`FrameEncoder`."""

    def __init__(self, params_by_size: t.Mapping[tuple[int, int], NetworkParams] | None = None) -> None:
        """Initialize the decoder with the networks the stream may require."""
        self.params_by_size = dict(params_by_size or {})

    def decode(self, data: bytes) -> LuminancePlane:
        """Decode a container produced by :class:`FrameEncoder`.

        Raises:
            TruncatedStreamError: The stream ends early.
            MalformedStreamError: The syntax is invalid.
            ModelFormatError: A network the stream requires is missing.
            ReconstructionMismatchError: The reconstruction hash differs.
        """
        started = time.perf_counter()
        header, payload, expected_hash = parse_container(data)
        missing = [size for size in header.sizes if size not in self.params_by_size]
        if missing:
            msg = f"Stream requires networks for sizes {missing}"
            raise ModelFormatError(msg)
        self._header = header
        self._cfg = RateDistortionConfig(qp=header.qp)
        padded_h = header.height + (-header.height % CTB_SIZE)
        padded_w = header.width + (-header.width % CTB_SIZE)
        self._state = _CodingState(padded_h, padded_w)
        reader = BitReader(payload, header.payload_bits)
        for ctb_y in range(0, padded_h, CTB_SIZE):
            for ctb_x in range(0, padded_w, CTB_SIZE):
                self._read_node(reader, ctb_x, ctb_y, CTB_SIZE)
        if reader.remaining:
            msg = f"{reader.remaining} unread payload bits"
            raise MalformedStreamError(msg)
        recon = LuminancePlane(self._state.recon[: header.height, : header.width].astype(np.uint8))
        if hashlib.sha256(recon.to_bytes()).digest() != expected_hash:
            msg = "Decoded reconstruction does not match the encoder's hash (wrong networks?)"
            raise ReconstructionMismatchError(msg)
        logger.info(f"Decoded {header.width}x{header.height} frame in {time.perf_counter() - started:.2f}s")
        return recon

    def _read_node(self, reader: BitReader, x: int, y: int, size: int) -> None:
        split = size == CTB_SIZE or (_split_flag_coded(size) and reader.read_bit())
        if split:
            for child_x, child_y in _quadrants(x, y, size):
                self._read_node(reader, child_x, child_y, size // 2)
            return
        state = self._state
        gate_open = self._header.nn_enabled and signalling_gate(x, y, size, size, self._header.sizes)
        mode = decode_mode(reader, gate_open, state.mpm(x, y, size))
        levels = read_levels(reader, size)
        if mode == NN_MODE:
            prediction, _ = predict_block(self.params_by_size[(size, size)], state.recon, state.decoded, x, y)
        else:
            refs = build_reference_samples(state.recon, state.decoded, x, y, size, size)
            prediction = predict_classic(refs, mode, size, size)
        state.commit(x, y, size, mode, reconstruct(prediction, levels, self._cfg.qp))


def decode_frame(stream: bytes, params_by_size: t.Mapping[tuple[int, int], NetworkParams] | None = None) -> LuminancePlane:
    """Decode a container into the encoder's reconstruction."""
    return FrameDecoder(params_by_size).decode(stream)
