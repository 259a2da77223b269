"""Reference samples and the 35 classic intra prediction modes.

Mode 0 is PLANAR, mode 1 is DC and modes 2-34 are angular:

- Modes 2-17 are horizontal-like and project onto the left column.
- Mode 10 is pure horizontal (angle 0).
- Modes 18-34 are vertical-like and project onto the above row.
- Mode 26 is pure vertical (angle 0).

Angles are in 1/32 pixel units. No reference smoothing and no boundary
filters are applied.
"""

from __future__ import annotations

import typing as t
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from itnn_codec.errors import (
    BlockOutOfBoundsError,
    InvalidModeError,
    UnsupportedBlockSizeError,
)

PLANAR = 0
DC = 1
HORIZONTAL = 10
VERTICAL = 26
NUM_CLASSIC_MODES = 35

# intraPredAngle for modes 2-34
INTRA_PRED_ANGLE = (
    32, 26, 21, 17, 13, 9, 5, 2, 0,       # modes 2-10
    -2, -5, -9, -13, -17, -21, -26, -32,  # modes 11-17
    -26, -21, -17, -13, -9, -5, -2, 0,    # modes 18-26
    2, 5, 9, 13, 17, 21, 26, 32,          # modes 27-34
)

# round(256 * 32 / angle) for the negative angles
INV_ANGLE = {
    -2: -4096, -5: -1638, -9: -910, -13: -630,
    -17: -482, -21: -390, -26: -315, -32: -256,
}


@dataclass(frozen=True)
class ReferenceSamples:
    """One row above and one column left of a block, after substitution.

    Attributes:
        above: ``2w + 1`` values; ``above[0]`` is the top-left corner and
            ``above[1 + i]`` sits above column ``i``.
        left: ``2h`` values; ``left[j]`` sits left of row ``j``.
        above_available: Availability of ``above`` before substitution.
        left_available: Availability of ``left`` before substitution.
    """

    above: np.ndarray
    left: np.ndarray
    above_available: np.ndarray
    left_available: np.ndarray

    @property
    def width(self) -> int:
        """Block width the samples were built for."""
        return (len(self.above) - 1) // 2

    @property
    def height(self) -> int:
        """Block height the samples were built for."""
        return len(self.left) // 2

    @property
    def corner(self) -> int:
        """Top-left corner sample."""
        return int(self.above[0])

    @classmethod
    def constant(cls, w: int, h: int, value: int) -> ReferenceSamples:
        """Fully available references of a single value."""
        return cls(
            above=np.full(2 * w + 1, value, dtype=np.int32),
            left=np.full(2 * h, value, dtype=np.int32),
            above_available=np.ones(2 * w + 1, dtype=bool),
            left_available=np.ones(2 * h, dtype=bool),
        )


def check_mode(mode: int) -> int:
    """Validate a classic mode index.

    Raises:
        InvalidModeError: ``mode`` is outside ``[0, 34]``.
    """
    if not 0 <= mode < NUM_CLASSIC_MODES:
        msg = f"Invalid classic intra mode {mode}"
        raise InvalidModeError(msg)
    return int(mode)


def build_reference_samples(  # noqa: PLR0913
    recon: np.ndarray,
    decoded: np.ndarray,
    x: int,
    y: int,
    w: int,
    h: int,
    bit_depth: int = 8,
) -> ReferenceSamples:
    """Gather and substitute the reference samples of a block.

    Unavailable samples (outside the frame or not yet decoded) are filled by
    scanning from the bottom of the left column up to the corner and then
    along the above row: each takes the value of the previous available
    sample, and leading unavailable samples take the first available one.
    With nothing available every sample is ``2 ** (bit_depth - 1)``.

    Raises:
        BlockOutOfBoundsError: The block is not inside the plane.
    """
    height, width = recon.shape
    if x < 0 or y < 0 or x + w > width or y + h > height:
        msg = f"Block ({x}, {y}) {w}x{h} outside {width}x{height} plane"
        raise BlockOutOfBoundsError(msg)

    # Scan order: left column bottom to top, corner, above row left to right.
    rows = np.concatenate([np.arange(y + 2 * h - 1, y - 1, -1), [y - 1], np.full(2 * w, y - 1)])
    cols = np.concatenate([np.full(2 * h, x - 1), [x - 1], np.arange(x, x + 2 * w)])
    inside = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    values = np.zeros(rows.size, dtype=np.int32)
    available = np.zeros(rows.size, dtype=bool)
    available[inside] = decoded[rows[inside], cols[inside]]
    values[available] = recon[rows[available], cols[available]]

    if not available.any():
        values[:] = 1 << (bit_depth - 1)
    else:
        last = np.where(available, np.arange(rows.size), -1)
        np.maximum.accumulate(last, out=last)
        first = int(np.argmax(available))
        last[last < 0] = first
        values = values[last]

    left = values[: 2 * h][::-1].copy()
    above = values[2 * h :].copy()
    return ReferenceSamples(
        above=above,
        left=left,
        above_available=available[2 * h :].copy(),
        left_available=available[: 2 * h][::-1].copy(),
    )


def _square_size(refs: ReferenceSamples, w: int, h: int) -> int:
    if w != h or refs.width != w or refs.height != h:
        msg = f"Classic prediction needs square blocks with matching references, got {w}x{h}"
        raise UnsupportedBlockSizeError(msg)
    return w


def predict_dc(refs: ReferenceSamples, w: int, h: int) -> np.ndarray:
    """Rounded mean of the ``w`` above and ``h`` left nearest references."""
    total = int(refs.above[1 : w + 1].sum()) + int(refs.left[:h].sum())
    count = w + h
    return np.full((h, w), (total + count // 2) // count, dtype=np.int32)


def predict_planar(refs: ReferenceSamples, size: int) -> np.ndarray:
    """Bilinear blend of a horizontal and a vertical propagation."""
    top = refs.above[1 : size + 1].astype(np.int64)
    left = refs.left[:size].astype(np.int64)
    top_right = int(refs.above[size + 1])
    bottom_left = int(refs.left[size])
    shift = int(size).bit_length()  # log2(size) + 1
    xs = np.arange(size)[np.newaxis, :]
    ys = np.arange(size)[:, np.newaxis]
    horizontal = (size - 1 - xs) * left[:, np.newaxis] + (xs + 1) * top_right
    vertical = (size - 1 - ys) * top[np.newaxis, :] + (ys + 1) * bottom_left
    return ((horizontal + vertical + size) >> shift).astype(np.int32)


@lru_cache(maxsize=None)
def _angular_indices(mode: int, size: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Reference offsets and fractions of an angular mode.

    Returns:
        ``(index, fraction, angle)`` where ``index`` addresses the extended
        reference array (offset by ``size``) for the main axis and rows of
        the result run along the secondary axis.
    """
    angle = INTRA_PRED_ANGLE[mode - 2]
    scan = np.arange(1, size + 1)[:, np.newaxis] * angle  # (size, 1)
    base = np.arange(size)[np.newaxis, :]  # (1, size)
    index = size + base + (scan >> 5) + 1
    fraction = np.broadcast_to(scan & 31, (size, size))
    return index, fraction, angle


def _extended_reference(
    main: np.ndarray,
    side: np.ndarray,
    angle: int,
    size: int,
) -> np.ndarray:
    """Main reference (corner first) extended by projecting the side one.

    ``main[k]`` and ``side[k]`` are ``k``-th samples counted from the
    corner (``k = 0`` is the corner itself).
    """
    ref = np.zeros(3 * size + 1, dtype=np.int64)
    ref[size : 3 * size + 1] = main[: 2 * size + 1]
    if angle < 0 and (size * angle) >> 5 < -1:
        inv_angle = INV_ANGLE[angle]
        for k in range((size * angle) >> 5, 0):
            ref[size + k] = side[(k * inv_angle + 128) >> 8]
    return ref


def predict_angular(refs: ReferenceSamples, mode: int, size: int) -> np.ndarray:
    """Project reference samples along the direction of ``mode`` (2-34)."""
    above = refs.above.astype(np.int64)
    left = np.concatenate([[refs.above[0]], refs.left]).astype(np.int64)
    vertical = mode >= 18  # noqa: PLR2004
    main, side = (above, left) if vertical else (left, above)
    index, fraction, angle = _angular_indices(mode, size)
    ref = _extended_reference(main, side, angle, size)
    near = ref[index]
    far = ref[np.minimum(index + 1, ref.size - 1)]
    pred = np.where(fraction == 0, near, ((32 - fraction) * near + fraction * far + 16) >> 5)
    # Rows of ``pred`` run along the secondary axis.
    return (pred if vertical else pred.T).astype(np.int32)


def predict_classic(refs: ReferenceSamples, mode: int, w: int, h: int) -> np.ndarray:
    """Predict a ``h x w`` block with one of the 35 classic modes.

    Raises:
        InvalidModeError: ``mode`` is outside ``[0, 34]``.
        UnsupportedBlockSizeError: Non-square block or mismatched references.
    """
    mode = check_mode(mode)
    if mode == DC:
        return predict_dc(refs, w, h)
    size = _square_size(refs, w, h)
    if mode == PLANAR:
        return predict_planar(refs, size)
    return predict_angular(refs, mode, size)


def predict_all_classic(refs: ReferenceSamples, size: int) -> np.ndarray:
    """Predictions of all 35 classic modes, shape ``(35, size, size)``."""
    return np.stack([predict_classic(refs, mode, size, size) for mode in range(NUM_CLASSIC_MODES)])


def prediction_mse(block: np.ndarray, predictions: np.ndarray) -> np.ndarray:
    """MSE of each stacked prediction against ``block``."""
    diff = predictions.astype(np.float64) - block.astype(np.float64)
    return np.mean(diff * diff, axis=(-2, -1))


def rank_classic_by_mse(block: np.ndarray, refs: ReferenceSamples) -> list[tuple[int, float]]:
    """All 35 classic modes sorted by prediction MSE, ties to the lower mode."""
    h, w = block.shape
    _square_size(refs, w, h)
    errors = prediction_mse(block, predict_all_classic(refs, w))
    return rank_errors(errors)


def rank_errors(errors: t.Sequence[float] | np.ndarray) -> list[tuple[int, float]]:
    """Sort ``(mode, mse)`` pairs ascending by error then mode index."""
    return sorted(((mode, float(err)) for mode, err in enumerate(errors)), key=lambda item: (item[1], item[0]))


def third_lowest_mse(errors: np.ndarray) -> float:
    """``d_c``: the third-lowest classic prediction MSE."""
    return rank_errors(errors)[2][1]
