"""Orthonormal DCT, uniform quantization and coefficient rate."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import fft


def qstep(qp: int) -> float:
    """Quantization step ``2 ** ((QP - 4) / 6)``."""
    return float(2.0 ** ((qp - 4) / 6.0))


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to nearest, ties away from zero."""
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def forward_dct(residual: np.ndarray) -> np.ndarray:
    """2-D orthonormal DCT-II over the last two axes."""
    return fft.dctn(np.asarray(residual, dtype=np.float64), type=2, norm="ortho", axes=(-2, -1))


def inverse_dct(coefficients: np.ndarray) -> np.ndarray:
    """Inverse of :func:`forward_dct`."""
    return fft.idctn(np.asarray(coefficients, dtype=np.float64), type=2, norm="ortho", axes=(-2, -1))


def transform_quantize(residual: np.ndarray, qp: int) -> np.ndarray:
    """Transform and quantize a residual (or a stack of residuals) to integer levels."""
    return round_half_away(forward_dct(residual) / qstep(qp)).astype(np.int64)


def dequantize_inverse(levels: np.ndarray, qp: int) -> np.ndarray:
    """Dequantize and inverse-transform levels to an integer residual."""
    return round_half_away(inverse_dct(np.asarray(levels, dtype=np.float64) * qstep(qp))).astype(np.int64)


def reconstruct(prediction: np.ndarray, levels: np.ndarray, qp: int, bit_depth: int = 8) -> np.ndarray:
    """Prediction plus decoded residual, clipped to the sample range."""
    recon = prediction.astype(np.int64) + dequantize_inverse(levels, qp)
    return np.clip(recon, 0, (1 << bit_depth) - 1).astype(np.int32)


@lru_cache(maxsize=None)
def zigzag_order(size: int) -> np.ndarray:
    """Flat indices of a ``size x size`` block in zigzag scan order."""
    order = sorted(
        ((r, c) for r in range(size) for c in range(size)),
        key=lambda rc: (rc[0] + rc[1], rc[0] if (rc[0] + rc[1]) % 2 else rc[1]),
    )
    flat = np.array([r * size + c for r, c in order], dtype=np.intp)
    flat.setflags(write=False)
    return flat


def ue_bits(values: np.ndarray | int) -> np.ndarray:
    """Length of the unsigned exp-Golomb (k=0) code of each value."""
    values = np.asarray(values, dtype=np.int64)
    # floor(log2(v + 1)) through the bit length of v + 1
    lengths = np.frexp((values + 1).astype(np.float64))[1] - 1
    return 2 * lengths + 1


def signed_to_code_num(values: np.ndarray | int) -> np.ndarray:
    """Map signed levels to exp-Golomb code numbers (k > 0: 2k - 1, else -2k)."""
    values = np.asarray(values, dtype=np.int64)
    return np.where(values > 0, 2 * values - 1, -2 * values)


def code_num_to_signed(code_num: int) -> int:
    """Inverse of :func:`signed_to_code_num` for one value."""
    return (code_num + 1) // 2 if code_num % 2 else -(code_num // 2)


def coded_length(scanned: np.ndarray) -> np.ndarray:
    """Number of coefficients up to and including the last non-zero one.

    ``scanned`` holds levels in zigzag order on its last axis.
    """
    nonzero = scanned != 0
    size = scanned.shape[-1]
    last = size - np.argmax(nonzero[..., ::-1], axis=-1)
    return np.where(nonzero.any(axis=-1), last, 0)


def level_bits(levels: np.ndarray) -> np.ndarray:
    """Exact bit cost of coding level blocks (last two axes).

    The syntax is ``ue(n)`` with ``n`` the coded length in zigzag order,
    followed by ``se(level)`` for the first ``n`` levels; trailing zeros
    are not sent.
    """
    size = levels.shape[-1]
    scanned = levels.reshape(*levels.shape[:-2], size * size)[..., zigzag_order(size)]
    count = coded_length(scanned)
    per_level = ue_bits(signed_to_code_num(scanned))
    keep = np.arange(size * size) < count[..., np.newaxis]
    return ue_bits(count) + np.sum(per_level * keep, axis=-1)
