"""Synthetic planes and fixed networks for the test suite."""

from __future__ import annotations

import numpy as np

from itnn_codec.nn_predict import NetworkParams, layer_dims

SIZES = ((4, 4), (8, 8), (16, 16), (32, 32))


def textured_samples(width: int = 64, height: int = 64, seed: int = 0) -> np.ndarray:
    """Smooth waves plus noise, so several block sizes and modes get picked."""
    rows, cols = np.mgrid[0:height, 0:width]
    phase = np.random.default_rng(seed).uniform(0, 2 * np.pi, size=3)
    base = (
        128
        + 50 * np.sin(cols / 5.0 + phase[0])
        + 35 * np.cos(rows / 7.0 + phase[1])
        + 20 * np.sin((rows + cols) / 3.0 + phase[2])
    )
    noise = np.random.default_rng(seed + 1).normal(0.0, 4.0, size=base.shape)
    return np.clip(np.rint(base + noise), 0, 255).astype(np.uint8)


def zero_network(h: int, w: int, hidden: int = 4, output_bias: float = 0.0) -> NetworkParams:
    """A network that always outputs ``output_bias``, i.e. predicts ``mu + output_bias``."""
    dims = layer_dims(h, w, hidden)
    weights = tuple(np.zeros((fan_in, fan_out), dtype=np.float32) for fan_in, fan_out in zip(dims[:-1], dims[1:]))
    biases = [np.zeros(fan_out, dtype=np.float32) for fan_out in dims[1:]]
    biases[-1][:] = output_bias
    return NetworkParams(h=h, w=w, weights=weights, biases=tuple(biases))
