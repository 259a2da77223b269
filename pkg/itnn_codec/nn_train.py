"""Training of the per-size predictors.

The objective for one block size is the mean over pairs of the (unsquared)
l2-norm of the prediction error plus ``weight_decay`` times the squared
l2-norm of the weights (biases are not decayed). It is minimised by
mini-batch gradient descent with momentum over a staged learning-rate
schedule.
"""

from __future__ import annotations

import logging
import math
import struct
import time
import typing as t
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from itnn_codec.errors import DimensionMismatchError, ShardFormatError, TrainingError
from itnn_codec.nn_predict import ContextGeometry, NetworkParams

logger = logging.getLogger(__name__)

SHARD_MAGIC = b"ITTS"
SHARD_VERSION = 1
_SHARD_HEADER = struct.Struct("<4sHHHII")


@dataclass(frozen=True)
class PairProvenance:
    """Where a training pair was cut from."""

    image_id: str
    x: int
    y: int
    qp: int
    iteration: int

    @property
    def key(self) -> tuple[str, int, int]:
        """Identity of the source block, ``(image_id, x, y)``."""
        return self.image_id, self.x, self.y


@dataclass(frozen=True)
class TrainingPair:
    """Masked, centered context ``x_c`` and centered block ``y_c``."""

    x_c: np.ndarray
    y_c: np.ndarray


@dataclass(frozen=True)
class TrainingSet:
    """Training pairs of one block size, stored as stacked arrays."""

    h: int
    w: int
    x: np.ndarray
    y: np.ndarray
    provenance: tuple[PairProvenance, ...] = ()

    def __post_init__(self) -> None:
        """Check the geometry of the stacked arrays."""
        geometry = ContextGeometry(self.h, self.w)
        if self.x.ndim != 2 or self.x.shape[1] != geometry.length:  # noqa: PLR2004
            msg = f"Contexts of shape {self.x.shape} do not fit a {self.w}x{self.h} block"
            raise DimensionMismatchError(msg)
        if self.y.shape != (self.x.shape[0], geometry.block_pixels):
            msg = f"Blocks of shape {self.y.shape} do not match {self.x.shape[0]} contexts"
            raise DimensionMismatchError(msg)
        if self.provenance and len(self.provenance) != self.x.shape[0]:
            msg = "Provenance must cover every pair"
            raise DimensionMismatchError(msg)

    def __len__(self) -> int:
        """Number of pairs."""
        return int(self.x.shape[0])

    @property
    def pairs(self) -> list[TrainingPair]:
        """The pairs as individual objects."""
        return [TrainingPair(x_c=x_c, y_c=y_c) for x_c, y_c in zip(self.x, self.y)]

    @classmethod
    def empty(cls, h: int, w: int) -> TrainingSet:
        """A set without pairs."""
        geometry = ContextGeometry(h, w)
        return cls(h, w, np.zeros((0, geometry.length), np.float32), np.zeros((0, h * w), np.float32))

    @classmethod
    def from_pairs(
        cls,
        h: int,
        w: int,
        pairs: t.Sequence[TrainingPair],
        provenance: t.Sequence[PairProvenance] = (),
    ) -> TrainingSet:
        """Stack individual pairs."""
        if not pairs:
            return cls.empty(h, w)
        x = np.stack([np.asarray(pair.x_c, dtype=np.float32) for pair in pairs])
        y = np.stack([np.asarray(pair.y_c, dtype=np.float32) for pair in pairs])
        return cls(h, w, x, y, tuple(provenance))

    @classmethod
    def concatenate(cls, h: int, w: int, sets: t.Sequence[TrainingSet]) -> TrainingSet:
        """Merge sets of the same size, keeping their order."""
        sets = [part for part in sets if len(part)]
        if not sets:
            return cls.empty(h, w)
        provenance = tuple(entry for part in sets for entry in part.provenance)
        return cls(
            h,
            w,
            np.concatenate([part.x for part in sets]),
            np.concatenate([part.y for part in sets]),
            provenance if len(provenance) == sum(len(part) for part in sets) else (),
        )


def save_shard(training_set: TrainingSet, path: Path | str) -> Path:
    """Write a set as a versioned little-endian float32 shard."""
    path = Path(path)
    geometry = ContextGeometry(training_set.h, training_set.w)
    header = _SHARD_HEADER.pack(
        SHARD_MAGIC, SHARD_VERSION, training_set.h, training_set.w, geometry.length, len(training_set)
    )
    body = np.concatenate([training_set.x, training_set.y], axis=1).astype("<f4")
    path.write_bytes(header + body.tobytes())
    return path


def load_shard(path: Path | str, provenance: t.Sequence[PairProvenance] = ()) -> TrainingSet:
    """Read a shard written by :func:`save_shard`.

    Raises:
        ShardFormatError: Bad header or payload length.
    """
    data = Path(path).read_bytes()
    if len(data) < _SHARD_HEADER.size:
        msg = f"{path}: shorter than the shard header"
        raise ShardFormatError(msg)
    magic, version, h, w, d_in, count = _SHARD_HEADER.unpack_from(data)
    if magic != SHARD_MAGIC or version != SHARD_VERSION:
        msg = f"{path}: not a version {SHARD_VERSION} shard"
        raise ShardFormatError(msg)
    if d_in != ContextGeometry(h, w).length:
        msg = f"{path}: context length {d_in} does not fit {w}x{h}"
        raise ShardFormatError(msg)
    row = d_in + h * w
    if len(data) != _SHARD_HEADER.size + 4 * row * count:
        msg = f"{path}: payload does not hold {count} pairs"
        raise ShardFormatError(msg)
    body = np.frombuffer(data, dtype="<f4", offset=_SHARD_HEADER.size).reshape(count, row).astype(np.float32)
    return TrainingSet(h, w, body[:, :d_in].copy(), body[:, d_in:].copy(), tuple(provenance))


@dataclass(frozen=True)
class TrainingHyperparams:
    """Optimisation settings shared by all block sizes.

    Attributes:
        weight_decay: Coefficient of the squared weight norm.
        batch_size: Pairs per optimizer step.
        learning_rate: Base learning rate of the first stage.
        stages: ``(steps, lr multiplier)`` per stage.
        p: Multiplier applied to every stage's step count.
        momentum: Momentum coefficient.
        seed: Seed of the per-epoch shuffles.
    """

    weight_decay: float = 0.0005
    batch_size: int = 64
    learning_rate: float = 1e-4
    stages: tuple[tuple[int, float], ...] = ((2000, 1.0), (1000, 0.1), (500, 0.01))
    p: int = 1
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        """Validate counts."""
        if self.p < 1 or self.batch_size < 1 or any(steps < 1 for steps, _ in self.stages) or not self.stages:
            msg = f"Invalid hyperparameters: p={self.p}, batch_size={self.batch_size}, stages={self.stages}"
            raise TrainingError(msg)

    @property
    def total_steps(self) -> int:
        """Optimizer steps over all stages, scaled by ``p``."""
        return sum(steps for steps, _ in self.stages) * self.p


@dataclass
class TrainingHistory:
    """Bookkeeping of one training run."""

    steps: int = 0
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def curve(self, points: int = 50) -> list[float]:
        """Loss curve subsampled to at most ``points`` means of consecutive steps."""
        if not self.losses:
            return []
        chunks = np.array_split(np.asarray(self.losses), min(points, len(self.losses)))
        return [float(chunk.mean()) for chunk in chunks]


def init_params(seed: int, dims: t.Sequence[int], h: int | None = None, w: int | None = None) -> NetworkParams:
    """Glorot-uniform weights and zero biases, deterministic per seed.

    The block size defaults to the square whose area is the output width.
    """
    if h is None or w is None:
        side = math.isqrt(dims[-1])
        if side * side != dims[-1]:
            msg = f"Output width {dims[-1]} is not a square block; pass h and w"
            raise DimensionMismatchError(msg)
        h = w = side
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32))
        biases.append(np.zeros(fan_out, dtype=np.float32))
    return NetworkParams(h=h, w=w, weights=tuple(weights), biases=tuple(biases))


def _batch_arrays(batch: t.Sequence[TrainingPair] | TrainingSet) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, TrainingSet):
        x, y = batch.x, batch.y
    else:
        if not batch:
            x = y = np.zeros((0, 0))
        else:
            x = np.stack([np.asarray(pair.x_c) for pair in batch])
            y = np.stack([np.asarray(pair.y_c) for pair in batch])
    if x.shape[0] == 0:
        msg = "Cannot evaluate the loss of an empty batch"
        raise TrainingError(msg)
    return x.astype(np.float64), y.astype(np.float64)


def _loss_and_gradient(
    x: np.ndarray,
    y: np.ndarray,
    weights: t.Sequence[np.ndarray],
    biases: t.Sequence[np.ndarray],
    slope: float,
    weight_decay: float,
    *,
    with_gradient: bool = True,
) -> tuple[float, list[np.ndarray] | None, list[np.ndarray] | None]:
    """Loss and its gradient with respect to every weight and bias.

    Gradients keep the dtype of ``x``; the loss is always reduced in float64.
    """
    if x.shape[1] != weights[0].shape[0]:
        msg = f"Context length {x.shape[1]} != network input {weights[0].shape[0]}"
        raise DimensionMismatchError(msg)
    n = x.shape[0]
    last = len(weights) - 1
    activations = [x]
    pre_activations = []
    for k, (weight, bias) in enumerate(zip(weights, biases)):
        z = activations[-1] @ weight + bias
        pre_activations.append(z)
        activations.append(np.where(z > 0, z, slope * z) if k < last else z)

    residual = y - activations[-1]
    wide = residual.astype(np.float64)
    norms = np.sqrt(np.sum(wide * wide, axis=1))
    decay = sum(float(np.sum(np.square(weight, dtype=np.float64))) for weight in weights)
    loss = float(np.mean(norms)) + weight_decay * decay
    if not with_gradient:
        return loss, None, None

    # d mean(||r||) / d y_hat = -r / (n ||r||), zero where ||r|| == 0
    safe = np.where(norms > 0, norms, 1.0)
    delta = np.where(norms[:, np.newaxis] > 0, -wide / (n * safe[:, np.newaxis]), 0.0).astype(x.dtype)
    grad_w: list[np.ndarray] = [np.empty(0)] * len(weights)
    grad_b: list[np.ndarray] = [np.empty(0)] * len(weights)
    for k in range(last, -1, -1):
        if k < last:
            delta = delta * np.where(pre_activations[k] > 0, 1.0, slope).astype(x.dtype)
        grad_w[k] = activations[k].T @ delta + 2.0 * weight_decay * weights[k]
        grad_b[k] = delta.sum(axis=0)
        if k:
            delta = delta @ weights[k].T
    return loss, grad_w, grad_b


def loss(batch: t.Sequence[TrainingPair] | TrainingSet, params: NetworkParams, weight_decay: float) -> float:
    """Mean l2-norm prediction error plus weight decay.

    Raises:
        TrainingError: The batch is empty.
    """
    x, y = _batch_arrays(batch)
    value, _, _ = _loss_and_gradient(
        x,
        y,
        [weight.astype(np.float64) for weight in params.weights],
        [bias.astype(np.float64) for bias in params.biases],
        params.slope,
        weight_decay,
        with_gradient=False,
    )
    return value


def gradient(batch: t.Sequence[TrainingPair] | TrainingSet, params: NetworkParams, weight_decay: float) -> NetworkParams:
    """Exact gradient of :func:`loss`, shaped like the parameters (float64).

    The l2-norm term contributes zero for pairs predicted exactly and the
    LeakyReLU derivative at zero is the slope.
    """
    x, y = _batch_arrays(batch)
    _, grad_w, grad_b = _loss_and_gradient(
        x,
        y,
        [weight.astype(np.float64) for weight in params.weights],
        [bias.astype(np.float64) for bias in params.biases],
        params.slope,
        weight_decay,
    )
    return NetworkParams(h=params.h, w=params.w, weights=tuple(grad_w), biases=tuple(grad_b), slope=params.slope)


def _batches(count: int, batch_size: int, rng: np.random.Generator) -> t.Iterator[np.ndarray]:
    """Endless mini-batch indices, reshuffled at each epoch."""
    batch_size = min(batch_size, count)
    while True:
        order = rng.permutation(count)
        for start in range(0, count - batch_size + 1, batch_size):
            yield order[start : start + batch_size]


def train(
    training_set: TrainingSet,
    init: NetworkParams,
    hp: TrainingHyperparams,
    history: TrainingHistory | None = None,
) -> NetworkParams:
    """Fit a predictor to one training set.

    Args:
        training_set: Pairs of one block size.
        init: Starting point (random initialisation or a warm start).
        hp: Optimisation settings.
        history: Receives the step count, per-step losses and duration.

    Returns:
        The trained parameters, float32.

    Raises:
        TrainingError: The set is empty.
    """
    if not len(training_set):
        msg = f"Training set {training_set.w}x{training_set.h} is empty"
        raise TrainingError(msg)
    if (training_set.h, training_set.w) != (init.h, init.w):
        msg = f"Set {training_set.w}x{training_set.h} does not match network {init.w}x{init.h}"
        raise DimensionMismatchError(msg)
    history = history if history is not None else TrainingHistory()
    started = time.perf_counter()
    rng = np.random.default_rng(hp.seed)
    # float32 accumulation, float64 loss reduction
    x_all = training_set.x.astype(np.float32)
    y_all = training_set.y.astype(np.float32)
    weights = [weight.astype(np.float32) for weight in init.weights]
    biases = [bias.astype(np.float32) for bias in init.biases]
    velocity_w = [np.zeros_like(weight) for weight in weights]
    velocity_b = [np.zeros_like(bias) for bias in biases]
    batches = _batches(len(training_set), hp.batch_size, rng)

    logger.info(
        f"Training {init.w}x{init.h} network on {len(training_set)} pairs for {hp.total_steps} steps (p={hp.p})"
    )
    for stage, (steps, multiplier) in enumerate(hp.stages):
        lr = hp.learning_rate * multiplier
        for _ in range(steps * hp.p):
            index = next(batches)
            value, grad_w, grad_b = _loss_and_gradient(
                x_all[index], y_all[index], weights, biases, init.slope, hp.weight_decay
            )
            for k in range(len(weights)):
                velocity_w[k] = hp.momentum * velocity_w[k] - lr * grad_w[k]
                velocity_b[k] = hp.momentum * velocity_b[k] - lr * grad_b[k]
                weights[k] += velocity_w[k]
                biases[k] += velocity_b[k]
            history.losses.append(value)
            history.steps += 1
        logger.info(f"Stage {stage} (lr={lr:g}) done, last batch loss {history.losses[-1]:.4f}")

    history.seconds += time.perf_counter() - started
    logger.info(f"Trained {init.w}x{init.h} network in {history.seconds:.1f}s")
    return NetworkParams(
        h=init.h,
        w=init.w,
        weights=tuple(weight.astype(np.float32) for weight in weights),
        biases=tuple(bias.astype(np.float32) for bias in biases),
        slope=init.slope,
    )
