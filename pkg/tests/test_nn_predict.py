"""Tests for context geometry, preprocessing, inference and model files."""

from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest

from itnn_codec.errors import ContextOutOfFrameError, DimensionMismatchError, ModelFormatError
from itnn_codec.nn_predict import (
    MASK_VALUE,
    ContextGeometry,
    NetworkParams,
    RawContext,
    deserialize_params,
    extract_context,
    forward,
    holes_mask,
    layer_dims,
    load_models,
    postprocess,
    predict_block,
    preprocess,
    save_models,
    serialize_params,
)
from itnn_codec.nn_train import init_params

from tests.helpers import zero_network

SIDES = (4, 8, 16, 32)


@pytest.mark.parametrize(("size", "expected"), [((4, 4), 2_998_816), ((8, 8), 3_344_464)])
def test_full_width_parameter_count(size, expected):
    dims = layer_dims(*size)
    count = sum(fan_in * fan_out + fan_out for fan_in, fan_out in zip(dims[:-1], dims[1:]))
    assert count == expected


def test_parameter_count_of_constructed_network():
    params = init_params(0, layer_dims(4, 4), 4, 4)
    assert params.parameter_count == 2_998_816


@pytest.mark.parametrize("h", SIDES)
@pytest.mark.parametrize("w", SIDES)
def test_context_length_formula(h, w):
    geometry = ContextGeometry(h, w)
    m = min(h, w)
    assert geometry.n_a == geometry.n_l == m
    assert geometry.length == m * 2 * h + m * (m + 2 * w)
    assert geometry.length == geometry.above_shape[0] * geometry.above_shape[1] + (
        geometry.left_shape[0] * geometry.left_shape[1]
    )
    if h == w:
        assert geometry.delta == 5
    assert geometry.delta == Fraction(geometry.length, h * w)


def test_context_lengths_of_figure_geometries():
    assert ContextGeometry(8, 4).above_shape == (4, 12)
    assert ContextGeometry(8, 4).left_shape == (16, 4)
    assert ContextGeometry(8, 4).length == 112
    assert ContextGeometry(4, 4).length == 80


def test_extract_all_decoded():
    recon = np.arange(32 * 32).reshape(32, 32) % 251
    decoded = np.ones((32, 32), dtype=bool)
    raw = extract_context(recon, decoded, 8, 8, 4, 4)
    assert raw.available.all()
    # above rectangle first, row-major, then the left rectangle
    assert raw.values[:12].tolist() == recon[4, 4:16].tolist()
    assert raw.values[48:52].tolist() == recon[8, 4:8].tolist()


def test_extract_marks_undecoded_and_outside():
    recon = np.full((16, 16), 9)
    decoded = np.zeros((16, 16), dtype=bool)
    decoded[:8, :] = True
    decoded[8:12, :12] = True
    raw = extract_context(recon, decoded, 12, 8, 4, 4)
    geometry = ContextGeometry(4, 4)
    above = raw.available[:48].reshape(geometry.above_shape)
    left = raw.available[48:].reshape(geometry.left_shape)
    # columns x = 16..19 fall outside the frame
    assert above[:, :8].all()
    assert not above[:, 8:].any()
    assert left[:4].all()
    assert not left[4:].any()
    assert np.array_equal(raw.available, holes_mask(geometry, n0=4, n1=4))


def test_extract_refuses_top_left_boundary():
    with pytest.raises(ContextOutOfFrameError):
        extract_context(np.zeros((16, 16)), np.ones((16, 16), bool), 2, 8, 4, 4)


def test_preprocess_examples():
    full = preprocess(RawContext(np.full(4, 100.0), np.ones(4, bool)))
    assert full.mu == 100
    assert np.all(full.x_c == 0)

    half = preprocess(RawContext(np.array([50.0, 50.0, 7.0, 3.0]), np.array([True, True, False, False])))
    assert half.mu == 50
    assert half.x_c.tolist() == [0.0, 0.0, MASK_VALUE, MASK_VALUE]

    extremes = preprocess(RawContext(np.array([0.0, 255.0]), np.ones(2, bool)))
    assert extremes.mu == 127.5
    assert extremes.x_c.tolist() == [-127.5, 127.5]

    empty = preprocess(RawContext(np.array([1.0, 2.0]), np.zeros(2, bool)))
    assert empty.mu == 128
    assert np.all(empty.x_c == MASK_VALUE)


def test_forward_of_zero_network():
    params = zero_network(4, 4)
    assert np.all(forward(params, np.ones(80)) == 0)


def test_forward_rejects_wrong_context_length():
    with pytest.raises(DimensionMismatchError):
        forward(zero_network(4, 4), np.ones(79))


def test_forward_matches_scalar_loops():
    params = init_params(5, (80, 6, 5, 16), 4, 4)
    params = NetworkParams(
        h=4,
        w=4,
        weights=params.weights,
        biases=tuple(np.random.default_rng(k).normal(size=b.shape).astype(np.float32) for k, b in enumerate(params.biases)),
    )
    x = np.random.default_rng(9).normal(0, 50, size=80)

    activation = list(x)
    for k, (weight, bias) in enumerate(zip(params.weights, params.biases)):
        out = []
        for j in range(weight.shape[1]):
            total = float(bias[j])
            for i in range(weight.shape[0]):
                total += activation[i] * float(weight[i, j])
            if k < len(params.weights) - 1 and total <= 0:
                total *= params.slope
            out.append(total)
        activation = out

    assert np.allclose(forward(params, x), activation, rtol=0, atol=1e-9)
    batch = forward(params, np.stack([x, x]))
    assert batch.shape == (2, 16)


def test_leaky_relu_is_identity_on_positive_path():
    weights = (np.eye(2, dtype=np.float32), np.eye(2, dtype=np.float32))
    biases = (np.zeros(2, np.float32), np.zeros(2, np.float32))
    params = NetworkParams(h=1, w=2, weights=weights, biases=biases)
    assert forward(params, np.array([3.0, 4.0])).tolist() == [3.0, 4.0]
    assert forward(params, np.array([-10.0, 4.0])).tolist() == pytest.approx([-1.0, 4.0])


def test_postprocess_examples():
    assert np.all(postprocess(np.zeros(16), 100.0, shape=(4, 4)) == 100)
    assert postprocess(np.array([-300.0]), 0.0)[0] == 0
    assert postprocess(np.array([10.4]), 100.0, bit_depth=10)[0] == 442


def test_predict_block_with_zero_network_gives_context_mean():
    recon = np.full((32, 32), 60)
    decoded = np.ones((32, 32), dtype=bool)
    decoded[8:, 8:] = False
    block, context = predict_block(zero_network(8, 8), recon, decoded, 8, 8)
    assert context.mu == 60
    assert np.all(block == 60)


def test_model_file_round_trip(tmp_path):
    models = {(4, 4): init_params(1, layer_dims(4, 4, 8)), (8, 8): init_params(2, layer_dims(8, 8, 8))}
    save_models(models, tmp_path)
    loaded = load_models(tmp_path)
    assert sorted(loaded) == [(4, 4), (8, 8)]
    for size, params in models.items():
        assert loaded[size].digest() == params.digest()
        assert all(np.array_equal(a, b) for a, b in zip(loaded[size].weights, params.weights))


@pytest.mark.parametrize(
    "mutate",
    [
        lambda data: data[:-1],
        lambda data: b"NOPE" + data[4:],
        lambda data: data[:4] + b"\x09\x00" + data[6:],
        lambda data: data[:10],
    ],
)
def test_corrupt_model_files(mutate):
    data = serialize_params(init_params(3, layer_dims(4, 4, 4)))
    with pytest.raises(ModelFormatError):
        deserialize_params(mutate(data))
