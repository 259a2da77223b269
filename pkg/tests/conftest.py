"""Shared fixtures: synthetic planes, corpora and tiny networks."""

from __future__ import annotations

import typing as t
from pathlib import Path

import pytest

from itnn_codec.frame_io import Corpus, LuminancePlane, save_pgm
from itnn_codec.nn_predict import NetworkParams, layer_dims
from itnn_codec.nn_train import init_params
from tests.helpers import SIZES, textured_samples, zero_network


@pytest.fixture
def make_plane() -> t.Callable[..., LuminancePlane]:
    """Factory of textured planes."""

    def factory(width: int = 64, height: int = 64, seed: int = 0) -> LuminancePlane:
        return LuminancePlane(textured_samples(width, height, seed))

    return factory


@pytest.fixture
def tiny_models() -> dict[tuple[int, int], NetworkParams]:
    """Randomly initialised networks with 8 neurons per hidden layer."""
    return {(h, w): init_params(10 + h, layer_dims(h, w, 8), h, w) for h, w in SIZES}


@pytest.fixture
def zero_models() -> dict[tuple[int, int], NetworkParams]:
    """Networks predicting the context mean."""
    return {(h, w): zero_network(h, w) for h, w in SIZES}


@pytest.fixture
def corpus_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Directory with four textured 64x64 PGMs."""
    directory = tmp_path_factory.mktemp("corpus")
    for k in range(4):
        save_pgm(LuminancePlane(textured_samples(64, 64, seed=k)), directory / f"img_{k:02d}.pgm")
    return directory


@pytest.fixture
def small_corpus(corpus_dir: Path) -> Corpus:
    """The images of ``corpus_dir``."""
    return Corpus.from_directory(corpus_dir)
