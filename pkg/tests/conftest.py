"""Shared fixtures: a session-scoped synthetic corpus and loaded spectrograms."""

import numpy as np
import pytest

from valence_gan import evaluation, synth


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Default synthetic corpus, generated once per test session."""
    root = tmp_path_factory.mktemp("corpus")
    synth.generate(synth.SynthSpec(), root)
    return root


@pytest.fixture(scope="session")
def manifest_path(corpus_dir):
    return corpus_dir / "manifest.jsonl"


@pytest.fixture(scope="session")
def corpus(manifest_path, tmp_path_factory):
    """CorpusData with a warm spectrogram cache."""
    cache = tmp_path_factory.mktemp("cache")
    return evaluation.CorpusData.load(manifest_path, cache)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
