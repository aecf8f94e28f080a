import numpy as np
import pytest

from audiomlm.data import SyntheticCorpusSpec, generate_synthetic


@pytest.fixture(scope="session")
def small_tone_corpus(tmp_path_factory):
    """24-clip 4-class tone-sequence corpus for data/training tests."""
    out = tmp_path_factory.mktemp("tone24")
    spec = SyntheticCorpusSpec(n_clips=24, clip_seconds=1.5, kind="tone-sequence", classes=4, seed=7)
    manifest_path = generate_synthetic(spec, out)
    return manifest_path


@pytest.fixture
def rng():
    return np.random.default_rng(0)
