import warnings

import numpy as np
import pytest
import torch

from canta import corpus
from canta.dsp import FeatureConfig

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _quiet_short_utterance_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        yield


@pytest.fixture(scope="session")
def feature_config():
    return FeatureConfig()


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small deterministic corpus shared across test modules (3 singers)."""
    return corpus.build_corpus(
        n_singers=3,
        songs_per_singer=2,
        target_songs=3,
        seed=11,
        song_seconds=(4.0, 5.5),
        clone_seconds=8.0,
    )


@pytest.fixture(scope="session")
def tiny_features(tiny_corpus):
    c = tiny_corpus
    return {
        "multi_train": corpus.extract_features(
            c.train_multi, c.f0_stats, c.inventory, c.feature_config, augment_semitones=(-2, 2)
        ),
        "multi_val": corpus.extract_features(
            c.val_multi, c.f0_stats, c.inventory, c.feature_config, augment_semitones=(-2, 2)
        ),
        "target_train": corpus.extract_features(
            c.target_train, c.f0_stats, c.inventory, c.feature_config
        ),
        "target_val": corpus.extract_features(
            c.target_val, c.f0_stats, c.inventory, c.feature_config, augment_semitones=(-2, 2)
        ),
        "target_clone": corpus.extract_features(
            c.target_clone, c.f0_stats, c.inventory, c.feature_config, augment_semitones=(-2, 2)
        ),
    }


def make_tone(freq_hz: float, seconds: float = 1.0, rate: int = 32000, amp: float = 0.5):
    t = np.arange(int(round(seconds * rate))) / rate
    from canta.dsp import AudioClip

    return AudioClip(samples=amp * np.sin(2 * np.pi * freq_hz * t), sample_rate=rate)
