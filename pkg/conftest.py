"""テスト共通のフィクスチャ"""

import numpy as np
import pytest

from audio import AudioBuffer, MultichannelSpectrogram, StftConfig
from config import preset_config
from nmf import Library
from utils import RandomGenerator

SAMPLE_RATE = 16000


@pytest.fixture
def rng():
    return RandomGenerator(seed=1234).rng


@pytest.fixture
def small_stft():
    """128 サンプル窓・64 サンプルシフト（16 kHz）"""
    return StftConfig(window_length_ms=8.0, hop_length_ms=4.0)


@pytest.fixture
def noise_buffer(rng):
    return AudioBuffer(rng.standard_normal((2, 4000)) * 0.1, SAMPLE_RATE)


def random_multichannel(rng, channels: int, n_bins: int, n_frames: int,
                        stft_config: StftConfig = StftConfig()) -> MultichannelSpectrogram:
    data = rng.standard_normal((channels, n_bins, n_frames)) + 1j * rng.standard_normal((channels, n_bins, n_frames))
    return MultichannelSpectrogram(data, stft_config, SAMPLE_RATE)


def band_library(n_bins: int = 16, k: int = 2, labels=('low', 'high')) -> Library:
    """話者ごとに周波数帯が重ならないライブラリ"""
    basis = np.full((n_bins, k * len(labels)), 1e-6)
    band = n_bins // len(labels)
    for j in range(len(labels)):
        for q in range(k):
            column = basis[:, j * k + q]
            column[j * band:(j + 1) * band] = 1.0 + q * np.linspace(0.0, 1.0, band)
    basis /= basis.sum(axis=0, keepdims=True)
    return Library(basis, list(labels), [k] * len(labels))


@pytest.fixture
def smoke_config():
    return preset_config('smoke', seed=7)
