"""GCC-PHAT・音源数推定・空間共分散の初期化のテスト"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from audio import AudioBuffer, StftConfig
from doa import (
    DoaEstimate,
    MicArrayGeometry,
    angles_of_spatial_covariance,
    count_and_localize,
    fallback_spatial_covariance,
    gcc_phat,
    init_spatial_covariance,
)
from errors import ConfigError, ShapeError
from scene import SceneConfig, random_profile, simulate_scene

SR = 16000


def _delayed(x, d):
    """d > 0 なら d サンプル遅らせ、d < 0 なら進める"""
    if d >= 0:
        return np.concatenate([np.zeros(d), x[:len(x) - d]])
    return np.concatenate([x[-d:], np.zeros(-d)])


def test_geometry_limits():
    geometry = MicArrayGeometry()
    assert geometry.max_lag == 7
    assert geometry.max_delay == pytest.approx(0.15 / 343.0)
    assert geometry.angle_of_tdoa(geometry.tdoa_of_angle(30.0)) == pytest.approx(30.0)
    assert geometry.angle_of_tdoa(1.0) == pytest.approx(90.0)
    with pytest.raises(ConfigError):
        MicArrayGeometry(spacing=0.0)


@settings(max_examples=15, deadline=None)
@given(d=st.integers(-7, 7), seed=st.integers(0, 2 ** 16))
def test_gcc_phat_recovers_integer_delay(d, seed):
    x1 = np.random.default_rng(seed).standard_normal(4096)
    result = gcc_phat(x1, _delayed(x1, d), max_lag=7)
    assert result.peak_lag() == d
    assert len(result.lags) == 15


def test_gcc_phat_accepts_single_channel_buffers(rng):
    x = rng.standard_normal(2048)
    result = gcc_phat(AudioBuffer(x, SR), AudioBuffer(_delayed(x, 3), SR), max_lag=7)
    assert result.peak_lag() == 3


def test_gcc_phat_silent_input_is_flagged():
    with pytest.warns(UserWarning):
        result = gcc_phat(np.zeros(256), np.zeros(256), max_lag=7)
    assert result.degenerate
    assert np.all(result.values == 0)


def test_gcc_phat_length_mismatch():
    with pytest.raises(ShapeError):
        gcc_phat(np.ones(10), np.ones(11), max_lag=2)


def _anechoic_scene(angles, length=1.5, seed=3):
    scene_config = SceneConfig(s_count=len(angles), angles=angles, rt60=0.0, utterance_length=length, seed=seed)
    profiles = [random_profile(seed + s, label=f'p{s}', pitch=110.0 + 70.0 * s) for s in range(len(angles))]
    return simulate_scene(profiles, scene_config)


def test_single_source_is_counted_and_localized():
    scene = _anechoic_scene([30.0])
    estimate = count_and_localize(scene.mixture, MicArrayGeometry())
    assert estimate.count == 1
    assert not estimate.flagged
    assert abs(estimate.angles[0] - 30.0) < 6.0
    assert estimate.tdoas[0] > 0


def test_two_well_separated_sources():
    scene = _anechoic_scene([-45.0, 35.0], length=3.0)
    estimate = count_and_localize(scene.mixture, MicArrayGeometry())
    assert estimate.count >= 2
    assert estimate.peak_scores == sorted(estimate.peak_scores, reverse=True)
    assert sorted(np.sign(estimate.angles[:2])) == [-1.0, 1.0]


def test_silent_mixture_has_no_sources():
    silent = AudioBuffer(np.zeros((2, SR)), SR)
    with pytest.warns(UserWarning):
        estimate = count_and_localize(silent, MicArrayGeometry())
    assert estimate.count == 0
    assert estimate.flagged


def test_count_requires_two_channels():
    with pytest.raises(ShapeError):
        count_and_localize(AudioBuffer(np.zeros(SR), SR), MicArrayGeometry())


def test_doa_estimate_serialization():
    estimate = DoaEstimate([10.0, -20.0], [1e-4, -2e-4], [0.5, 0.3])
    restored = DoaEstimate.from_dict(estimate.to_dict())
    assert restored == estimate
    assert estimate.to_dict()['count'] == 2


def test_spatial_covariance_from_doa_is_valid_and_readable():
    """DOA から作った H は制約を満たし、非対角成分の位相から同じ角度が読み取れる"""
    geometry = MicArrayGeometry()
    stft_config = StftConfig()
    angles = [-40.0, 25.0]
    estimate = DoaEstimate(angles, [geometry.tdoa_of_angle(a) for a in angles], [1.0, 0.5])
    spatial = init_spatial_covariance(estimate, geometry, stft_config, 2)
    assert spatial.matrices.shape == (513, 2, 2, 2)
    spatial.validate()
    recovered = angles_of_spatial_covariance(spatial, geometry, stft_config)
    np.testing.assert_allclose(recovered, angles, atol=1.0)


def test_missing_peaks_fall_back_to_identity():
    geometry = MicArrayGeometry()
    estimate = DoaEstimate([10.0], [geometry.tdoa_of_angle(10.0)], [1.0])
    with pytest.warns(UserWarning):
        spatial = init_spatial_covariance(estimate, geometry, StftConfig(), 3)
    np.testing.assert_allclose(spatial.matrices[:, 2], np.broadcast_to(np.eye(2) / 2, (513, 2, 2)))
    np.testing.assert_allclose(spatial.matrices[:, 1], fallback_spatial_covariance(513, 1).matrices[:, 0])
