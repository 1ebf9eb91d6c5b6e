"""音場シミュレーションのテスト"""

import numpy as np
import pytest
from scipy.signal import correlate

from doa import MicArrayGeometry
from errors import ConfigError, InsufficientInputError
from scene import (
    SceneConfig,
    SyntheticSpeakerProfile,
    fractional_delay_filter,
    generate_rir,
    load_scene,
    random_angles,
    random_profile,
    save_scene,
    simulate_scene,
    speaker_profiles,
    synth_utterance,
    synth_utterances,
)
from utils import RandomGenerator

SR = 16000


def _scene(seed=5, angles=(-30.0, 20.0), rt60=0.2):
    profiles = speaker_profiles(len(angles), seed)
    scene_config = SceneConfig(s_count=len(angles), angles=list(angles), rt60=rt60, utterance_length=0.5, seed=seed)
    return profiles, simulate_scene(profiles, scene_config)


def test_simulation_is_deterministic():
    _, first = _scene()
    _, second = _scene()
    np.testing.assert_array_equal(first.mixture.samples, second.mixture.samples)
    for a, b in zip(first.source_images, second.source_images):
        np.testing.assert_array_equal(a.samples, b.samples)


def test_mixture_is_sum_of_images():
    _, scene = _scene()
    total = np.sum([image.samples for image in scene.source_images], axis=0)
    np.testing.assert_allclose(scene.mixture.samples, total, atol=1e-12)
    assert scene.mixture.channel_count == 2
    assert scene.mixture.length == scene.dry_sources[0].length
    assert scene.labels == ['spk00', 'spk01']


def test_true_tdoas_follow_angles():
    _, scene = _scene()
    geometry = MicArrayGeometry()
    np.testing.assert_allclose(scene.true_tdoas, [geometry.tdoa_of_angle(a) for a in scene.true_angles])


def test_speaker_profiles_are_distinct():
    profiles = speaker_profiles(5, seed=1)
    assert [p.label for p in profiles] == [f'spk{j:02d}' for j in range(5)]
    assert len({round(p.pitch, 3) for p in profiles}) == 5
    assert [p.pitch for p in speaker_profiles(5, seed=1)] == [p.pitch for p in profiles]


def test_utterance_level_and_length():
    profile = random_profile(3, label='a')
    utterance = synth_utterance(profile, 0.7, seed=11)
    assert utterance.length == int(round(0.7 * SR))
    assert np.sqrt(np.mean(utterance.samples ** 2)) == pytest.approx(0.1, rel=1e-9)
    joined = synth_utterances(profile, 3, 0.5, seed=11)
    assert joined.length == 3 * int(round(0.5 * SR))


def test_utterance_periodicity_matches_pitch():
    """イントネーションなしの合成音声の自己相関は基本周期（128 サンプル）で最大"""
    profile = SyntheticSpeakerProfile(pitch=125.0, formants=[500.0, 1000.0, 2500.0],
                                      bandwidths=[100.0, 100.0, 100.0], intonation=0.0)
    x = synth_utterance(profile, 1.0, seed=2).samples[0]
    acf = correlate(x, x, mode='full', method='fft')[len(x) - 1:]
    low, high = int(SR / 320), int(SR / 70)
    lag = low + int(np.argmax(acf[low:high]))
    assert abs(lag - 128) <= 2


def test_fractional_delay_filter_unit_dc_gain():
    for delay in [20.0, 20.25, 20.5, 23.9]:
        h = fractional_delay_filter(delay, 64)
        assert h.sum() == pytest.approx(1.0)
        assert abs(np.argmax(h) - delay) <= 0.5


def test_anechoic_rir_has_expected_delay():
    scene_config = SceneConfig(s_count=1, angles=[40.0], rt60=0.0)
    rir = generate_rir(40.0, scene_config)
    assert rir.shape[0] == 2
    np.testing.assert_allclose(rir.sum(axis=1), 1.0)
    tdoa_samples = MicArrayGeometry().tdoa_of_angle(40.0) * SR
    assert abs((np.argmax(rir[1]) - np.argmax(rir[0])) - tdoa_samples) <= 1.0


def test_reverberant_rir_is_longer():
    dry = generate_rir(0.0, SceneConfig(s_count=1, angles=[0.0], rt60=0.0))
    wet = generate_rir(0.0, SceneConfig(s_count=1, angles=[0.0], rt60=0.3))
    assert wet.shape[1] == dry.shape[1] + int(np.ceil(0.3 * SR))
    assert np.sum(wet[0] ** 2) > np.sum(dry[0] ** 2)


def test_reverberant_tail_decays_60_db_in_rt60():
    """残響テールのエネルギー減衰曲線から求めた −60 dB 時間が rt60 ± 10%"""
    rt60 = 0.28
    rir = generate_rir(0.0, SceneConfig(s_count=1, angles=[0.0], rt60=rt60))
    tail = np.trim_zeros(rir[0, -int(np.ceil(rt60 * SR)):], 'b')
    energy = np.cumsum(tail[::-1] ** 2)[::-1]
    decay_db = 10 * np.log10(energy / energy[0])
    fit = (decay_db <= -5.0) & (decay_db >= -25.0)
    slope = np.polyfit(np.arange(len(tail))[fit] / SR, decay_db[fit], 1)[0]
    assert -60.0 / slope == pytest.approx(rt60, rel=0.10)


def test_random_angles_respect_separation():
    rng = RandomGenerator(9)
    for _ in range(20):
        angles = random_angles(4, 20.0, rng)
        assert all(abs(a) <= 60.0 for a in angles)
        assert np.diff(np.sort(angles)).min() >= 20.0


def test_random_angles_impossible_layout():
    with pytest.raises(ConfigError):
        random_angles(10, 20.0, RandomGenerator(0))


def test_scene_config_validation():
    with pytest.raises(ConfigError):
        SceneConfig(s_count=2, angles=[10.0])
    with pytest.raises(ConfigError):
        SceneConfig(s_count=2, angles=[10.0, 15.0])
    with pytest.raises(ConfigError):
        SceneConfig(s_count=1, angles=[0.0], rt60=2.5)
    with pytest.raises(ConfigError):
        SceneConfig(s_count=1, angles=[95.0])


def test_profile_validation():
    with pytest.raises(ConfigError):
        SyntheticSpeakerProfile(pitch=40.0, formants=[500.0], bandwidths=[80.0])
    with pytest.raises(ConfigError):
        SyntheticSpeakerProfile(pitch=120.0, formants=[900.0, 500.0], bandwidths=[80.0, 80.0])
    with pytest.raises(ConfigError):
        SyntheticSpeakerProfile(pitch=120.0, formants=[500.0], bandwidths=[80.0], voicing=1.5)


def test_profile_count_must_match():
    with pytest.raises(InsufficientInputError):
        simulate_scene(speaker_profiles(1, 0), SceneConfig(s_count=2, angles=[-30.0, 30.0]))


def test_save_and_load_scene(tmp_path):
    profiles, scene = _scene()
    save_scene(scene, tmp_path / 'scene', profiles)
    loaded = load_scene(tmp_path / 'scene')
    np.testing.assert_allclose(loaded.mixture.samples, scene.mixture.samples, atol=1e-7)
    assert loaded.labels == scene.labels
    assert loaded.true_angles == scene.true_angles
    assert loaded.config.to_dict() == scene.config.to_dict()


def test_load_scene_with_missing_stem(tmp_path):
    profiles, scene = _scene()
    save_scene(scene, tmp_path / 'scene', profiles)
    (tmp_path / 'scene' / 'image_0.wav').unlink()
    with pytest.raises(InsufficientInputError):
        load_scene(tmp_path / 'scene')
    with pytest.raises(InsufficientInputError):
        load_scene(tmp_path / 'nothing')
