"""単チャネル IS-NMF のテスト"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from audio import ComplexSpectrogram, StftConfig
from conftest import band_library
from errors import DomainError, InvalidDataError, InvalidLabelError, RankWarning, ShapeError
from nmf import (
    Library,
    activation_scores,
    factorize,
    identify_from_spectrogram,
    identify_speaker_by_activation,
    infer_activations,
    is_divergence,
    normalize_dictionary,
    train_library,
    update_activations,
    update_dictionary,
    wiener_reconstruct_single,
)


def _band_spectrogram(rng, n_bins, low, high, n_frames=60):
    """low〜high のビンだけにエネルギーがあるパワースペクトログラム"""
    x = np.full((n_bins, n_frames), 1e-4)
    x[low:high] += rng.uniform(0.5, 2.0, size=(high - low, 1)) * rng.uniform(0.2, 1.0, size=(1, n_frames))
    return x


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 16))
def test_is_divergence_nonnegative(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.01, 2.0, size=(6, 7))
    xhat = rng.uniform(0.01, 2.0, size=(6, 7))
    assert is_divergence(x, xhat) >= 0
    assert is_divergence(x, x) == pytest.approx(0.0, abs=1e-12)


def test_is_divergence_rejects_negative():
    with pytest.raises(DomainError):
        is_divergence(-np.ones((2, 2)), np.ones((2, 2)))


def test_factorize_is_monotone():
    """20 個の乱数行列で、発散度は反復ごとに増えない"""
    for seed in range(20):
        x = np.random.default_rng(seed).uniform(0.0, 1.0, size=(50, 100))
        dictionary, activations = factorize(x, 5, iterations=200, seed=seed)
        log = np.asarray(activations.divergence_log)
        assert len(log) == 201
        assert np.all(np.diff(log) <= 1e-9 * np.abs(log[:-1]))
        np.testing.assert_allclose(dictionary.basis.sum(axis=0), 1.0, atol=1e-12)


def test_factorize_deterministic():
    x = np.random.default_rng(3).uniform(0.1, 1.0, size=(20, 30))
    t1, v1 = factorize(x, 3, iterations=10, seed=5)
    t2, v2 = factorize(x, 3, iterations=10, seed=5)
    np.testing.assert_array_equal(t1.basis, t2.basis)
    np.testing.assert_array_equal(v1.coeffs, v2.coeffs)


def test_factorize_warns_when_rank_exceeds():
    x = np.ones((4, 5))
    with pytest.warns(RankWarning):
        factorize(x, 6, iterations=2)


def test_factorize_rejects_zero_k():
    with pytest.raises(InvalidDataError):
        factorize(np.ones((4, 5)), 0, iterations=2)


def test_single_updates_keep_shapes_and_nonnegativity(rng):
    x = rng.uniform(0.1, 1.0, size=(8, 9))
    t = rng.uniform(0.1, 1.0, size=(8, 3))
    v = rng.uniform(0.1, 1.0, size=(3, 9))
    new_t = update_dictionary(x, t, v)
    new_v = update_activations(x, t, v)
    assert new_t.basis.shape == (8, 3) and new_v.coeffs.shape == (3, 9)
    assert np.all(new_t.basis > 0) and np.all(new_v.coeffs > 0)
    np.testing.assert_allclose(new_t.basis.sum(axis=0), 1.0)


def test_update_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        update_activations(np.ones((8, 9)), np.ones((7, 3)), np.ones((3, 9)))


def test_normalize_dictionary_keeps_product(rng):
    t = rng.uniform(0.1, 2.0, size=(5, 3))
    v = rng.uniform(0.1, 2.0, size=(3, 4))
    dictionary, activations = normalize_dictionary(t, v)
    np.testing.assert_allclose(dictionary.basis @ activations.coeffs, t @ v)
    np.testing.assert_allclose(dictionary.basis.sum(axis=0), 1.0)


def test_identify_band_limited_speakers(rng):
    """周波数帯の異なる2話者を学習し、それぞれの新しい発話を識別できる"""
    n_bins = 32
    train = [_band_spectrogram(rng, n_bins, 0, 16), _band_spectrogram(rng, n_bins, 16, 32)]
    library = train_library(train, ['low', 'high'], k=2, iterations=50, seed=1)
    assert library.k_total == 4
    library.validate()

    label, activations = identify_from_spectrogram(_band_spectrogram(rng, n_bins, 16, 32), library,
                                                   iterations=50, seed=2)
    assert label == 'high'
    assert activations.coeffs.shape == (4, 60)
    label, _ = identify_from_spectrogram(_band_spectrogram(rng, n_bins, 0, 16), library,
                                         iterations=50, seed=2)
    assert label == 'low'


def test_infer_activations_rejects_bin_mismatch():
    with pytest.raises(ShapeError):
        infer_activations(np.ones((10, 5)), band_library(16), iterations=1)


def test_identification_tie_goes_to_first_dictionary():
    library = band_library(16)
    v = np.ones((library.k_total, 3))
    assert identify_speaker_by_activation(v, library) == 'low'
    np.testing.assert_allclose(activation_scores(v, library), [6.0, 6.0])


def test_activation_scores_validation():
    library = band_library(16)
    with pytest.raises(InvalidDataError):
        activation_scores(np.zeros((library.k_total, 0)), library)
    with pytest.raises(ShapeError):
        activation_scores(np.ones((3, 2)), library)


def test_library_validation():
    basis = np.full((4, 2), 0.25)
    with pytest.raises(InvalidLabelError):
        Library(basis, ['a', 'a'], [1, 1])
    with pytest.raises(ShapeError):
        Library(basis, ['a', 'b'], [1, 2])
    with pytest.raises(InvalidDataError):
        Library(np.ones((4, 2)), ['a', 'b'], [1, 1])


def test_library_index_sets_and_indicator():
    library = band_library(16, k=2, labels=('a', 'b', 'c'))
    assert [list(idx) for idx in library.index_sets] == [[0, 1], [2, 3], [4, 5]]
    c = library.indicator()
    assert c.shape == (3, 6)
    np.testing.assert_array_equal(c.sum(axis=0), 1.0)
    with pytest.raises(InvalidLabelError):
        library.index_of('z')


def test_library_subset_reorders_dictionaries():
    library = band_library(16, k=2, labels=('a', 'b'))
    swapped = library.subset(['b', 'a'])
    assert swapped.speaker_ids == ['b', 'a']
    np.testing.assert_array_equal(swapped.dictionary(0).basis, library.dictionary(1).basis)


def test_library_save_load(tmp_path):
    library = band_library(16, k=2, labels=('a', 'b'))
    path = tmp_path / 'library.json'
    library.save(path)
    loaded = Library.load(path)
    assert loaded.speaker_ids == library.speaker_ids
    assert loaded.per_speaker_k == library.per_speaker_k
    assert loaded.stft_config == library.stft_config
    np.testing.assert_array_equal(loaded.basis, library.basis)


def test_library_load_rejects_broken_json(tmp_path):
    path = tmp_path / 'library.json'
    path.write_text('{broken', encoding='utf-8')
    with pytest.raises(InvalidDataError):
        Library.load(path)


def test_single_channel_wiener_sums_to_observation(rng):
    library = band_library(16)
    v = rng.uniform(0.1, 1.0, size=(library.k_total, 10))
    xtilde = ComplexSpectrogram(rng.standard_normal((16, 10)) + 1j * rng.standard_normal((16, 10)),
                                StftConfig(), 16000)
    total = sum(wiener_reconstruct_single(xtilde, library, v, j).data for j in range(library.n_speakers))
    np.testing.assert_allclose(total, xtilde.data, rtol=1e-9)
    by_label = wiener_reconstruct_single(xtilde, library, v, 'high').data
    np.testing.assert_allclose(by_label, wiener_reconstruct_single(xtilde, library, v, 1).data)


def test_scalar_updates_by_hand():
    """F = K = N = 1, x = 4, t = v = 1 では更新後の値は 2（正規化すると t = 1）"""
    x, t, v = np.array([[4.0]]), np.array([[1.0]]), np.array([[1.0]])
    np.testing.assert_allclose(update_dictionary(x, t, v, renormalize=False).basis, [[2.0]])
    np.testing.assert_allclose(update_dictionary(x, t, v).basis, [[1.0]])
    np.testing.assert_allclose(update_activations(x, t, v).coeffs, [[2.0]])


def test_exact_reconstruction_is_a_fixed_point(rng):
    t, v = normalize_dictionary(rng.uniform(0.1, 1.0, size=(6, 2)), rng.uniform(0.1, 1.0, size=(2, 5)))
    x = t.basis @ v.coeffs
    np.testing.assert_allclose(update_dictionary(x, t.basis, v.coeffs).basis, t.basis, rtol=1e-10)
    np.testing.assert_allclose(update_activations(x, t.basis, v.coeffs).coeffs, v.coeffs, rtol=1e-10)


def test_rank_one_matrix_is_recovered(rng):
    column = rng.uniform(0.2, 1.0, size=8)
    x = np.outer(column, rng.uniform(0.2, 1.0, size=12))
    dictionary, activations = factorize(x, 1, iterations=500, seed=0)
    assert activations.divergence_log[-1] < 1e-6
    np.testing.assert_allclose(dictionary.basis[:, 0], column / column.sum(), rtol=1e-3)
