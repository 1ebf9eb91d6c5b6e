"""評価モジュールのテスト"""

import numpy as np
import pandas as pd
import pytest

from analysis import (
    METRIC_COLUMNS,
    bss_eval,
    chance_pvalue,
    decompose,
    load_metrics,
    mixture_baseline,
    print_summary,
    score_recognition,
    summarize,
    warn_partial,
)
from audio import AudioBuffer
from errors import InvalidDataError, InvalidLabelError, ShapeError, UndefinedMetricError

FILTER_LEN = 64


def _disjoint_references(rng, length=2000):
    """時間的に重ならない2つの雑音（間隔は FILTER_LEN より十分長い）"""
    refs = np.zeros((2, length))
    refs[0, :600] = rng.standard_normal(600)
    refs[1, 1000:1600] = rng.standard_normal(600)
    return refs


def test_perfect_estimate(rng):
    refs = rng.standard_normal((2, 3000))
    scores = bss_eval(list(refs), list(refs), filter_len=FILTER_LEN)
    assert len(scores) == 2
    assert np.all(scores.sdr > 100)
    assert np.all(scores.sir > 100)


def test_pure_interference(rng):
    refs = _disjoint_references(rng)
    scores = bss_eval([refs[1], refs[0]], list(refs), filter_len=FILTER_LEN)
    assert np.all(scores.sir < -100)
    assert np.all(scores.sdr < -100)


def test_decomposition_sums_to_estimate(rng):
    refs = rng.standard_normal((2, 1500))
    estimate = 0.7 * refs[0] + 0.2 * refs[1] + 0.1 * rng.standard_normal(1500)
    d = decompose(estimate, refs, 0, FILTER_LEN)
    padded = np.concatenate([estimate, np.zeros(FILTER_LEN - 1)])
    np.testing.assert_allclose(d.target + d.interference + d.artifact, padded, atol=1e-10)


def test_additive_noise_with_single_reference(rng):
    """参照1つでは干渉は0（SIR は上限値）、SDR は加えた雑音の大きさで決まる"""
    ref = rng.standard_normal(4000)
    estimate = ref + 0.1 * rng.standard_normal(4000)
    scores = bss_eval([estimate], [ref], filter_len=FILTER_LEN)
    assert scores.sir[0] == 200.0
    assert 18.0 < scores.sdr[0] < 23.0
    assert scores.sar[0] == pytest.approx(scores.sdr[0], abs=1e-6)


def test_audio_buffers_use_selected_channel(rng):
    refs = [AudioBuffer(rng.standard_normal((2, 1000)), 16000) for _ in range(2)]
    scores = bss_eval(refs, refs, filter_len=FILTER_LEN, channel=1)
    assert np.all(scores.sdr > 100)
    baseline = mixture_baseline(AudioBuffer(refs[0].samples + refs[1].samples, 16000), refs,
                                filter_len=FILTER_LEN)
    assert len(baseline) == 2
    assert np.all(np.abs(baseline.sir) < 6.0)


def test_silent_reference_is_undefined(rng):
    refs = np.zeros((2, 500))
    refs[0] = rng.standard_normal(500)
    with pytest.raises(UndefinedMetricError):
        bss_eval(list(refs), list(refs), filter_len=FILTER_LEN)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        bss_eval([np.ones(10)], [np.ones(10), np.ones(10)], filter_len=4)
    with pytest.raises(ShapeError):
        bss_eval([np.ones(10)], [np.ones(11)], filter_len=4)


def test_score_recognition():
    scores = score_recognition([['a', 'b'], ['b', 'b']], [['a', 'b'], ['a', 'b']], ['a', 'b'])
    assert scores.accuracy == pytest.approx(0.75)
    assert scores.speaker_error_rate == pytest.approx(0.25)
    np.testing.assert_array_equal(scores.confusion, [[1, 1], [0, 2]])
    assert (scores.n_correct, scores.n_trials) == (3, 4)


def test_score_recognition_errors():
    with pytest.raises(InvalidLabelError):
        score_recognition([['z']], [['a']], ['a', 'b'])
    with pytest.raises(ShapeError):
        score_recognition([['a']], [['a'], ['b']], ['a', 'b'])
    with pytest.raises(UndefinedMetricError):
        score_recognition([[]], [[]], ['a'])


def test_chance_pvalue():
    assert chance_pvalue(10, 10, 0.5) == pytest.approx(0.5 ** 10)
    assert chance_pvalue(0, 10, 0.5) == pytest.approx(1.0)
    assert np.isnan(chance_pvalue(0, 0, 0.5))


def _metrics_frame():
    rows = [
        (1, 'set_00/test_000', 0, 0, 10.0, 12.0, 14.0, 'a', 'a'),
        (1, 'set_00/test_000', 0, 1, 6.0, 8.0, 10.0, 'b', 'a'),
        (2, 'set_01/test_000', 1, 0, 8.0, 9.0, 11.0, 'a', 'a'),
        (2, 'set_01/test_000', 1, 1, 4.0, 5.0, 7.0, 'b', 'b'),
    ]
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def test_summarize_averages_training_sets_first():
    summary = summarize(_metrics_frame())
    assert summary.loc[0, 'accuracy_mean'] == pytest.approx(0.75)
    assert summary.loc[0, 'accuracy_sem'] == pytest.approx(0.25)
    assert summary.loc[0, 'sdr_mean'] == pytest.approx(7.0)
    assert summary.loc[0, 'sdr_sem'] == pytest.approx(1.0)


def test_summarize_by_column():
    df = pd.concat([_metrics_frame().assign(value=8), _metrics_frame().assign(value=30)], ignore_index=True)
    summary = summarize(df, by=['value'])
    assert list(summary['value']) == [8, 30]
    np.testing.assert_allclose(summary['accuracy_mean'], [0.75, 0.75])


def test_print_summary(capsys):
    result = print_summary(_metrics_frame(), chance=0.5, excluded=2)
    out = capsys.readouterr().out
    assert '正解率: 75.0% (3/4)' in out
    assert '除外したシーン: 2' in out
    assert result['accuracy'] == pytest.approx(0.75)
    assert result['sdr'] == pytest.approx(7.0)


def test_load_metrics(tmp_path):
    _metrics_frame().to_csv(tmp_path / 'a_metrics.csv', index=False)
    _metrics_frame().to_csv(tmp_path / 'b_metrics.csv', index=False)
    df = load_metrics(tmp_path)
    assert len(df) == 8
    with pytest.raises(InvalidDataError):
        load_metrics(tmp_path / 'missing')


def test_warn_partial():
    with pytest.warns(UserWarning):
        warn_partial(10, 7)
