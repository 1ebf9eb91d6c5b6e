"""
合成コーパスでの受け入れ試験（時間がかかる）

実行: pytest -m slow test_acceptance.py
"""

import os

import numpy as np
import pytest

from analysis import chance_pvalue
from config import preset_config
from pipeline import (
    localize,
    make_training_set,
    run_experiment,
    run_scenarios,
    run_separation,
    run_sweep,
    scenario_accuracy_by_set,
    scenario_table,
    separation_table,
    test_scene as make_test_scene,
)

pytestmark = pytest.mark.slow

JOBS = max(1, min(4, os.cpu_count() or 1))


@pytest.fixture(scope='module')
def desk_config():
    return preset_config('desk', seed=42)


def test_joint_recognition_desk_scale(desk_config):
    """3 学習セット × 10 テスト混合で正解率 80% 以上、チャンスレベルより有意に高い"""
    result = run_experiment(desk_config, JOBS)
    metrics = result.metrics
    correct = int((metrics['true_label'] == metrics['assigned_label']).sum())
    accuracy = correct / len(metrics)
    chance = 1.0 / desk_config.corpus.speaker_count
    assert accuracy >= 0.80
    assert chance_pvalue(correct, len(metrics), chance) < 0.01


def test_joint_test_beats_sequential(desk_config):
    """同時推定は各学習セットで逐次方式 −2 ポイント以上、3セット平均では逐次方式より高い"""
    rows = run_scenarios(desk_config, JOBS)
    per_set = scenario_accuracy_by_set(rows)
    joint_trained = per_set[per_set['train'] == 'joint'].pivot(index='training_set', columns='test',
                                                               values='accuracy')
    assert len(joint_trained) == desk_config.eval.n_training_sets
    assert (joint_trained['joint'] >= joint_trained['seq'] - 2.0).all()
    table = scenario_table(rows)
    assert table.loc['joint', 'joint'] > table.loc['joint', 'seq']


def test_separation_situations(desk_config):
    table = separation_table(run_separation(desk_config, JOBS)).set_index('situation')
    sdr = table['sdr_mean']
    assert sdr['short_blind'] - sdr['mixture'] >= 3.0
    assert sdr['long_blind'] >= sdr['short_blind']
    assert sdr['short_library'] <= sdr['short_blind']


def _counting_rate(cfg, n_scenes):
    training_set = make_training_set(cfg, 0)
    hits = 0
    for m in range(n_scenes):
        scene = make_test_scene(cfg, training_set, m)
        hits += int(localize(cfg, scene.mixture).count == len(scene.labels))
    return hits / n_scenes


def test_source_counting_rate(desk_config):
    """1.5 秒の3話者混合で 70% 以上、6 秒で 90% 以上"""
    assert _counting_rate(desk_config, 100) >= 0.70
    long_config = desk_config.with_overrides({'corpus': {'utterances_test': 4}})
    assert _counting_rate(long_config, 100) >= 0.90


def test_dictionary_size_plateau(desk_config):
    table = run_sweep(desk_config, 'k', [8, 15, 30], JOBS)
    assert (table['error'] == '').all()
    accuracy = table['accuracy_mean'].to_numpy(dtype=float)
    assert np.max(accuracy) - np.min(accuracy) <= 0.12


def test_training_utterances_trend(desk_config):
    """学習発話数 U_tr を 1, 5, 20 と増やしても正解率は下がらない"""
    table = run_sweep(desk_config, 'utr', [1, 5, 20], JOBS)
    assert (table['error'] == '').all()
    accuracy = table['accuracy_mean'].to_numpy(dtype=float)
    # 学習セット3つ分の標本誤差として 3 ポイントまでの逆転は許す
    assert np.all(np.diff(accuracy) >= -0.03)
    assert accuracy[-1] >= accuracy[0]
