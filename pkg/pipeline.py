"""
実験プロトコルの実行
学習セットごとに コーパス合成 → ライブラリ学習 → テスト（分離と話者識別の同時推定）→ 評価 を行う。
学習×テストの方式比較（単独・逐次・同時）と分離状況ごとの SDR 比較もここで行う。
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
import logging
from typing import Callable, List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment
from tqdm import tqdm

from analysis import METRIC_COLUMNS, bss_eval, mixture_baseline
from audio import AudioBuffer, StftConfig, istft, istft_multichannel, power_spectrogram, stft, stft_multichannel
from config import ExperimentConfig
from doa import (
    DoaEstimate,
    MicArrayGeometry,
    angles_of_spatial_covariance,
    count_and_localize,
    init_spatial_covariance,
)
from errors import ConfigError, SeparationError
from multichannel_nmf import (
    SpatialCovarianceSet,
    TrainResult,
    separate_blind,
    separate_with_library,
    test_joint,
    train_blind,
)
from nmf import Library, identify_from_spectrogram, train_library
from scene import (
    SceneConfig,
    SceneOutput,
    SyntheticSpeakerProfile,
    random_angles,
    simulate_scene,
    speaker_profiles,
)
from utils import RandomGenerator, derive_seed

logger = logging.getLogger(__name__)

SCENARIO_METHODS = ['single', 'seq', 'joint']
SITUATIONS = ['long_blind', 'short_blind', 'short_library', 'mixture']


@dataclass
class TrainingSet:
    index: int
    profiles: List[SyntheticSpeakerProfile]

    @property
    def labels(self) -> List[str]:
        return [p.label for p in self.profiles]


@dataclass
class SceneResult:
    """テスト混合1つの結果"""
    scene_id: str
    training_set: int
    scene_seed: int
    doa: DoaEstimate
    excluded: bool = False
    assignments: List[str] = field(default_factory=list)
    truth: List[str] = field(default_factory=list)
    true_indices: List[int] = field(default_factory=list)
    separated: List[AudioBuffer] = field(default_factory=list)
    divergence_log: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            'scene': self.scene_id,
            'training_set': self.training_set,
            'scene_seed': self.scene_seed,
            'excluded': self.excluded,
            'doa': self.doa.to_dict(),
            'assignments': list(self.assignments),
            'truth': list(self.truth),
            'true_indices': [int(i) for i in self.true_indices],
            'divergence': {'first': self.divergence_log[0], 'last': self.divergence_log[-1]}
            if self.divergence_log else None,
        }


@dataclass
class ExperimentResult:
    metrics: pd.DataFrame
    excluded: int
    total: int


# ========== 設定から各モジュールの設定を作る ==========

def stft_config_of(cfg: ExperimentConfig) -> StftConfig:
    return StftConfig(window_length_ms=cfg.stft.window_ms, hop_length_ms=cfg.stft.hop_ms)


def geometry_of(cfg: ExperimentConfig) -> MicArrayGeometry:
    return MicArrayGeometry(cfg.scene.mic_spacing, cfg.scene.speed_of_sound, cfg.scene.sample_rate)


def make_training_set(cfg: ExperimentConfig, index: int) -> TrainingSet:
    profiles = speaker_profiles(cfg.corpus.speaker_count, derive_seed(cfg.seed, 'profile', index))
    return TrainingSet(index, profiles)


def make_scene_config(cfg: ExperimentConfig, s_count: int, seed: int, utterances: int) -> SceneConfig:
    angles = random_angles(s_count, cfg.scene.min_separation, RandomGenerator(seed))
    return SceneConfig(
        s_count=s_count,
        angles=angles,
        geometry=geometry_of(cfg),
        min_separation=cfg.scene.min_separation,
        rt60=cfg.scene.rt60,
        drr_db=cfg.scene.drr_db,
        utterance_length=cfg.corpus.utterance_length,
        utterances=utterances,
        seed=seed,
    )


def training_scene(cfg: ExperimentConfig, training_set: TrainingSet) -> SceneOutput:
    """学習用の同時発話（各話者 U_tr 発話）"""
    seed = derive_seed(cfg.seed, 'train', training_set.index)
    scene_config = make_scene_config(cfg, len(training_set.profiles), seed, cfg.corpus.utterances_train)
    return simulate_scene(training_set.profiles, scene_config)


def test_scene(cfg: ExperimentConfig, training_set: TrainingSet, m: int) -> SceneOutput:
    """テスト混合 m（同じ話者が新しい位置で発話）"""
    seed = derive_seed(cfg.seed, 'test', training_set.index * 10000 + m)
    scene_config = make_scene_config(cfg, len(training_set.profiles), seed, cfg.corpus.utterances_test)
    return simulate_scene(training_set.profiles, scene_config)


# ========== 位置と話者の対応付け ==========

def match_angles(estimated: Sequence[float], true: Sequence[float]) -> List[int]:
    """
    推定位置ごとに最も近い正解位置を1対1で割り当てる

    Returns:
        推定位置 s に対応する正解音源の番号
    """
    cost = np.abs(np.subtract.outer(np.asarray(estimated, dtype=float), np.asarray(true, dtype=float)))
    rows, cols = linear_sum_assignment(cost)
    mapping = [-1] * len(estimated)
    for r, c in zip(rows, cols):
        mapping[r] = int(c)
    return mapping


def localize(cfg: ExperimentConfig, mixture: AudioBuffer) -> DoaEstimate:
    return count_and_localize(mixture, geometry_of(cfg), cfg.doa.alpha, cfg.doa.min_peak_distance,
                              cfg.doa.frame_ms)


def spatial_init(cfg: ExperimentConfig, doa: DoaEstimate, s_count: int) -> SpatialCovarianceSet:
    return init_spatial_covariance(doa, geometry_of(cfg), stft_config_of(cfg), s_count)


def source_mapping(cfg: ExperimentConfig, spatial: SpatialCovarianceSet, true_angles: Sequence[float]) -> List[int]:
    """学習後の空間共分散から読み取った到来角で、モデルの音源を正解音源に対応付ける"""
    angles = angles_of_spatial_covariance(spatial, geometry_of(cfg), stft_config_of(cfg))
    return match_angles(angles, true_angles)


def relabel_library(library: Library, mapping: Sequence[int], labels: Sequence[str]) -> Library:
    """音源順のライブラリに話者ラベルを付け、labels の順に並べ直す"""
    named = Library(library.basis, [labels[i] for i in mapping], library.per_speaker_k,
                    library.stft_config, library.sample_rate)
    return named.subset(labels)


# ========== 学習 ==========

def train_joint(cfg: ExperimentConfig, scene: SceneOutput, seed: int) -> Tuple[Library, TrainResult]:
    """
    学習用混合から DOA で空間共分散を初期化し、ブラインド学習でライブラリを作る

    Returns:
        (話者ラベル付きライブラリ, TrainResult)
    """
    s_count = len(scene.labels)
    x = stft_multichannel(scene.mixture, stft_config_of(cfg))
    doa = localize(cfg, scene.mixture)
    result = train_blind(x, s_count, cfg.model.k_per_speaker, cfg.model.iterations_train,
                         spatial_init(cfg, doa, s_count), seed, assignment=cfg.model.assignment)
    mapping = source_mapping(cfg, result.spatial, scene.true_angles)
    return relabel_library(result.library, mapping, scene.labels), result


def train_single(cfg: ExperimentConfig, scene: SceneOutput, seed: int) -> Library:
    """各話者のドライ音源から個別に辞書を学習"""
    stft_config = stft_config_of(cfg)
    spectrograms = [power_spectrogram(stft(dry, stft_config)) for dry in scene.dry_sources]
    return train_library(spectrograms, scene.labels, cfg.model.k_per_speaker, cfg.model.iterations_train,
                         seed, stft_config, scene.mixture.sample_rate)


def _separated_streams(cfg: ExperimentConfig, scene: SceneOutput, iterations: int, seed: int):
    """ブラインド分離した各音源（チャネル1）と、正解音源への対応"""
    s_count = len(scene.labels)
    x = stft_multichannel(scene.mixture, stft_config_of(cfg))
    doa = localize(cfg, scene.mixture)
    result = separate_blind(x, s_count, cfg.model.k_per_speaker, iterations,
                            spatial_init(cfg, doa, s_count), seed)
    streams = [istft(spec.channel(0)) for spec in result.separated]
    return streams, source_mapping(cfg, result.model.spatial, scene.true_angles)


def train_sequential(cfg: ExperimentConfig, scene: SceneOutput, seed: int) -> Library:
    """学習用混合をブラインド分離してから、各音源を単チャネル NMF で学習"""
    streams, mapping = _separated_streams(cfg, scene, cfg.model.iterations_train, seed)
    stft_config = stft_config_of(cfg)
    by_speaker = {scene.labels[mapping[s]]: streams[s] for s in range(len(streams))}
    spectrograms = [power_spectrogram(stft(by_speaker[label], stft_config)) for label in scene.labels]
    return train_library(spectrograms, scene.labels, cfg.model.k_per_speaker, cfg.model.iterations_train,
                         seed, stft_config, scene.mixture.sample_rate)


# ========== テスト ==========

def run_joint_test(cfg: ExperimentConfig, library: Library, scene: SceneOutput, scene_id: str,
                   training_set: int, seed: int) -> SceneResult:
    """
    テスト混合1つに対して 音源数推定 → H の初期化 → 同時推定 を行う

    音源数の推定を誤ったシーンは除外（excluded=True）として返す。
    """
    s_count = len(scene.labels)
    stft_config = stft_config_of(cfg)
    if library.stft_config.n_bins(library.sample_rate) != stft_config.n_bins(scene.mixture.sample_rate):
        raise ConfigError('ライブラリとシーンの STFT 設定が一致しません')
    doa = localize(cfg, scene.mixture)
    result = SceneResult(scene_id, training_set, scene.config.seed, doa)
    if doa.count != s_count:
        logger.info('%s: 音源数の推定を誤ったため除外します（推定 %d, 正解 %d）', scene_id, doa.count, s_count)
        result.excluded = True
        return result

    x = stft_multichannel(scene.mixture, stft_config)
    joint = test_joint(x, library, s_count, cfg.model.iterations_test, spatial_init(cfg, doa, s_count), seed)
    result.true_indices = match_angles(doa.angles[:s_count], scene.true_angles)
    result.truth = [scene.labels[i] for i in result.true_indices]
    result.assignments = joint.assignments
    result.separated = [istft_multichannel(spec) for spec in joint.separated]
    result.divergence_log = joint.divergence_log
    return result


def score_scene(cfg: ExperimentConfig, scene: SceneOutput, result: SceneResult) -> List[dict]:
    """分離性能（チャネル1, 位置で対応付け）と識別結果を1行ずつにまとめる"""
    if result.excluded:
        return []
    references = [scene.source_images[i] for i in result.true_indices]
    scores = bss_eval(result.separated, references, cfg.eval.bss_filter_len)
    rows = []
    for record in scores.to_records():
        s = record['s']
        rows.append({'scene_seed': result.scene_seed, 'scene': result.scene_id,
                     'training_set': result.training_set, **record,
                     'true_label': result.truth[s], 'assigned_label': result.assignments[s]})
    return rows


# ========== 実行 ==========

def parallel_map(func: Callable, items: Sequence, jobs: int = 1, desc: str = '') -> list:
    """jobs > 1 ならプロセス並列で map（結果の順序は items の順）"""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in tqdm(items, desc=desc, leave=False)]
    with ProcessPoolExecutor(max_workers=jobs) as executor:
        return list(tqdm(executor.map(func, items), total=len(items), desc=desc, leave=False))


def run_training_set(cfg: ExperimentConfig, index: int):
    """
    学習セット1つ分の 学習 → テスト → 評価

    Returns:
        (メトリクスの行のリスト, 除外シーン数, シーン数)
    """
    training_set = make_training_set(cfg, index)
    library, _ = train_joint(cfg, training_scene(cfg, training_set), derive_seed(cfg.seed, 'train', index))
    rows, excluded = [], 0
    for m in range(cfg.eval.n_test_mixtures):
        scene = test_scene(cfg, training_set, m)
        scene_id = f'set{index:02d}_test{m:03d}'
        result = run_joint_test(cfg, library, scene, scene_id, index,
                                derive_seed(cfg.seed, 'test', index * 10000 + m))
        excluded += int(result.excluded)
        rows.extend(score_scene(cfg, scene, result))
    return rows, excluded, cfg.eval.n_test_mixtures


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """全学習セットを実行してメトリクスをまとめる"""
    outputs = parallel_map(partial(run_training_set, cfg), range(cfg.eval.n_training_sets), jobs,
                           desc='学習セット')
    rows = [row for out in outputs for row in out[0]]
    metrics = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    return ExperimentResult(metrics, sum(o[1] for o in outputs), sum(o[2] for o in outputs))


def _sweep_value(cfg: ExperimentConfig, parameter: str, value, jobs: int) -> dict:
    section, key = {'k': ('model', 'k_per_speaker'), 'utr': ('corpus', 'utterances_train')}[parameter]
    row = {'parameter': parameter, 'value': value}
    try:
        result = run_experiment(cfg.with_overrides({section: {key: value}}), jobs)
        correct = (result.metrics['true_label'] == result.metrics['assigned_label']).astype(float)
        per_set = correct.groupby(result.metrics['training_set']).mean()
        row.update({
            'accuracy_mean': float(per_set.mean()) if len(per_set) else float('nan'),
            'accuracy_sem': float(per_set.sem()) if len(per_set) > 1 else 0.0,
            'sdr_mean': float(result.metrics['sdr'].mean()) if len(result.metrics) else float('nan'),
            'excluded': result.excluded,
            'total': result.total,
            'error': '',
        })
    except SeparationError as e:
        logger.warning('%s=%s の実行に失敗しました: %s', parameter, value, e)
        row.update({'accuracy_mean': float('nan'), 'accuracy_sem': float('nan'), 'sdr_mean': float('nan'),
                    'excluded': 0, 'total': 0, 'error': str(e)})
    return row


def run_sweep(cfg: ExperimentConfig, parameter: str, values: Sequence, jobs: int = 1) -> pd.DataFrame:
    """
    辞書サイズ K または学習発話数 U_tr を変えて実験全体を繰り返す

    Args:
        cfg: 基本設定
        parameter: 'k' または 'utr'
        values: 値のリスト
        jobs: 並列数

    Returns:
        値ごとの正解率（平均・標準誤差）の表。失敗した値は error 列に記録して続行する
    """
    if parameter not in ('k', 'utr'):
        raise ConfigError(f"parameter は 'k' か 'utr' です: {parameter}")
    if len(values) == 0:
        raise ConfigError('values が空です')
    return pd.DataFrame([_sweep_value(cfg, parameter, v, jobs) for v in tqdm(values, desc=parameter)])


# ========== 学習×テスト方式の比較 ==========

def _identify_streams(cfg: ExperimentConfig, library: Library, streams: Sequence[AudioBuffer],
                      seed: int) -> List[str]:
    stft_config = stft_config_of(cfg)
    return [identify_from_spectrogram(power_spectrogram(stft(stream, stft_config)), library,
                                      cfg.model.iterations_test, seed)[0]
            for stream in streams]


def run_scenario_set(cfg: ExperimentConfig, index: int) -> List[dict]:
    """
    学習セット1つについて 学習方式×テスト方式 の識別結果を集める

    学習: single（ドライ音源ごと）, seq（ブラインド分離→単チャネル NMF）, joint（ブラインド学習）
    テスト: single（ドライ音源ごと）, seq（ブラインド分離→単チャネル識別）, joint（同時推定）
    """
    training_set = make_training_set(cfg, index)
    scene = training_scene(cfg, training_set)
    seed = derive_seed(cfg.seed, 'train', index)
    libraries = {
        'single': train_single(cfg, scene, seed),
        'seq': train_sequential(cfg, scene, seed),
        'joint': train_joint(cfg, scene, seed)[0],
    }

    rows = []
    for m in range(cfg.eval.n_test_mixtures):
        test = test_scene(cfg, training_set, m)
        scene_id = f'set{index:02d}_test{m:03d}'
        test_seed = derive_seed(cfg.seed, 'test', index * 10000 + m)
        doa = localize(cfg, test.mixture)
        if doa.count != len(test.labels):
            rows.append({'training_set': index, 'scene': scene_id, 'excluded': True})
            continue
        streams, stream_mapping = _separated_streams(cfg, test, cfg.model.iterations_test,
                                                     derive_seed(cfg.seed, 'blind', index * 10000 + m))
        for train_method, library in libraries.items():
            outcomes = {
                'single': (_identify_streams(cfg, library, test.dry_sources, test_seed), list(test.labels)),
                'seq': (_identify_streams(cfg, library, streams, test_seed),
                        [test.labels[i] for i in stream_mapping]),
            }
            joint = run_joint_test(cfg, library, test, scene_id, index, test_seed)
            outcomes['joint'] = (joint.assignments, joint.truth)
            for test_method, (assigned, truth) in outcomes.items():
                for s, (a, t) in enumerate(zip(assigned, truth)):
                    rows.append({'training_set': index, 'scene': scene_id, 'excluded': False,
                                 'train': train_method, 'test': test_method, 's': s,
                                 'true_label': t, 'assigned_label': a})
    return rows


def scenario_accuracy_by_set(rows: pd.DataFrame) -> pd.DataFrame:
    """学習方式×テスト方式×学習セットごとの正解率（%）"""
    scored = rows[~rows['excluded'].astype(bool)].copy()
    scored['correct'] = (scored['true_label'] == scored['assigned_label']).astype(float)
    per_set = scored.groupby(['train', 'test', 'training_set'])['correct'].mean() * 100
    return per_set.rename('accuracy').reset_index()


def scenario_table(rows: pd.DataFrame) -> pd.DataFrame:
    """学習方式×テスト方式の正解率（学習セット平均, %）"""
    per_set = scenario_accuracy_by_set(rows)
    table = per_set.groupby(['train', 'test'])['accuracy'].mean().unstack('test')
    return table.reindex(index=SCENARIO_METHODS, columns=SCENARIO_METHODS)


def run_scenarios(cfg: ExperimentConfig, jobs: int = 1) -> pd.DataFrame:
    outputs = parallel_map(partial(run_scenario_set, cfg), range(cfg.eval.n_training_sets), jobs,
                           desc='学習セット')
    return pd.DataFrame([row for out in outputs for row in out])


# ========== 分離状況ごとの比較 ==========

def _blind_scores(cfg: ExperimentConfig, scene: SceneOutput, iterations: int, seed: int):
    streams, mapping = _separated_streams(cfg, scene, iterations, seed)
    references = [scene.source_images[i] for i in mapping]
    return bss_eval(streams, references, cfg.eval.bss_filter_len)


def run_separation_set(cfg: ExperimentConfig, index: int) -> List[dict]:
    """
    学習セット1つについて分離状況ごとの SDR/SIR/SAR を集める

    long_blind: 学習用の長い混合をブラインド分離
    short_blind: 1発話のテスト混合をブラインド分離
    short_library: 1発話のテスト混合を学習済みライブラリで分離
    mixture: 未処理の混合（基準値）
    """
    training_set = make_training_set(cfg, index)
    scene = training_scene(cfg, training_set)
    seed = derive_seed(cfg.seed, 'train', index)

    rows = []

    def add(situation: str, scene_id: str, scores):
        for record in scores.to_records():
            rows.append({'training_set': index, 'scene': scene_id, 'situation': situation, **record})

    add('long_blind', f'set{index:02d}_train', _blind_scores(cfg, scene, cfg.model.iterations_train, seed))
    library, _ = train_joint(cfg, scene, seed)

    for m in range(cfg.eval.n_test_mixtures):
        test = test_scene(cfg, training_set, m)
        scene_id = f'set{index:02d}_test{m:03d}'
        test_seed = derive_seed(cfg.seed, 'test', index * 10000 + m)
        add('short_blind', scene_id, _blind_scores(cfg, test, cfg.model.iterations_test,
                                                   derive_seed(cfg.seed, 'blind', index * 10000 + m)))
        doa = localize(cfg, test.mixture)
        if doa.count == len(test.labels):
            s_count = len(test.labels)
            x = stft_multichannel(test.mixture, stft_config_of(cfg))
            separated = separate_with_library(x, library, s_count, cfg.model.iterations_test,
                                              spatial_init(cfg, doa, s_count), test_seed)
            mapping = match_angles(doa.angles[:s_count], test.true_angles)
            add('short_library', scene_id,
                bss_eval([istft(spec.channel(0)) for spec in separated],
                         [test.source_images[i] for i in mapping], cfg.eval.bss_filter_len))
        add('mixture', scene_id, mixture_baseline(test.mixture, test.source_images, cfg.eval.bss_filter_len))
    return rows


def run_separation(cfg: ExperimentConfig, jobs: int = 1) -> pd.DataFrame:
    outputs = parallel_map(partial(run_separation_set, cfg), range(cfg.eval.n_training_sets), jobs,
                           desc='学習セット')
    return pd.DataFrame([row for out in outputs for row in out])


def separation_table(rows: pd.DataFrame) -> pd.DataFrame:
    """分離状況ごとの SDR/SIR/SAR の平均と標準誤差"""
    summary = rows.groupby('situation')[['sdr', 'sir', 'sar']].agg(['mean', 'sem'])
    summary.columns = [f'{m}_{s}' for m, s in summary.columns]
    return summary.reindex([s for s in SITUATIONS if s in summary.index]).reset_index()
