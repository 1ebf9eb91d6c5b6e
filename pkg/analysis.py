"""
評価モジュール
分離性能（SDR/SIR/SAR）と話者識別性能（正解率・話者誤り率・混同行列）の計算、
CSVの集計（平均と標準誤差）、チャンスレベルとの二項検定
"""

from dataclasses import dataclass
import itertools
import logging
from pathlib import Path
from typing import List, Optional, Sequence
import warnings

import numpy as np
import pandas as pd
from scipy import linalg, stats
from scipy.signal import fftconvolve

import config
from audio import AudioBuffer
from errors import InvalidDataError, InvalidLabelError, ShapeError, UndefinedMetricError

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ['scene_seed', 'scene', 'training_set', 's', 'sdr', 'sir', 'sar',
                  'true_label', 'assigned_label']


@dataclass
class SeparationScores:
    """推定音源ごとの SDR / SIR / SAR（dB, ±SENTINEL_DB でクリップ）"""
    sdr: np.ndarray
    sir: np.ndarray
    sar: np.ndarray

    def __len__(self) -> int:
        return len(self.sdr)

    def to_records(self) -> List[dict]:
        return [{'s': s, 'sdr': float(self.sdr[s]), 'sir': float(self.sir[s]), 'sar': float(self.sar[s])}
                for s in range(len(self))]


@dataclass
class RecognitionScores:
    accuracy: float
    speaker_error_rate: float
    confusion: np.ndarray  # 行: 正解話者, 列: 識別結果
    labels: List[str]
    n_correct: int
    n_trials: int


@dataclass
class Decomposition:
    """推定信号 = target + interference + artifact（長さ L + filter_len − 1）"""
    target: np.ndarray
    interference: np.ndarray
    artifact: np.ndarray


# ========== BSS Eval ==========

def _safe_db(num: float, den: float) -> float:
    if den <= 0:
        return config.SENTINEL_DB
    if num <= 0:
        return -config.SENTINEL_DB
    return float(np.clip(10 * np.log10(num / den), -config.SENTINEL_DB, config.SENTINEL_DB))


def _zeropad(sig: np.ndarray, n: int) -> np.ndarray:
    return np.concatenate([sig, np.zeros(n)])


def _reference_gram(references: np.ndarray, filter_len: int, n_fft: int):
    """遅延させた参照信号どうしの内積（Toeplitz ブロック）と参照信号のスペクトル"""
    n_src = references.shape[0]
    spectra = np.fft.fft(references, n=n_fft, axis=1)
    gram = np.zeros((n_src * filter_len, n_src * filter_len))
    for i, j in itertools.combinations_with_replacement(range(n_src), 2):
        corr = np.real(np.fft.ifft(spectra[j] * np.conj(spectra[i])))
        block = linalg.toeplitz(np.hstack((corr[0], corr[-1:-filter_len:-1])), r=corr[:filter_len])
        gram[j * filter_len:(j + 1) * filter_len, i * filter_len:(i + 1) * filter_len] = block
        gram[i * filter_len:(i + 1) * filter_len, j * filter_len:(j + 1) * filter_len] = block.T
    return gram, spectra


def _project(references: np.ndarray, spectra: np.ndarray, gram: np.ndarray,
             estimate_spectrum: np.ndarray, filter_len: int) -> np.ndarray:
    """推定信号を参照信号の遅延（0〜filter_len−1）の張る部分空間へ最小二乗射影"""
    n_src, n_samples = references.shape
    rhs = np.zeros(n_src * filter_len)
    for j in range(n_src):
        corr = np.real(np.fft.ifft(spectra[j] * np.conj(estimate_spectrum)))
        rhs[j * filter_len:(j + 1) * filter_len] = np.hstack((corr[0], corr[-1:-filter_len:-1]))
    try:
        coeffs = linalg.solve(gram, rhs, assume_a='sym')
    except (linalg.LinAlgError, ValueError):
        coeffs = linalg.lstsq(gram, rhs)[0]

    projection = np.zeros(n_samples + filter_len - 1)
    for j in range(n_src):
        projection += fftconvolve(coeffs[j * filter_len:(j + 1) * filter_len],
                                  references[j])[:n_samples + filter_len - 1]
    return projection


def decompose(estimate: np.ndarray, references: np.ndarray, j: int,
              filter_len: int = config.BSS_FILTER_LEN) -> Decomposition:
    """
    推定信号を target / interference / artifact に分解

    Args:
        estimate: 推定信号（長さ L）
        references: 全参照信号（S × L）
        j: 推定信号に対応する参照信号の番号
        filter_len: 許容歪みフィルタのタップ数
    """
    n_samples = references.shape[1]
    n_fft = int(2 ** np.ceil(np.log2(n_samples + filter_len - 1.0)))
    gram, spectra = _reference_gram(references, filter_len, n_fft)
    estimate_spectrum = np.fft.fft(estimate, n=n_fft)

    block = slice(j * filter_len, (j + 1) * filter_len)
    target = _project(references[j:j + 1], spectra[j:j + 1], gram[block, block],
                      estimate_spectrum, filter_len)
    full = _project(references, spectra, gram, estimate_spectrum, filter_len)
    padded = _zeropad(estimate, filter_len - 1)
    return Decomposition(target, full - target, padded - full)


def _signals(buffers: Sequence, channel: int) -> np.ndarray:
    rows = []
    for b in buffers:
        if isinstance(b, AudioBuffer):
            rows.append(b.samples[channel])
        else:
            rows.append(np.asarray(b, dtype=np.float64).reshape(-1))
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise ShapeError(f'信号長が揃っていません: {sorted(lengths)}')
    return np.vstack(rows)


def bss_eval(estimates: Sequence, references: Sequence, filter_len: int = config.BSS_FILTER_LEN,
             channel: int = 0) -> SeparationScores:
    """
    SDR / SIR / SAR を計算（推定 s と参照 s は位置番号で対応済み）

    Args:
        estimates: 推定音源（AudioBuffer または1次元配列）のリスト
        references: 参照音源（同じ長さ・同じ並び）
        filter_len: 許容歪みフィルタのタップ数
        channel: 評価に使うチャネル

    Returns:
        SeparationScores（∞ は ±SENTINEL_DB）

    Raises:
        UndefinedMetricError: エネルギー0の参照音源がある場合
    """
    est = _signals(estimates, channel)
    ref = _signals(references, channel)
    if est.shape != ref.shape:
        raise ShapeError(f'推定と参照の形状が一致しません: {est.shape} vs {ref.shape}')
    silent = np.where(~np.any(ref, axis=1))[0]
    if len(silent) > 0:
        raise UndefinedMetricError(f'エネルギー0の参照音源があります: {list(silent)}')

    sdr, sir, sar = [], [], []
    for j in range(est.shape[0]):
        d = decompose(est[j], ref, j, filter_len)
        target_energy = np.sum(d.target ** 2)
        sdr.append(_safe_db(target_energy, np.sum((d.interference + d.artifact) ** 2)))
        sir.append(_safe_db(target_energy, np.sum(d.interference ** 2)))
        sar.append(_safe_db(np.sum((d.target + d.interference) ** 2), np.sum(d.artifact ** 2)))
    return SeparationScores(np.array(sdr), np.array(sir), np.array(sar))


def mixture_baseline(mixture: AudioBuffer, references: Sequence, filter_len: int = config.BSS_FILTER_LEN,
                     channel: int = 0) -> SeparationScores:
    """未処理の混合（チャネル channel）をそのまま各音源の推定とみなしたときのスコア"""
    return bss_eval([mixture.samples[channel]] * len(references), references, filter_len, channel)


# ========== 話者識別 ==========

def score_recognition(assignments: Sequence[Sequence[str]], ground_truth: Sequence[Sequence[str]],
                      labels: Sequence[str]) -> RecognitionScores:
    """
    位置ごとの識別結果を正解と比べて集計

    Args:
        assignments: 試行ごと・位置ごとの識別ラベル
        ground_truth: 同じ形の正解ラベル
        labels: ライブラリの話者ラベル（混同行列の並び）

    Returns:
        RecognitionScores
    """
    labels = [str(label) for label in labels]
    if len(assignments) != len(ground_truth):
        raise ShapeError(f'試行数が一致しません: {len(assignments)} vs {len(ground_truth)}')
    index = {label: i for i, label in enumerate(labels)}
    confusion = np.zeros((len(labels), len(labels)), dtype=int)
    for trial, (assigned, truth) in enumerate(zip(assignments, ground_truth)):
        if len(assigned) != len(truth):
            raise ShapeError(f'試行 {trial} の位置数が一致しません: {len(assigned)} vs {len(truth)}')
        for a, t in zip(assigned, truth):
            for label in (a, t):
                if str(label) not in index:
                    raise InvalidLabelError(f'ライブラリにない話者です: {label}（{labels}）')
            confusion[index[str(t)], index[str(a)]] += 1

    n_trials = int(confusion.sum())
    if n_trials == 0:
        raise UndefinedMetricError('識別結果が1つもありません')
    n_correct = int(np.trace(confusion))
    accuracy = n_correct / n_trials
    return RecognitionScores(accuracy, 1.0 - accuracy, confusion, labels, n_correct, n_trials)


def chance_pvalue(n_correct: int, n_trials: int, chance: float) -> float:
    """チャンスレベルより高いかどうかの片側二項検定の p 値"""
    if n_trials == 0:
        return float('nan')
    return float(stats.binomtest(n_correct, n_trials, chance, alternative='greater').pvalue)


# ========== 集計 ==========

def load_metrics(results_dir, pattern: str = '*metrics*.csv') -> pd.DataFrame:
    """
    結果フォルダ内のメトリクスCSVを読み込み、1つのDataFrameに統合

    Returns:
        DataFrame（METRIC_COLUMNS）
    """
    results_path = Path(results_dir)
    csv_files = sorted(results_path.glob(pattern))
    if not csv_files:
        raise InvalidDataError(f'{results_dir}/ にメトリクスCSVが見つかりません')

    print('\n=== データ読み込み ===')
    print(f'読み込むファイル数: {len(csv_files)}')
    dfs = []
    for csv_file in csv_files:
        df = pd.read_csv(csv_file)
        dfs.append(df)
        print(f'  - {csv_file.name}: {len(df)}行')
    return pd.concat(dfs, ignore_index=True)


def summarize(df: pd.DataFrame, by: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """
    正解率と SDR/SIR/SAR の平均・標準誤差

    学習セットごとに平均を取ってから全体の平均と標準誤差を計算する。

    Args:
        df: METRIC_COLUMNS を含むDataFrame
        by: さらに分ける列（例: ['value']）
    """
    by = list(by or [])
    df = df.copy()
    df['correct'] = (df['true_label'].astype(str) == df['assigned_label'].astype(str)).astype(float)
    per_set = df.groupby(by + ['training_set'])[['correct', 'sdr', 'sir', 'sar']].mean().reset_index()
    per_set = per_set.rename(columns={'correct': 'accuracy'})
    metrics = ['accuracy', 'sdr', 'sir', 'sar']
    if not by:
        return pd.DataFrame([{f'{m}_{s}': getattr(per_set[m], s)() for m in metrics for s in ('mean', 'sem')}])
    summary = per_set.groupby(by)[metrics].agg(['mean', 'sem'])
    summary.columns = [f'{m}_{s}' for m, s in summary.columns]
    return summary.reset_index()


def print_summary(df: pd.DataFrame, chance: float, excluded: int = 0):
    """evaluate の結果を表示"""
    n_correct = int((df['true_label'].astype(str) == df['assigned_label'].astype(str)).sum())
    n_trials = len(df)
    accuracy = n_correct / n_trials if n_trials else float('nan')
    pvalue = chance_pvalue(n_correct, n_trials, chance)

    print('\n=== 話者識別 ===')
    print(f'正解率: {accuracy * 100:.1f}% ({n_correct}/{n_trials})')
    print(f'話者誤り率 (SER): {(1 - accuracy) * 100:.1f}%')
    print(f'チャンスレベル {chance * 100:.1f}% に対する二項検定: p = {pvalue:.2e}')
    if excluded:
        print(f'音源数推定の失敗で除外したシーン: {excluded}')

    print('\n=== 分離性能 (dB) ===')
    for metric in ['sdr', 'sir', 'sar']:
        values = df[metric].to_numpy(dtype=float)
        print(f'{metric.upper()}: {np.mean(values):.2f} ± {stats.sem(values) if len(values) > 1 else 0.0:.2f}')
    return {'accuracy': accuracy, 'ser': 1 - accuracy, 'pvalue': pvalue,
            'sdr': float(df['sdr'].mean()), 'sir': float(df['sir'].mean()), 'sar': float(df['sar'].mean())}


def warn_partial(expected: int, found: int):
    if found < expected:
        warnings.warn(f'結果が一部しかありません（{found}/{expected} シーン）。揃っている分だけ評価します')
