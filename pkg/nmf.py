"""
単チャネル Itakura-Saito NMF
辞書学習、ライブラリ固定での活性化推定、活性化和による話者識別、単チャネルWienerフィルタ
"""

from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
from typing import List, Sequence, Union
import warnings

import numpy as np

import config
from audio import ComplexSpectrogram, PowerSpectrogram, StftConfig
from errors import (
    AudioFormatError,
    DomainError,
    InvalidDataError,
    InvalidLabelError,
    RankWarning,
    ShapeError,
)
from utils import RandomGenerator, atomic_write_text, floor

logger = logging.getLogger(__name__)

LIBRARY_FORMAT_VERSION = 1


@dataclass
class Dictionary:
    """F × K の非負基底行列（各列の和は1）"""
    basis: np.ndarray

    def __post_init__(self):
        self.basis = np.asarray(self.basis, dtype=np.float64)
        if self.basis.ndim != 2:
            raise ShapeError(f'辞書は2次元行列です: shape={self.basis.shape}')
        if np.any(self.basis < 0):
            raise DomainError('辞書に負の値が含まれています')

    @property
    def k(self) -> int:
        return self.basis.shape[1]


@dataclass
class Activations:
    """K × N の非負活性化行列。反復の発散度履歴も保持する"""
    coeffs: np.ndarray
    divergence_log: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 2:
            raise ShapeError(f'活性化は2次元行列です: shape={self.coeffs.shape}')
        if np.any(self.coeffs < 0):
            raise DomainError('活性化に負の値が含まれています')


@dataclass
class Library:
    """
    話者辞書を連結したライブラリ T_tot = [T^1, ..., T^J]

    index_sets[j] が辞書 j の列番号（κ^j）。
    """
    basis: np.ndarray
    speaker_ids: List[str]
    per_speaker_k: List[int]
    stft_config: StftConfig = StftConfig()
    sample_rate: int = config.SAMPLE_RATE

    def __post_init__(self):
        self.basis = np.asarray(self.basis, dtype=np.float64)
        self.speaker_ids = [str(s) for s in self.speaker_ids]
        self.per_speaker_k = [int(k) for k in self.per_speaker_k]
        self.validate()

    @property
    def n_bins(self) -> int:
        return self.basis.shape[0]

    @property
    def k_total(self) -> int:
        return self.basis.shape[1]

    @property
    def n_speakers(self) -> int:
        return len(self.speaker_ids)

    @property
    def index_sets(self) -> List[np.ndarray]:
        bounds = np.concatenate([[0], np.cumsum(self.per_speaker_k)])
        return [np.arange(bounds[j], bounds[j + 1]) for j in range(self.n_speakers)]

    def dictionary(self, j: int) -> Dictionary:
        return Dictionary(self.basis[:, self.index_sets[j]])

    def index_of(self, label) -> int:
        """話者ラベルから辞書番号を引く"""
        label = str(label)
        if label not in self.speaker_ids:
            raise InvalidLabelError(f'ライブラリにない話者です: {label}（{self.speaker_ids}）')
        return self.speaker_ids.index(label)

    def indicator(self) -> np.ndarray:
        """二値の辞書指示行列 C（J × K_tot）"""
        c = np.zeros((self.n_speakers, self.k_total))
        for j, idx in enumerate(self.index_sets):
            c[j, idx] = 1.0
        return c

    def validate(self):
        if self.basis.ndim != 2:
            raise ShapeError(f'ライブラリの基底は2次元行列です: shape={self.basis.shape}')
        if len(self.speaker_ids) != len(self.per_speaker_k):
            raise ShapeError('speaker_ids と per_speaker_k の長さが一致しません')
        if len(set(self.speaker_ids)) != len(self.speaker_ids):
            raise InvalidLabelError(f'話者ラベルが重複しています: {self.speaker_ids}')
        if any(k < 1 for k in self.per_speaker_k):
            raise ShapeError(f'各話者の基底数は1以上です: {self.per_speaker_k}')
        if sum(self.per_speaker_k) != self.basis.shape[1]:
            raise ShapeError(f'基底数の合計 {sum(self.per_speaker_k)} が列数 {self.basis.shape[1]} と一致しません')
        if np.any(self.basis < 0) or not np.all(np.isfinite(self.basis)):
            raise DomainError('ライブラリに負の値または非有限値が含まれています')
        column_sums = self.basis.sum(axis=0)
        if np.any(np.abs(column_sums - 1.0) > 1e-9):
            raise InvalidDataError(f'ライブラリの列和が1ではありません（最大誤差 {np.max(np.abs(column_sums - 1.0)):.3e}）')

    @classmethod
    def concatenate(cls, dictionaries: Sequence[Dictionary], labels: Sequence[str],
                    stft_config: StftConfig = StftConfig(),
                    sample_rate: int = config.SAMPLE_RATE) -> 'Library':
        """話者ごとの辞書を連結してライブラリを作る"""
        return cls(np.hstack([d.basis for d in dictionaries]), list(labels),
                   [d.k for d in dictionaries], stft_config, sample_rate)

    def permuted(self, order: Sequence[int]) -> 'Library':
        """辞書の並び順を入れ替えたライブラリ"""
        sets = self.index_sets
        return Library(np.hstack([self.basis[:, sets[j]] for j in order]),
                       [self.speaker_ids[j] for j in order],
                       [self.per_speaker_k[j] for j in order],
                       self.stft_config, self.sample_rate)

    def subset(self, labels: Sequence[str]) -> 'Library':
        return self.permuted([self.index_of(label) for label in labels])

    def to_dict(self) -> dict:
        return {
            'format_version': LIBRARY_FORMAT_VERSION,
            'sample_rate': self.sample_rate,
            'stft': self.stft_config.to_dict(),
            'speakers': [{'label': s, 'k': k} for s, k in zip(self.speaker_ids, self.per_speaker_k)],
            'basis': self.basis.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'Library':
        if data.get('format_version') != LIBRARY_FORMAT_VERSION:
            raise AudioFormatError(f"未対応のライブラリ形式です: {data.get('format_version')}")
        try:
            speakers = data['speakers']
            return cls(np.array(data['basis'], dtype=np.float64),
                       [s['label'] for s in speakers], [s['k'] for s in speakers],
                       StftConfig.from_dict(data['stft']), int(data['sample_rate']))
        except (KeyError, TypeError) as e:
            raise InvalidDataError(f'ライブラリの項目が不足しています: {e}') from e

    def save(self, path):
        atomic_write_text(path, json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> 'Library':
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise InvalidDataError(f'ライブラリのJSONが不正です: {path}: {e}') from e
        return cls.from_dict(data)


def _as_array(x) -> np.ndarray:
    if isinstance(x, PowerSpectrogram):
        return x.data
    if isinstance(x, Dictionary):
        return x.basis
    if isinstance(x, Activations):
        return x.coeffs
    if isinstance(x, Library):
        return x.basis
    return np.asarray(x, dtype=np.float64)


def is_divergence(x, xhat) -> float:
    """
    Itakura-Saito 発散度 Σ x/x̂ − log(x/x̂) − 1

    Args:
        x: 観測（非負）
        xhat: モデル（正, ε でフロア）

    Returns:
        非負の実数
    """
    x = _as_array(x)
    xhat = _as_array(xhat)
    if np.any(x < 0) or np.any(xhat < 0):
        raise DomainError('IS発散度の入力に負の値が含まれています')
    ratio = floor(x) / floor(xhat)
    return float(np.sum(ratio - np.log(ratio) - 1.0))


def _check_shapes(x: np.ndarray, t: np.ndarray, v: np.ndarray):
    if x.shape[0] != t.shape[0] or t.shape[1] != v.shape[0] or x.shape[1] != v.shape[1]:
        raise ShapeError(f'次元が一致しません: X{x.shape}, T{t.shape}, V{v.shape}')


def _dictionary_step(x: np.ndarray, t: np.ndarray, v: np.ndarray) -> np.ndarray:
    xhat = floor(t @ v)
    numerator = (x / xhat ** 2) @ v.T
    denominator = (1.0 / xhat) @ v.T
    return floor(t * np.sqrt(numerator / floor(denominator)))


def _activation_step(x: np.ndarray, t: np.ndarray, v: np.ndarray) -> np.ndarray:
    xhat = floor(t @ v)
    numerator = t.T @ (x / xhat ** 2)
    denominator = t.T @ (1.0 / xhat)
    return floor(v * np.sqrt(numerator / floor(denominator)))


def update_dictionary(x, t, v, renormalize: bool = True) -> Dictionary:
    """
    辞書の乗法的更新（1ステップ）

    Args:
        x: パワースペクトログラム（F × N）
        t: 辞書（F × K）
        v: 活性化（K × N）
        renormalize: True の場合、更新後に列和を1に正規化

    Returns:
        更新後の Dictionary
    """
    x, t, v = _as_array(x), floor(_as_array(t)), floor(_as_array(v))
    _check_shapes(x, t, v)
    updated = _dictionary_step(x, t, v)
    if renormalize:
        updated = updated / floor(updated.sum(axis=0, keepdims=True))
    return Dictionary(updated)


def update_activations(x, t, v) -> Activations:
    """
    活性化の乗法的更新（1ステップ, 正規化なし）

    Args:
        x: パワースペクトログラム（F × N）
        t: 辞書（F × K）
        v: 活性化（K × N）
    """
    x, t, v = _as_array(x), floor(_as_array(t)), floor(_as_array(v))
    _check_shapes(x, t, v)
    return Activations(_activation_step(x, t, v))


def normalize_dictionary(t, v):
    """
    辞書の列和を1にし、その倍率を活性化の行に移す（T·V は変わらない）

    Returns:
        (Dictionary, Activations)
    """
    t, v = _as_array(t), _as_array(v)
    scale = floor(t.sum(axis=0))
    return Dictionary(t / scale), Activations(v * scale[:, np.newaxis])


def factorize(x, k: int, iterations: int = config.ITERATIONS_TRAIN,
              seed: int = config.DEFAULT_SEED):
    """
    IS-NMF による辞書学習

    各反復で辞書更新 → 活性化更新 → 列正規化（倍率は活性化に移す）を行う。
    発散度は反復ごとに単調非増加。

    Args:
        x: パワースペクトログラム（F × N）
        k: 基底数
        iterations: 反復回数
        seed: 初期値の乱数シード

    Returns:
        (Dictionary, Activations)。発散度の履歴は Activations.divergence_log
    """
    x = _as_array(x)
    if k < 1 or iterations < 1:
        raise InvalidDataError(f'k と iterations は1以上です: k={k}, iterations={iterations}')
    n_bins, n_frames = x.shape
    if k > min(n_bins, n_frames):
        warnings.warn(f'基底数 {k} が min(F, N) = {min(n_bins, n_frames)} を超えています', RankWarning)

    rng = RandomGenerator(seed)
    t = rng.positive_matrix((n_bins, k))
    v = rng.positive_matrix((k, n_frames))
    dictionary, activations = normalize_dictionary(t, v)
    t, v = dictionary.basis, activations.coeffs

    log = [is_divergence(x, t @ v)]
    for it in range(iterations):
        t = _dictionary_step(x, t, v)
        v = _activation_step(x, t, v)
        dictionary, activations = normalize_dictionary(t, v)
        t, v = dictionary.basis, activations.coeffs
        log.append(is_divergence(x, t @ v))
        logger.debug('factorize %d/%d: D=%.6e', it + 1, iterations, log[-1])

    logger.info('IS-NMF 完了: K=%d, 反復=%d, 発散度 %.4e → %.4e', k, iterations, log[0], log[-1])
    return Dictionary(t), Activations(v, log)


def infer_activations(x, library: Library, iterations: int = config.ITERATIONS_TEST,
                      seed: int = config.DEFAULT_SEED) -> Activations:
    """
    ライブラリを固定して活性化だけを推定

    Args:
        x: パワースペクトログラム（F × N）
        library: 学習済みライブラリ
        iterations: 反復回数
        seed: 初期値の乱数シード
    """
    x = _as_array(x)
    t = floor(library.basis)
    if x.shape[0] != t.shape[0]:
        raise ShapeError(f'周波数ビン数が一致しません: X{x.shape[0]} vs ライブラリ{t.shape[0]}')
    v = RandomGenerator(seed).positive_matrix((t.shape[1], x.shape[1]))

    log = [is_divergence(x, t @ v)]
    for _ in range(iterations):
        v = _activation_step(x, t, v)
        log.append(is_divergence(x, t @ v))
    return Activations(v, log)


def activation_scores(v, library: Library) -> np.ndarray:
    """辞書ごとの活性化の総和 Σ_{k∈κ^j} Σ_n v_kn"""
    coeffs = _as_array(v)
    if coeffs.size == 0:
        raise InvalidDataError('活性化が空です')
    if coeffs.shape[0] != library.k_total:
        raise ShapeError(f'活性化の行数 {coeffs.shape[0]} がライブラリの基底数 {library.k_total} と一致しません')
    row_sums = coeffs.sum(axis=1)
    return np.array([row_sums[idx].sum() for idx in library.index_sets])


def identify_speaker_by_activation(v, library: Library) -> str:
    """
    活性化の総和が最大の辞書の話者を返す（同値の場合は番号の小さい辞書）

    Args:
        v: 活性化（K_tot × N）
        library: ライブラリ

    Returns:
        話者ラベル
    """
    scores = activation_scores(v, library)
    return library.speaker_ids[int(np.argmax(scores))]


def identify_from_spectrogram(x, library: Library, iterations: int = config.ITERATIONS_TEST,
                              seed: int = config.DEFAULT_SEED):
    """
    単一話者のスペクトログラムから話者を識別

    Returns:
        (話者ラベル, Activations)
    """
    activations = infer_activations(x, library, iterations, seed)
    return identify_speaker_by_activation(activations, library), activations


def train_library(spectrograms: Sequence, labels: Sequence[str], k: int,
                  iterations: int = config.ITERATIONS_TRAIN, seed: int = config.DEFAULT_SEED,
                  stft_config: StftConfig = StftConfig(),
                  sample_rate: int = config.SAMPLE_RATE) -> Library:
    """
    話者ごとのパワースペクトログラムを個別に分解してライブラリを作る

    Args:
        spectrograms: 話者ごとの PowerSpectrogram（発話を時間方向に連結したもの）
        labels: 話者ラベル
        k: 話者あたりの基底数
        iterations: 反復回数
        seed: 乱数シード（話者 j は seed + j）
    """
    if len(spectrograms) != len(labels):
        raise ShapeError('スペクトログラムとラベルの数が一致しません')
    dictionaries = []
    for j, (x, label) in enumerate(zip(spectrograms, labels)):
        dictionary, _ = factorize(x, k, iterations, seed + j)
        dictionaries.append(dictionary)
        logger.info('話者 %s の辞書を学習しました（K=%d）', label, k)
    return Library.concatenate(dictionaries, labels, stft_config, sample_rate)


def wiener_reconstruct_single(xtilde: ComplexSpectrogram, library: Library, v,
                              target: Union[int, str]) -> ComplexSpectrogram:
    """
    単チャネルWienerフィルタによる話者 j の復元

    ŷ_fn = (Σ_{k∈κ^j} t_fk v_kn / Σ_j* Σ_{k∈κ^j*} t_fk v_kn) · x̃_fn（位相は観測のまま）

    Args:
        xtilde: 観測の複素スペクトログラム
        library: ライブラリ
        v: 活性化（K_tot × N）
        target: 辞書番号 j（0始まり）または話者ラベル
    """
    coeffs = _as_array(v)
    if xtilde.data.shape[0] != library.n_bins or coeffs.shape != (library.k_total, xtilde.data.shape[1]):
        raise ShapeError(f'次元が一致しません: X̃{xtilde.data.shape}, T{library.basis.shape}, V{coeffs.shape}')
    j = target if isinstance(target, (int, np.integer)) else library.index_of(target)
    idx = library.index_sets[j]
    numerator = library.basis[:, idx] @ coeffs[idx]
    denominator = floor(library.basis @ coeffs)
    mask = numerator / denominator
    return ComplexSpectrogram(mask * xtilde.data, xtilde.config, xtilde.sample_rate, xtilde.length)
