"""
多チャネル NMF（話者指示子 Z・辞書指示子 C 付き）
ブラインド学習、ライブラリ固定での分離と話者識別の同時推定、
Riccati 方程式による空間共分散の更新、多チャネル Wiener フィルタ
"""

from dataclasses import dataclass, field, replace
import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence
import warnings

import numpy as np

import config
from audio import MultichannelSpectrogram
from errors import ConfigError, InvalidDataError, NumericalError, RankWarning, ShapeError
from nmf import Activations, Dictionary, Library
from utils import RandomGenerator, atomic_write_bytes, atomic_write_text, floor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
EPS = config.EPS


@dataclass
class ObservedCovarianceField:
    """観測共分散 X_fn = x̃_fn x̃_fn^H（F × N × I × I）"""
    matrices: np.ndarray

    @property
    def n_bins(self) -> int:
        return self.matrices.shape[0]

    @property
    def n_frames(self) -> int:
        return self.matrices.shape[1]

    @property
    def channel_count(self) -> int:
        return self.matrices.shape[2]


@dataclass
class SpatialCovarianceSet:
    """音源ごとの空間共分散 H_fs（F × S × I × I, エルミート半正定値, トレース1）"""
    matrices: np.ndarray

    @property
    def n_bins(self) -> int:
        return self.matrices.shape[0]

    @property
    def s_count(self) -> int:
        return self.matrices.shape[1]

    @property
    def channel_count(self) -> int:
        return self.matrices.shape[2]

    def validate(self, tol: float = 1e-8):
        """エルミート性・半正定値性・トレース1を確認（違反時は InvalidDataError）"""
        h = self.matrices
        hermitian_error = np.max(np.abs(h - _hermitian_transpose(h)))
        if hermitian_error > 1e-10:
            raise InvalidDataError(f'H がエルミートではありません（誤差 {hermitian_error:.2e}）')
        traces = np.trace(h, axis1=-2, axis2=-1).real
        eigenvalues = np.linalg.eigvalsh(h)
        if np.any(eigenvalues.min(axis=-1) < -tol * traces):
            raise InvalidDataError('H が半正定値ではありません')
        if np.max(np.abs(traces - 1.0)) > 1e-10:
            raise InvalidDataError(f'H のトレースが1ではありません（最大誤差 {np.max(np.abs(traces - 1.0)):.2e}）')


@dataclass
class JointModel:
    """
    X̂_fn = Σ_k Σ_j Σ_s H_fs z_sj c_jk t_fk v_kn

    z_axis: 'dictionaries' の場合 Z の各行を j 方向に正規化（同時推定・固定二値Z）、
            'sources' の場合 Z の各列を s 方向に正規化（ブラインド学習で Z を推定する場合）
    """
    t: np.ndarray  # F × K_tot
    v: np.ndarray  # K_tot × N
    z: np.ndarray  # S × J
    c: np.ndarray  # J × K_tot
    h: np.ndarray  # F × S × I × I
    z_axis: str = 'dictionaries'
    divergence_log: List[float] = field(default_factory=list)
    iterations_done: int = 0

    @property
    def n_bins(self) -> int:
        return self.t.shape[0]

    @property
    def n_frames(self) -> int:
        return self.v.shape[1]

    @property
    def k_total(self) -> int:
        return self.t.shape[1]

    @property
    def s_count(self) -> int:
        return self.z.shape[0]

    @property
    def j_count(self) -> int:
        return self.z.shape[1]

    @property
    def channel_count(self) -> int:
        return self.h.shape[-1]

    @property
    def basis_weights(self) -> np.ndarray:
        """音源と基底の対応 w_sk = Σ_j z_sj c_jk（S × K_tot）"""
        return self.z @ self.c

    @property
    def spatial(self) -> SpatialCovarianceSet:
        return SpatialCovarianceSet(self.h)


@dataclass
class TrainResult:
    library: Library
    spatial: SpatialCovarianceSet
    model: JointModel


@dataclass
class JointTestResult:
    assignments: List[str]  # テスト位置 s ごとの話者ラベル
    z: np.ndarray
    separated: List[MultichannelSpectrogram]
    divergence_log: List[float]
    model: JointModel


@dataclass
class BlindSeparationResult:
    separated: List[MultichannelSpectrogram]
    model: JointModel


# ========== 行列演算の補助関数 ==========

def _hermitian_transpose(m: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(m, -1, -2))


def _hermitize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + _hermitian_transpose(m))


def _identity_like(m: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.eye(m.shape[-1]), m.shape)


def _inverse(m: np.ndarray) -> np.ndarray:
    """バッチ逆行列（2×2 は閉じた式で計算）"""
    if m.shape[-1] == 1:
        return 1.0 / m
    if m.shape[-1] == 2:
        a, b = m[..., 0, 0], m[..., 0, 1]
        c, d = m[..., 1, 0], m[..., 1, 1]
        det = a * d - b * c
        inv = np.empty_like(m)
        inv[..., 0, 0] = d / det
        inv[..., 0, 1] = -b / det
        inv[..., 1, 0] = -c / det
        inv[..., 1, 1] = a / det
        return inv
    try:
        return np.linalg.inv(m)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f'モデル共分散が特異です: {e}') from e


def _eig_function(m: np.ndarray, func, lower: float) -> np.ndarray:
    """エルミート行列の固有値に関数を適用（固有値は lower でクリップ）"""
    try:
        eigenvalues, eigenvectors = np.linalg.eigh(_hermitize(m))
    except np.linalg.LinAlgError as e:
        raise NumericalError(f'固有値分解に失敗しました: {e}') from e
    eigenvalues = func(np.maximum(eigenvalues, lower))
    return (eigenvectors * eigenvalues[..., np.newaxis, :]) @ _hermitian_transpose(eigenvectors)


def _mu_ratio(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(numerator, 0.0) / floor(denominator))


def _covariances_of(xcov) -> np.ndarray:
    return xcov.matrices if isinstance(xcov, ObservedCovarianceField) else np.asarray(xcov)


def _floor_covariance(m: np.ndarray) -> np.ndarray:
    """モデル共分散のフロア（I = 1 では utils.floor と同じ max(x, ε)、それ以外は + ε·I）"""
    if m.shape[-1] == 1:
        return floor(m.real).astype(m.dtype)
    return m + EPS * _identity_like(m)


def _logdet(m: np.ndarray) -> np.ndarray:
    """エルミート半正定値行列の log det（固有値を ε でフロア）"""
    try:
        eigenvalues = np.linalg.eigvalsh(_hermitize(m))
    except np.linalg.LinAlgError as e:
        raise NumericalError(f'固有値分解に失敗しました: {e}') from e
    return np.sum(np.log(floor(eigenvalues)), axis=-1)


# ========== 観測・モデル共分散 ==========

def observed_covariances(x: MultichannelSpectrogram) -> ObservedCovarianceField:
    """
    観測共分散 X_fn = x̃_fn x̃_fn^H を計算

    Args:
        x: I × F × N の多チャネルスペクトログラム

    Returns:
        F × N × I × I の ObservedCovarianceField
    """
    data = x.data if isinstance(x, MultichannelSpectrogram) else np.asarray(x)
    if data.ndim != 3 or data.shape[0] < 1:
        raise ShapeError(f'I × F × N の配列が必要です: shape={data.shape}')
    return ObservedCovarianceField(np.einsum('ifn,jfn->fnij', data, np.conj(data)))


def source_powers(model: JointModel) -> np.ndarray:
    """音源 s のパワーモデル u_sfn = Σ_k w_sk t_fk v_kn（S × F × N）"""
    return np.einsum('fk,sk,kn->sfn', model.t, model.basis_weights, model.v, optimize=True)


def model_covariances(model: JointModel, powers: Optional[np.ndarray] = None) -> np.ndarray:
    """全 (f, n) のモデル共分散 X̂_fn（F × N × I × I, フロアなし）"""
    if powers is None:
        powers = source_powers(model)
    return np.einsum('sfn,fsij->fnij', powers, model.h, optimize=True)


def model_covariance(model: JointModel, f: int, n: int) -> np.ndarray:
    """
    1つの (f, n) のモデル共分散

    Returns:
        I × I のエルミート半正定値行列
    """
    weights = model.basis_weights
    powers = (weights * model.t[f][np.newaxis, :]) @ model.v[:, n]
    return np.einsum('s,sij->ij', powers, model.h[f])


def multichannel_is_divergence(xcov, model: JointModel) -> float:
    """
    多チャネル IS 発散度 Σ_fn tr(X X̂^-1) − log det(X X̂^-1) − I

    log det の項だけは階数1の X の固有値を ε でフロアして評価する。

    Args:
        xcov: 観測共分散
        model: JointModel
    """
    x = _covariances_of(xcov)
    xhat = _floor_covariance(model_covariances(model))
    xi = _inverse(xhat)
    trace_term = np.einsum('fnij,fnji->fn', x, xi).real
    logdet_x = _logdet(x)
    logdet_xhat = _logdet(xhat)
    channels = x.shape[-1]
    return float(np.sum(trace_term - (logdet_x - logdet_xhat) - channels))


@dataclass
class _Statistics:
    powers: np.ndarray  # S × F × N
    xi: np.ndarray  # X̂^-1
    p: np.ndarray  # X̂^-1 X X̂^-1
    a: np.ndarray  # tr(X̂^-1 X X̂^-1 H_fs), F × N × S
    b: np.ndarray  # tr(X̂^-1 H_fs), F × N × S


def _statistics(model: JointModel, xcov) -> _Statistics:
    x = _covariances_of(xcov)
    if x.shape[:2] != (model.n_bins, model.n_frames) or x.shape[-1] != model.channel_count:
        raise ShapeError(f'観測 {x.shape} とモデル (F={model.n_bins}, N={model.n_frames}, '
                         f'I={model.channel_count}) の次元が一致しません')
    powers = source_powers(model)
    xhat = _floor_covariance(model_covariances(model, powers))
    xi = _inverse(xhat)
    # I = 1 では単チャネル IS-NMF と同じ x / x̂² の順で評価する
    p = x / xhat ** 2 if x.shape[-1] == 1 else xi @ x @ xi
    a = np.einsum('fnij,fsji->fns', p, model.h, optimize=True).real
    b = np.einsum('fnij,fsji->fns', xi, model.h, optimize=True).real
    return _Statistics(powers, xi, p, a, b)


# ========== 乗法的更新 ==========

def _t_step(model: JointModel, stats: _Statistics) -> np.ndarray:
    weights = model.basis_weights
    numerator = np.einsum('sk,kn,fns->fk', weights, model.v, stats.a, optimize=True)
    denominator = np.einsum('sk,kn,fns->fk', weights, model.v, stats.b, optimize=True)
    return floor(model.t * _mu_ratio(numerator, denominator))


def _v_step(model: JointModel, stats: _Statistics) -> np.ndarray:
    weights = model.basis_weights
    numerator = np.einsum('sk,fk,fns->kn', weights, model.t, stats.a, optimize=True)
    denominator = np.einsum('sk,fk,fns->kn', weights, model.t, stats.b, optimize=True)
    return floor(model.v * _mu_ratio(numerator, denominator))


def _basis_gains(model: JointModel, stats: _Statistics):
    """Σ_fn t_fk v_kn tr(·) を音源×基底でまとめた量（S × K_tot）"""
    ga = np.einsum('fk,kn,fns->sk', model.t, model.v, stats.a, optimize=True)
    gb = np.einsum('fk,kn,fns->sk', model.t, model.v, stats.b, optimize=True)
    return ga, gb


def _z_step(model: JointModel, stats: _Statistics) -> np.ndarray:
    ga, gb = _basis_gains(model, stats)
    return model.z * _mu_ratio(ga @ model.c.T, gb @ model.c.T)


def _c_step(model: JointModel, stats: _Statistics) -> np.ndarray:
    ga, gb = _basis_gains(model, stats)
    return model.c * _mu_ratio(model.z.T @ ga, model.z.T @ gb)


def _normalize_z(z: np.ndarray, z_axis: str) -> np.ndarray:
    axis = 1 if z_axis == 'dictionaries' else 0
    return z / floor(z.sum(axis=axis, keepdims=True))


def _normalize_c(c: np.ndarray) -> np.ndarray:
    return c / floor(c.sum(axis=0, keepdims=True))


def update_t(model: JointModel, xcov, renormalize: bool = True) -> Dictionary:
    """
    辞書 T の乗法的更新

    Args:
        model: JointModel
        xcov: 観測共分散
        renormalize: True の場合、更新後に列和を1に正規化
    """
    t = _t_step(model, _statistics(model, xcov))
    if renormalize:
        t = t / floor(t.sum(axis=0, keepdims=True))
    return Dictionary(t)


def update_v(model: JointModel, xcov) -> Activations:
    """活性化 V の乗法的更新（正規化なし）"""
    return Activations(_v_step(model, _statistics(model, xcov)))


def update_z(model: JointModel, xcov) -> np.ndarray:
    """話者指示子 Z の乗法的更新と正規化"""
    return _normalize_z(_z_step(model, _statistics(model, xcov)), model.z_axis)


def update_c(model: JointModel, xcov) -> np.ndarray:
    """
    辞書指示子 C の乗法的更新と列正規化

    二値の C は 0 が 0 のまま、1 は正規化で 1 に戻るため変化しない。
    """
    return _normalize_c(_c_step(model, _statistics(model, xcov)))


def solve_riccati(a: np.ndarray, b: np.ndarray, eps: float = EPS) -> np.ndarray:
    """
    H A H = B をエルミート半正定値の H について解く（バッチ対応）

    H = A^{-1/2} (A^{1/2} B A^{1/2})^{1/2} A^{-1/2}

    Args:
        a: (..., I, I) エルミート正定値（ε·I でフロア）
        b: (..., I, I) エルミート半正定値

    Returns:
        (..., I, I) のエルミート半正定値行列
    """
    a = _hermitize(a) + eps * _identity_like(a)
    a_half = _eig_function(a, np.sqrt, eps)
    a_inv_half = _eig_function(a, lambda lam: 1.0 / np.sqrt(lam), eps)
    middle = _eig_function(a_half @ _hermitize(b) @ a_half, np.sqrt, 0.0)
    h = _hermitize(a_inv_half @ middle @ a_inv_half)
    return _hermitize(_eig_function(h, lambda lam: lam, 0.0))


def _riccati_terms(model: JointModel, stats: _Statistics):
    a = np.einsum('sfn,fnij->fsij', stats.powers, stats.xi, optimize=True)
    middle = np.einsum('sfn,fnij->fsij', stats.powers, stats.p, optimize=True)
    b = model.h @ middle @ model.h
    return a, b


def _h_step(model: JointModel, stats: _Statistics) -> np.ndarray:
    a, b = _riccati_terms(model, stats)
    return solve_riccati(a, b)


def riccati_update_h(model: JointModel, xcov, f: int, s: int) -> np.ndarray:
    """
    1つの (f, s) の空間共分散を Riccati 方程式 H A H = B で更新

    Returns:
        I × I のエルミート半正定値行列（トレース正規化前）
    """
    stats = _statistics(model, xcov)
    a, b = _riccati_terms(model, stats)
    return solve_riccati(a[f, s], b[f, s])


def update_h(model: JointModel, xcov) -> SpatialCovarianceSet:
    """全 (f, s) の空間共分散を Riccati 方程式で更新（トレース正規化前）"""
    return SpatialCovarianceSet(_h_step(model, _statistics(model, xcov)))


# ========== 正規化 ==========

def normalize(model: JointModel) -> JointModel:
    """
    スケールの不定性を除く4つの正規化（補償なし）

    H_fs ← H_fs / tr(H_fs), t_fk ← t_fk / Σ_f t_fk,
    z_sj ← z_sj / Σ_j z_sj, c_jk ← c_jk / Σ_j c_jk
    """
    traces = floor(np.trace(model.h, axis1=-2, axis2=-1).real)
    h = _hermitize(model.h / traces[..., np.newaxis, np.newaxis])
    t = model.t / floor(model.t.sum(axis=0, keepdims=True))
    return replace(model, t=t, h=h, z=_normalize_z(model.z, model.z_axis), c=_normalize_c(model.c))


def _owner_sources(weights: np.ndarray) -> Optional[np.ndarray]:
    """各基底が1つの音源だけに属していればその音源番号、そうでなければ None"""
    if np.all(np.count_nonzero(weights, axis=0) == 1):
        return np.argmax(weights, axis=0)
    return None


def _normalize_compensated(model: JointModel, t_free: bool) -> JointModel:
    """
    正規化しつつ、厳密に補償できる倍率は他の変数へ移す（X̂ を変えない）

    C の列和と T の列和は V の行へ、H のトレースは各基底が1音源に属する場合のみ T の行へ移す。
    """
    z, c, t, v, h = model.z, model.c, model.t, model.v, model.h

    if model.z_axis == 'sources':
        # 列 j の倍率は C の行 j に移す（z_sj c_jk は不変）
        scale = floor(z.sum(axis=0))
        z = z / scale
        c = c * scale[:, np.newaxis]
    else:
        z = _normalize_z(z, model.z_axis)

    column = floor(c.sum(axis=0))
    c = c / column
    v = v * column[:, np.newaxis]

    traces = floor(np.trace(h, axis1=-2, axis2=-1).real)  # F × S
    h = _hermitize(h / traces[..., np.newaxis, np.newaxis])
    owners = _owner_sources(z @ c)
    if t_free and owners is not None:
        t = t * traces[:, owners]

    if t_free:
        scale = floor(t.sum(axis=0))
        t = t / scale
        v = v * scale[:, np.newaxis]
    return replace(model, z=z, c=c, t=t, v=v, h=h)


# ========== 反復 ==========

def run_iterations(model: JointModel, xcov, iterations: int, update_t_flag: bool = True,
                   update_v_flag: bool = True, update_z_flag: bool = True,
                   update_c_flag: bool = True, update_h_flag: bool = True,
                   desc: str = 'MNMF') -> JointModel:
    """
    t → v → z → c → H → 正規化 の順に反復する

    I = 1 ではトレース1の制約で H_fs = 1 に固定されるため H の更新は行わない。

    Args:
        model: 初期モデル
        xcov: 観測共分散
        iterations: 反復回数
        update_*_flag: 各変数を更新するかどうか

    Returns:
        更新後の JointModel（divergence_log に反復ごとの発散度を追記）
    """
    xcov = ObservedCovarianceField(_covariances_of(xcov))
    if model.channel_count == 1:
        update_h_flag = False
    log = list(model.divergence_log)
    if not log:
        log.append(multichannel_is_divergence(xcov, model))

    for it in range(iterations):
        if update_t_flag:
            model = replace(model, t=_t_step(model, _statistics(model, xcov)))
        if update_v_flag:
            model = replace(model, v=_v_step(model, _statistics(model, xcov)))
        if update_z_flag:
            model = replace(model, z=_z_step(model, _statistics(model, xcov)))
        if update_c_flag:
            model = replace(model, c=_c_step(model, _statistics(model, xcov)))
        if update_h_flag:
            model = replace(model, h=_h_step(model, _statistics(model, xcov)))
        model = _normalize_compensated(model, t_free=update_t_flag)
        log.append(multichannel_is_divergence(xcov, model))
        logger.debug('%s %d/%d: D=%.6e', desc, it + 1, iterations, log[-1])

    increases = np.diff(log) > 1e-7 * np.abs(np.asarray(log[:-1]))
    if np.any(increases):
        logger.info('%s: 発散度が増加した反復が %d 回ありました', desc, int(increases.sum()))
    return replace(model, divergence_log=log, iterations_done=model.iterations_done + iterations)


# ========== 初期化 ==========

def default_spatial_covariance(n_bins: int, s_count: int, channels: int,
                               rng: RandomGenerator) -> SpatialCovarianceSet:
    """
    DOA が無い場合の初期値: 単位行列/I と乱数の到来方向に対応する階数1成分の等量混合

    Args:
        n_bins: 周波数ビン数
        s_count: 音源数
        channels: マイク数
        rng: 乱数生成器
    """
    normalized_freq = np.arange(n_bins) / max(2 * (n_bins - 1), 1)
    delays = rng.rng.uniform(-2.0, 2.0, size=(s_count, channels))  # サンプル単位
    delays[:, 0] = 0.0
    steering = np.exp(-2j * np.pi * normalized_freq[:, np.newaxis, np.newaxis] * delays[np.newaxis])
    steering /= np.sqrt(channels)
    rank_one = np.einsum('fsi,fsj->fsij', steering, np.conj(steering))
    identity = np.eye(channels) / channels
    return SpatialCovarianceSet(0.5 * identity + 0.5 * rank_one)


def _initial_h(h_init, n_bins: int, s_count: int, channels: int, rng: RandomGenerator) -> np.ndarray:
    if h_init is None:
        return default_spatial_covariance(n_bins, s_count, channels, rng).matrices
    h = h_init.matrices if isinstance(h_init, SpatialCovarianceSet) else np.asarray(h_init)
    if h.shape != (n_bins, s_count, channels, channels):
        raise ShapeError(f'H の初期値の形状が不正です: {h.shape}（期待値 {(n_bins, s_count, channels, channels)}）')
    traces = floor(np.trace(h, axis1=-2, axis2=-1).real)
    return _hermitize(h / traces[..., np.newaxis, np.newaxis]).astype(np.complex128)


def _block_indicator(per_speaker_k: Sequence[int]) -> np.ndarray:
    bounds = np.concatenate([[0], np.cumsum(per_speaker_k)])
    c = np.zeros((len(per_speaker_k), bounds[-1]))
    for j in range(len(per_speaker_k)):
        c[j, bounds[j]:bounds[j + 1]] = 1.0
    return c


def _check_input(x: MultichannelSpectrogram):
    if not isinstance(x, MultichannelSpectrogram):
        raise ShapeError('MultichannelSpectrogram を渡してください')
    if x.channel_count < 1:
        raise ShapeError('チャネル数は1以上です')


# ========== 学習・テスト ==========

def init_blind_model(x: MultichannelSpectrogram, s_count: int, k_per_speaker: int, h_init=None,
                     seed: int = config.DEFAULT_SEED, assignment: str = 'fixed') -> JointModel:
    """
    ブラインド学習用の初期モデル

    assignment='fixed' では z_sk = 1 (k ∈ κ^s) の二値指示子（J = S, C はブロック単位行列）、
    assignment='argmax' では Z（S × K_tot）を乱数で初期化して推定する（J = K_tot, C = 単位行列）。
    """
    if assignment not in ('fixed', 'argmax'):
        raise ConfigError(f"assignment は 'fixed' か 'argmax' です: {assignment}")
    n_bins, n_frames = x.n_bins, x.n_frames
    k_total = s_count * k_per_speaker

    rng = RandomGenerator(seed)
    t = rng.positive_matrix((n_bins, k_total))
    v = rng.positive_matrix((k_total, n_frames))
    scale = t.sum(axis=0)
    t, v = t / scale, v * scale[:, np.newaxis]
    h = _initial_h(h_init, n_bins, s_count, x.channel_count, rng)

    if assignment == 'fixed':
        z = np.eye(s_count)
        c = _block_indicator([k_per_speaker] * s_count)
        z_axis = 'dictionaries'
    else:
        z = rng.positive_matrix((s_count, k_total))
        z = z / z.sum(axis=0, keepdims=True)
        c = np.eye(k_total)
        z_axis = 'sources'
    return JointModel(t=t, v=v, z=z, c=c, h=h, z_axis=z_axis)


def _assign_basis_vectors(z: np.ndarray) -> List[np.ndarray]:
    """基底 k を z_sk が最大の音源に割り当てる（空の音源には最も z の大きい基底を回す）"""
    s_count, k_total = z.shape
    owners = np.argmax(z, axis=0)
    for s in range(s_count):
        if not np.any(owners == s):
            counts = np.bincount(owners, minlength=s_count)
            donors = np.where(counts[owners] > 1)[0]
            if len(donors) == 0:
                raise InvalidDataError('基底数が音源数より少ないため割り当てられません')
            owners[donors[np.argmax(z[s, donors])]] = s
    return [np.where(owners == s)[0] for s in range(s_count)]


def train_blind(x: MultichannelSpectrogram, s_count: int, k_per_speaker: int,
                iterations: int = config.ITERATIONS_TRAIN, h_init=None,
                seed: int = config.DEFAULT_SEED, labels: Optional[Sequence[str]] = None,
                assignment: str = 'fixed') -> TrainResult:
    """
    同時発話の多チャネル観測から話者辞書をブラインドに学習

    Args:
        x: I × F × N の学習用観測
        s_count: 話者数 S
        k_per_speaker: 話者あたりの基底数 K
        iterations: 反復回数
        h_init: 空間共分散の初期値（None の場合は単位行列+乱数ステアリング）
        seed: 乱数シード
        labels: 音源 s に対応する話者ラベル（None の場合 's0', 's1', ...）
        assignment: 'fixed'（二値Zで固定）or 'argmax'（Zを推定し最大の音源へ割り当て）

    Returns:
        TrainResult（ライブラリ, 学習後の H, モデル）
    """
    _check_input(x)
    if s_count < 1 or k_per_speaker < 1:
        raise ConfigError(f'S と K は1以上です: S={s_count}, K={k_per_speaker}')
    if labels is None:
        labels = [f's{s}' for s in range(s_count)]
    if len(labels) != s_count:
        raise ConfigError(f'ラベル数 {len(labels)} が S={s_count} と一致しません')
    if s_count * k_per_speaker > x.n_bins * x.n_frames:
        warnings.warn(f'S·K = {s_count * k_per_speaker} が F·N = {x.n_bins * x.n_frames} を超えています（不良設定）',
                      RankWarning)

    model = init_blind_model(x, s_count, k_per_speaker, h_init, seed, assignment)
    xcov = observed_covariances(x)
    free_z = assignment == 'argmax'
    model = run_iterations(model, xcov, iterations, update_z_flag=free_z, update_c_flag=False,
                           desc='学習')

    if assignment == 'fixed':
        index_sets = [np.arange(s * k_per_speaker, (s + 1) * k_per_speaker) for s in range(s_count)]
    else:
        index_sets = _assign_basis_vectors(model.z)
    dictionaries = [Dictionary(model.t[:, idx]) for idx in index_sets]
    library = Library.concatenate(dictionaries, labels, x.config, x.sample_rate)
    logger.info('ブラインド学習完了: S=%d, K_tot=%d, 発散度 %.4e → %.4e',
                s_count, library.k_total, model.divergence_log[0], model.divergence_log[-1])
    return TrainResult(library, model.spatial, model)


def init_joint_model(x: MultichannelSpectrogram, library: Library, s_count: int, h_init=None,
                     seed: int = config.DEFAULT_SEED) -> JointModel:
    """テスト用の初期モデル（T 固定, C 二値, Z = 1/J, V 乱数）"""
    if x.n_bins != library.n_bins:
        raise ConfigError(f'周波数ビン数が一致しません: 観測 {x.n_bins} vs ライブラリ {library.n_bins}')
    j_count = library.n_speakers
    if s_count < 1 or s_count > j_count:
        raise ConfigError(f'S は 1 以上 J={j_count} 以下です: S={s_count}')
    rng = RandomGenerator(seed)
    v = rng.positive_matrix((library.k_total, x.n_frames))
    h = _initial_h(h_init, x.n_bins, s_count, x.channel_count, rng)
    z = np.full((s_count, j_count), 1.0 / j_count)
    return JointModel(t=library.basis.copy(), v=v, z=z, c=library.indicator(), h=h)


def identify_positions(z: np.ndarray, labels: Sequence[str]) -> List[str]:
    """各テスト位置 s について z_sj が最大の辞書の話者を返す（同値は番号の小さい方）"""
    return [labels[int(j)] for j in np.argmax(z, axis=1)]


def test_joint(x: MultichannelSpectrogram, library: Library, s_count: int,
               iterations: int = config.ITERATIONS_TEST, h_init=None,
               seed: int = config.DEFAULT_SEED) -> JointTestResult:
    """
    ライブラリを固定して分離と話者識別を同時に行う

    Args:
        x: I × F × N のテスト混合
        library: 学習済みライブラリ
        s_count: テスト混合中の話者数 S（S ≤ J）
        iterations: 反復回数
        h_init: 空間共分散の初期値
        seed: 乱数シード

    Returns:
        JointTestResult（位置ごとの話者ラベル, Z, 分離信号, 発散度履歴, モデル）
    """
    _check_input(x)
    model = init_joint_model(x, library, s_count, h_init, seed)
    xcov = observed_covariances(x)
    model = run_iterations(model, xcov, iterations, update_t_flag=False, update_c_flag=False,
                           desc='テスト')
    assignments = identify_positions(model.z, library.speaker_ids)
    separated = [wiener_multichannel(model, x, s) for s in range(s_count)]
    logger.info('同時推定完了: 識別結果 %s', assignments)
    return JointTestResult(assignments, model.z.copy(), separated, model.divergence_log, model)


def separate_blind(x: MultichannelSpectrogram, s_count: int, k_per_source: int,
                   iterations: int = config.ITERATIONS_TRAIN, h_init=None,
                   seed: int = config.DEFAULT_SEED) -> BlindSeparationResult:
    """
    ライブラリなしのブラインド音源分離（逐次方式の前段）

    Returns:
        BlindSeparationResult（音源ごとの分離信号, モデル）
    """
    result = train_blind(x, s_count, k_per_source, iterations, h_init, seed)
    separated = [wiener_multichannel(result.model, x, s) for s in range(s_count)]
    return BlindSeparationResult(separated, result.model)


def separate_with_library(x: MultichannelSpectrogram, library: Library, s_count: int,
                          iterations: int = config.ITERATIONS_TEST, h_init=None,
                          seed: int = config.DEFAULT_SEED) -> List[MultichannelSpectrogram]:
    """学習済みライブラリを固定した分離（同時推定の分離出力だけを返す）"""
    return test_joint(x, library, s_count, iterations, h_init, seed).separated


def wiener_multichannel(model: JointModel, x: MultichannelSpectrogram, s: int) -> MultichannelSpectrogram:
    """
    多チャネル Wiener フィルタ ŷ_fn^s = u_sfn H_fs X̂_fn^-1 x̃_fn

    Args:
        model: JointModel
        x: I × F × N の観測
        s: 音源番号

    Returns:
        音源 s のマイクごとの像（I × F × N）
    """
    powers = source_powers(model)
    xhat = model_covariances(model, powers)
    xi = _inverse(_floor_covariance(xhat))
    observation = np.moveaxis(x.data, 0, -1)  # F × N × I
    filtered = np.einsum('fnij,fnj->fni', xi, observation)
    image = powers[s][..., np.newaxis] * np.einsum('fij,fnj->fni', model.h[:, s], filtered)
    return MultichannelSpectrogram(np.moveaxis(image, -1, 0).copy(), x.config, x.sample_rate, x.length)


# ========== チェックポイント ==========

def save_checkpoint(model: JointModel, directory, name: str = 'model'):
    """
    モデルを JSON マニフェスト + float64 のバイナリ（リトルエンディアン）で保存

    H は (re, im) を交互に並べて保存する。
    """
    directory = Path(directory)
    arrays = {'t': model.t, 'v': model.v, 'z': model.z, 'c': model.c}
    files = {}
    for key, array in arrays.items():
        filename = f'{name}_{key}.f64'
        atomic_write_bytes(directory / filename, np.ascontiguousarray(array, dtype='<f8').tobytes())
        files[key] = {'file': filename, 'shape': list(array.shape)}
    interleaved = np.stack([model.h.real, model.h.imag], axis=-1)
    filename = f'{name}_h.f64'
    atomic_write_bytes(directory / filename, np.ascontiguousarray(interleaved, dtype='<f8').tobytes())
    files['h'] = {'file': filename, 'shape': list(model.h.shape)}

    manifest = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'dimensions': {'F': model.n_bins, 'N': model.n_frames, 'K_tot': model.k_total,
                       'S': model.s_count, 'J': model.j_count, 'I': model.channel_count},
        'z_axis': model.z_axis,
        'iterations': model.iterations_done,
        'divergence_log': list(model.divergence_log),
        'arrays': files,
    }
    atomic_write_text(directory / f'{name}.json', json.dumps(manifest, indent=2))


def load_checkpoint(directory, name: str = 'model') -> JointModel:
    """save_checkpoint で保存したモデルを読み込む"""
    directory = Path(directory)
    manifest_path = directory / f'{name}.json'
    manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
    if manifest.get('format_version') != CHECKPOINT_FORMAT_VERSION:
        raise InvalidDataError(f"未対応のチェックポイント形式です: {manifest_path}")
    arrays = {}
    for key, entry in manifest['arrays'].items():
        raw = np.fromfile(directory / entry['file'], dtype='<f8')
        if key == 'h':
            raw = raw.reshape(tuple(entry['shape']) + (2,))
            arrays[key] = raw[..., 0] + 1j * raw[..., 1]
        else:
            arrays[key] = raw.reshape(entry['shape'])
    return JointModel(t=arrays['t'], v=arrays['v'], z=arrays['z'], c=arrays['c'], h=arrays['h'],
                      z_axis=manifest['z_axis'], divergence_log=list(manifest['divergence_log']),
                      iterations_done=int(manifest['iterations']))
