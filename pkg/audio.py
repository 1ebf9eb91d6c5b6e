"""
音声入出力・時間周波数変換モジュール
WAVの読み書き、STFT/逆STFT（平方根ハン窓, 反射パディング）、パワースペクトログラム
"""

from dataclasses import dataclass
import io
import logging
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import signal
import soundfile as sf

import config
from errors import (
    AudioFormatError,
    ConfigError,
    InsufficientInputError,
    InvalidDataError,
    UnsupportedFormatError,
)
from utils import atomic_write_bytes

logger = logging.getLogger(__name__)

SUPPORTED_SUBTYPES = ('PCM_16', 'FLOAT')


@dataclass
class AudioBuffer:
    """
    時間領域信号

    samples は (channel_count, length) の配列。全チャネル同じ長さ。
    """
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[np.newaxis, :]
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise InvalidDataError(f'samples は (channels, length) の2次元配列です: shape={samples.shape}')
        if int(self.sample_rate) <= 0:
            raise InvalidDataError(f'sample_rate は正の値です: {self.sample_rate}')
        self.samples = samples
        self.sample_rate = int(self.sample_rate)

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.length / self.sample_rate

    def channel(self, index: int) -> np.ndarray:
        return self.samples[index]

    @classmethod
    def stack(cls, channels, sample_rate: int) -> 'AudioBuffer':
        """1次元信号のリストを多チャネルのバッファにまとめる"""
        lengths = {len(c) for c in channels}
        if len(lengths) != 1:
            raise InvalidDataError(f'チャネル長が揃っていません: {sorted(lengths)}')
        return cls(np.vstack([np.asarray(c, dtype=np.float64) for c in channels]), sample_rate)


@dataclass(frozen=True)
class StftConfig:
    """
    STFTの設定

    window: 'sqrt_hann'（分析・合成とも平方根ハン窓）, 'hann'（分析ハン窓・合成矩形窓）,
            'rect'（両方矩形窓）
    fft_size: None の場合は窓長と同じ
    """
    window_length_ms: float = config.WINDOW_MS
    hop_length_ms: float = config.HOP_MS
    window: str = config.WINDOW_TYPE
    fft_size: Optional[int] = None

    def window_length(self, sample_rate: int) -> int:
        return int(round(self.window_length_ms * sample_rate / 1000.0))

    def hop_length(self, sample_rate: int) -> int:
        return int(round(self.hop_length_ms * sample_rate / 1000.0))

    def n_fft(self, sample_rate: int) -> int:
        return self.fft_size if self.fft_size is not None else self.window_length(sample_rate)

    def n_bins(self, sample_rate: int) -> int:
        return self.n_fft(sample_rate) // 2 + 1

    def windows(self, sample_rate: int):
        """
        分析窓と合成窓を返す

        Returns:
            (analysis, synthesis)
        """
        length = self.window_length(sample_rate)
        if self.window == 'sqrt_hann':
            w = np.sqrt(signal.get_window('hann', length))
            return w, w
        if self.window == 'hann':
            return signal.get_window('hann', length), np.ones(length)
        if self.window == 'rect':
            return np.ones(length), np.ones(length)
        raise ConfigError(f'未対応の窓関数: {self.window}')

    def validate(self, sample_rate: int, require_cola: bool = False):
        """
        窓長・シフト幅・FFT長の整合性を確認

        Args:
            sample_rate: サンプリング周波数
            require_cola: True の場合、分析窓×合成窓の COLA 条件も確認
        """
        length = self.window_length(sample_rate)
        hop = self.hop_length(sample_rate)
        if length < 1 or hop < 1:
            raise ConfigError(f'窓長・シフト幅が短すぎます: window={length}, hop={hop}')
        if hop > length:
            raise ConfigError(f'シフト幅が窓長を超えています: hop={hop} > window={length}')
        if self.n_fft(sample_rate) < length:
            raise ConfigError(f'fft_size が窓長より小さいです: {self.n_fft(sample_rate)} < {length}')
        if require_cola:
            analysis, synthesis = self.windows(sample_rate)
            if not signal.check_COLA(analysis * synthesis, length, length - hop, tol=1e-6):
                raise ConfigError(f'COLA条件を満たさない設定です: window={self.window}, '
                                  f'length={length}, hop={hop}')

    def to_dict(self) -> dict:
        return {'window_ms': self.window_length_ms, 'hop_ms': self.hop_length_ms,
                'window': self.window, 'fft_size': self.fft_size}

    @classmethod
    def from_dict(cls, data: dict) -> 'StftConfig':
        return cls(window_length_ms=float(data['window_ms']), hop_length_ms=float(data['hop_ms']),
                   window=data.get('window', config.WINDOW_TYPE), fft_size=data.get('fft_size'))


@dataclass
class ComplexSpectrogram:
    """1チャネルの片側複素スペクトログラム（F × N）"""
    data: np.ndarray
    config: StftConfig
    sample_rate: int
    length: Optional[int] = None  # 元の信号長（逆変換で切り出しに使う）

    @property
    def shape(self):
        return self.data.shape


@dataclass
class MultichannelSpectrogram:
    """I チャネル分の複素スペクトログラム（I × F × N）"""
    data: np.ndarray
    config: StftConfig
    sample_rate: int
    length: Optional[int] = None

    @property
    def channel_count(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]

    @property
    def n_frames(self) -> int:
        return self.data.shape[2]

    def channel(self, index: int) -> ComplexSpectrogram:
        return ComplexSpectrogram(self.data[index], self.config, self.sample_rate, self.length)

    @classmethod
    def stack(cls, specs) -> 'MultichannelSpectrogram':
        first = specs[0]
        return cls(np.stack([s.data for s in specs]), first.config, first.sample_rate, first.length)


@dataclass
class PowerSpectrogram:
    """パワースペクトログラム X = |X̃|^2（F × N, 非負）"""
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if np.any(self.data < 0):
            raise InvalidDataError('パワースペクトログラムに負の値が含まれています')

    @property
    def shape(self):
        return self.data.shape


# ========== WAV入出力 ==========

def load_wav(path) -> AudioBuffer:
    """
    WAVファイルを読み込む（PCM-16 / float32 のみ対応）

    Args:
        path: WAVファイルのパス

    Returns:
        全チャネルを含む AudioBuffer（PCMは [-1, 1) に正規化）
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'ファイルが見つかりません: {path}')
    try:
        info = sf.info(str(path))
    except RuntimeError as e:
        raise AudioFormatError(f'WAVヘッダが不正です: {path}: {e}') from e
    if info.format != 'WAV':
        raise AudioFormatError(f'RIFF/WAVE 形式ではありません: {path} ({info.format})')
    if info.subtype not in SUPPORTED_SUBTYPES:
        raise UnsupportedFormatError(f'未対応のエンコーディングです: {path} ({info.subtype})')
    try:
        data, sample_rate = sf.read(str(path), dtype='float64', always_2d=True)
    except RuntimeError as e:
        raise AudioFormatError(f'WAVデータを読み込めません: {path}: {e}') from e
    return AudioBuffer(data.T.copy(), sample_rate)


def save_wav(buffer: AudioBuffer, path, subtype: str = 'FLOAT'):
    """
    WAVファイルに書き込む（一時ファイル経由で原子的に書き込む）

    Args:
        buffer: 書き込む信号
        path: 出力先
        subtype: 'FLOAT'（float32）or 'PCM_16'
    """
    if subtype not in SUPPORTED_SUBTYPES:
        raise UnsupportedFormatError(f'未対応のエンコーディングです: {subtype}')
    if not np.all(np.isfinite(buffer.samples)):
        raise InvalidDataError(f'NaN/Inf を含む信号は保存できません: {path}')
    stream = io.BytesIO()
    try:
        sf.write(stream, buffer.samples.T, buffer.sample_rate, format='WAV', subtype=subtype)
    except RuntimeError as e:
        raise OSError(f'WAVの書き込みに失敗しました: {path}: {e}') from e
    atomic_write_bytes(path, stream.getvalue())


# ========== STFT ==========

def _frame_layout(length: int, window_length: int, hop: int):
    """パディング量とフレーム数を計算"""
    pad = window_length // 2
    padded = length + 2 * pad
    n_frames = 1 + int(np.ceil(max(padded - window_length, 0) / hop))
    total = (n_frames - 1) * hop + window_length
    return pad, n_frames, total


def stft(buffer, stft_config: StftConfig = StftConfig(), channel: int = 0,
         sample_rate: Optional[int] = None) -> ComplexSpectrogram:
    """
    1チャネルのSTFT

    Args:
        buffer: AudioBuffer または1次元配列（その場合は sample_rate が必須）
        stft_config: STFTの設定
        channel: AudioBuffer のどのチャネルを変換するか
        sample_rate: 1次元配列を渡す場合のサンプリング周波数

    Returns:
        F × N の ComplexSpectrogram（F = fft_size/2 + 1）
    """
    if isinstance(buffer, AudioBuffer):
        x = buffer.channel(channel)
        sample_rate = buffer.sample_rate
    else:
        x = np.asarray(buffer, dtype=np.float64)
        if sample_rate is None:
            raise ConfigError('1次元配列を渡す場合は sample_rate を指定してください')
    stft_config.validate(sample_rate)

    window_length = stft_config.window_length(sample_rate)
    hop = stft_config.hop_length(sample_rate)
    n_fft = stft_config.n_fft(sample_rate)
    if len(x) < window_length:
        raise InsufficientInputError(f'信号が窓長より短いです: {len(x)} < {window_length}')

    pad, n_frames, total = _frame_layout(len(x), window_length, hop)
    padded = np.pad(x, (pad, pad), mode='reflect')
    padded = np.pad(padded, (0, total - len(padded)))

    analysis, _ = stft_config.windows(sample_rate)
    frames = np.lib.stride_tricks.sliding_window_view(padded, window_length)[::hop][:n_frames]
    spectrum = np.fft.rfft(frames * analysis, n=n_fft, axis=1)
    return ComplexSpectrogram(spectrum.T.copy(), stft_config, sample_rate, len(x))


def stft_multichannel(buffer: AudioBuffer, stft_config: StftConfig = StftConfig()) -> MultichannelSpectrogram:
    """全チャネルのSTFTを I × F × N にまとめる"""
    return MultichannelSpectrogram.stack(
        [stft(buffer, stft_config, channel=i) for i in range(buffer.channel_count)])


def istft(spec: ComplexSpectrogram) -> AudioBuffer:
    """
    逆STFT（重畳加算）

    分析窓×合成窓の重畳和で正規化するので、COLA条件を満たす設定では
    内部サンプルを完全に再構成する。

    Args:
        spec: ComplexSpectrogram

    Returns:
        モノラルの AudioBuffer
    """
    cfg = spec.config
    sample_rate = spec.sample_rate
    cfg.validate(sample_rate, require_cola=True)

    window_length = cfg.window_length(sample_rate)
    hop = cfg.hop_length(sample_rate)
    n_fft = cfg.n_fft(sample_rate)
    n_frames = spec.data.shape[1]
    analysis, synthesis = cfg.windows(sample_rate)

    frames = np.fft.irfft(spec.data.T, n=n_fft, axis=1)[:, :window_length] * synthesis
    total = (n_frames - 1) * hop + window_length
    output = np.zeros(total)
    envelope = np.zeros(total)
    product = analysis * synthesis
    for n in range(n_frames):
        start = n * hop
        output[start:start + window_length] += frames[n]
        envelope[start:start + window_length] += product

    nonzero = envelope > config.EPS
    output[nonzero] /= envelope[nonzero]
    output[~nonzero] = 0.0

    pad = window_length // 2
    length = spec.length if spec.length is not None else total - 2 * pad
    return AudioBuffer(output[pad:pad + length], sample_rate)


def istft_multichannel(spec: MultichannelSpectrogram) -> AudioBuffer:
    """I チャネルの逆STFT"""
    channels = [istft(spec.channel(i)).channel(0) for i in range(spec.channel_count)]
    return AudioBuffer.stack(channels, spec.sample_rate)


def power_spectrogram(spec) -> PowerSpectrogram:
    """
    要素ごとの絶対値の2乗

    Args:
        spec: ComplexSpectrogram または複素配列
    """
    data = spec.data if isinstance(spec, (ComplexSpectrogram, MultichannelSpectrogram)) else spec
    return PowerSpectrogram(np.abs(data) ** 2)


def frame_energy_spectral(spec: ComplexSpectrogram) -> np.ndarray:
    """
    片側スペクトルからフレームごとの時間領域エネルギー（窓掛け後）を求める

    全帯域の Parseval の関係 Σ|x_w|^2 = (1/n_fft) Σ|X_k|^2 を片側スペクトルで評価する。
    """
    n_fft = spec.config.n_fft(spec.sample_rate)
    weights = np.full(spec.data.shape[0], 2.0)
    weights[0] = 1.0
    if n_fft % 2 == 0:
        weights[-1] = 1.0
    return (weights[:, np.newaxis] * np.abs(spec.data) ** 2).sum(axis=0) / n_fft
