"""
音場シミュレーション
話者らしい合成音声、角度に応じた室内インパルス応答（分数遅延+残響テール）、
2チャネルの畳み込み混合を生成する
"""

from dataclasses import dataclass, field
import json
import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence
import warnings

import numpy as np
from scipy.signal import fftconvolve, get_window, lfilter

import config
from audio import AudioBuffer, load_wav, save_wav
from doa import MicArrayGeometry
from errors import ConfigError, InsufficientInputError, InvalidDataError
from utils import RandomGenerator, atomic_write_text, derive_seed

logger = logging.getLogger(__name__)

SCENE_FORMAT_VERSION = 1
CLIP_LEVEL = 0.99
RAMP_SECONDS = 0.005  # 立ち上がり・立ち下がり


@dataclass
class SyntheticSpeakerProfile:
    """
    合成話者の声の特徴

    formants と bandwidths は同じ長さ（Hz）。voicing は有声成分の割合、
    intonation は単語ごとのピッチ変動の大きさ（比率）。
    """
    pitch: float
    formants: List[float]
    bandwidths: List[float]
    voicing: float = 0.85
    intonation: float = 0.03
    label: str = ''
    seed: int = 0

    def __post_init__(self):
        low, high = config.PITCH_RANGE
        if not low <= self.pitch <= high:
            raise ConfigError(f'pitch は {low}〜{high} Hz です: {self.pitch}')
        if len(self.formants) == 0 or len(self.formants) != len(self.bandwidths):
            raise ConfigError('formants と bandwidths は同じ長さ（1以上）にしてください')
        if np.any(np.diff(self.formants) <= 0):
            raise ConfigError(f'formants は狭義単調増加です: {self.formants}')
        if any(b <= 0 for b in self.bandwidths):
            raise ConfigError('bandwidths は正の値です')
        if not 0.0 <= self.voicing <= 1.0:
            raise ConfigError(f'voicing は 0〜1 です: {self.voicing}')
        if self.intonation < 0:
            raise ConfigError('intonation は0以上です')

    def to_dict(self) -> dict:
        return {'pitch': self.pitch, 'formants': list(self.formants), 'bandwidths': list(self.bandwidths),
                'voicing': self.voicing, 'intonation': self.intonation, 'label': self.label,
                'seed': self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> 'SyntheticSpeakerProfile':
        return cls(**data)


@dataclass
class SceneConfig:
    """1つのシーンの設定"""
    s_count: int
    angles: List[float]  # 度
    geometry: MicArrayGeometry = field(default_factory=MicArrayGeometry)
    min_separation: float = config.MIN_SEPARATION_DEG
    rt60: float = config.RT60
    drr_db: float = config.DRR_DB
    utterance_length: float = config.UTTERANCE_LENGTH
    utterances: int = 1  # 話者ごとに連結する発話数
    seed: int = config.DEFAULT_SEED

    def __post_init__(self):
        self.angles = [float(a) for a in self.angles]
        if self.s_count < 1 or len(self.angles) != self.s_count:
            raise ConfigError(f'angles の数 {len(self.angles)} が s_count={self.s_count} と一致しません')
        if any(abs(a) > 90 for a in self.angles):
            raise ConfigError(f'角度は ±90 度以内です: {self.angles}')
        for i in range(self.s_count):
            for j in range(i + 1, self.s_count):
                if abs(self.angles[i] - self.angles[j]) < self.min_separation - 1e-9:
                    raise ConfigError(f'話者間の角度差が {self.min_separation} 度未満です: {self.angles}')
        if not 0 <= self.rt60 < 2:
            raise ConfigError(f'rt60 は 0 以上 2 秒未満です: {self.rt60}')
        if self.utterance_length <= 0 or self.utterances < 1:
            raise ConfigError('utterance_length は正、utterances は1以上です')

    def to_dict(self) -> dict:
        return {
            's_count': self.s_count, 'angles': self.angles, 'min_separation': self.min_separation,
            'rt60': self.rt60, 'drr_db': self.drr_db, 'utterance_length': self.utterance_length,
            'utterances': self.utterances, 'seed': self.seed,
            'geometry': {'spacing': self.geometry.spacing, 'speed_of_sound': self.geometry.speed_of_sound,
                         'sample_rate': self.geometry.sample_rate},
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'SceneConfig':
        data = dict(data)
        geometry = MicArrayGeometry(**data.pop('geometry'))
        return cls(geometry=geometry, **data)


@dataclass
class SceneOutput:
    mixture: AudioBuffer
    source_images: List[AudioBuffer]
    dry_sources: List[AudioBuffer]
    true_angles: List[float]
    true_tdoas: List[float]
    labels: List[str]
    config: SceneConfig
    gain: float = 1.0  # クリッピング回避で掛けた倍率


# ========== 話者の生成 ==========

def random_profile(seed: int, label: str = '', pitch: Optional[float] = None) -> SyntheticSpeakerProfile:
    """
    乱数で合成話者を作る

    Args:
        seed: 乱数シード
        label: 話者ラベル
        pitch: 基本周波数（None の場合は乱数）
    """
    rng = RandomGenerator(seed).rng
    if pitch is None:
        pitch = rng.uniform(90.0, 260.0)
    # 声道長の違いをフォルマント全体の倍率で表す
    tract = rng.uniform(0.85, 1.2)
    formants = [rng.uniform(350, 850), rng.uniform(1000, 2100), rng.uniform(2400, 3300)]
    formants = [f * tract for f in formants]
    bandwidths = list(rng.uniform(60.0, 160.0, size=3))
    return SyntheticSpeakerProfile(pitch=float(pitch), formants=formants, bandwidths=bandwidths,
                                   voicing=float(rng.uniform(0.7, 0.95)), label=label, seed=seed)


def speaker_profiles(count: int, seed: int) -> List[SyntheticSpeakerProfile]:
    """
    互いに区別しやすい合成話者を count 人作る（ピッチを対数軸上で散らす）

    Args:
        count: 話者数
        seed: グローバルシード
    """
    rng = RandomGenerator(derive_seed(seed, 'profile'))
    grid = np.geomspace(90.0, 260.0, count) if count > 1 else np.array([150.0])
    pitches = rng.shuffle(list(grid * rng.rng.uniform(0.95, 1.05, size=count)))
    return [random_profile(derive_seed(seed, 'profile', j + 1), label=f'spk{j:02d}', pitch=p)
            for j, p in enumerate(pitches)]


def _resonator(frequency: float, bandwidth: float, sample_rate: int):
    r = math.exp(-math.pi * bandwidth / sample_rate)
    theta = 2 * math.pi * frequency / sample_rate
    return [1.0 - r], [1.0, -2.0 * r * math.cos(theta), r * r]


def _word_envelope(n: int, rng: np.random.Generator) -> np.ndarray:
    """2〜5個の「単語」のまとまりに分ける振幅包絡"""
    n_words = int(rng.integers(2, 6))
    weights = rng.uniform(0.6, 1.4, size=2 * n_words + 1)
    weights[0::2] *= 0.35  # 無音区間は短め
    bounds = np.round(np.concatenate([[0], np.cumsum(weights)]) / weights.sum() * n).astype(int)
    envelope = np.zeros(n)
    for w in range(n_words):
        start, end = bounds[2 * w + 1], bounds[2 * w + 2]
        if end - start > 2:
            envelope[start:end] = get_window(('tukey', 0.3), end - start) * rng.uniform(0.6, 1.0)
    return envelope


def synth_utterance(profile: SyntheticSpeakerProfile, length: float, seed: int,
                    sample_rate: int = config.SAMPLE_RATE) -> AudioBuffer:
    """
    話者らしい合成音声を生成

    声門パルス列（プロファイルのピッチ）+ 雑音をフォルマント共振器で整形し、
    単語のまとまりに振幅変調する。同じシードなら同じ出力。

    Args:
        profile: 合成話者
        length: 長さ（秒）
        seed: 乱数シード
        sample_rate: サンプリング周波数

    Returns:
        1チャネルの AudioBuffer（RMS 0.1）
    """
    if length <= 0:
        raise ConfigError(f'length は正の値です: {length}')
    rng = RandomGenerator(seed).rng
    n = max(int(round(length * sample_rate)), 1)
    envelope = _word_envelope(n, rng)

    # 単語ごとにピッチを少し変える（イントネーション）
    word_index = np.cumsum(np.abs(np.diff(np.concatenate([[0.0], (envelope > 0).astype(float)]))))
    offsets = rng.uniform(-1.0, 1.0, size=int(word_index.max()) + 1) * profile.intonation
    f0 = profile.pitch * (1.0 + offsets[word_index.astype(int)])
    phase = np.cumsum(f0 / sample_rate) + rng.uniform()
    pulses = np.diff(np.floor(phase), prepend=np.floor(phase[0])).astype(float)
    pulses = lfilter([1.0], [1.0, -0.9], pulses)  # 声門波のスペクトル傾斜

    noise = rng.standard_normal(n)
    excitation = (profile.voicing * pulses / max(np.std(pulses), 1e-12)
                  + (1.0 - profile.voicing) * noise)

    shaped = excitation
    for frequency, bandwidth in zip(profile.formants, profile.bandwidths):
        b, a = _resonator(frequency, bandwidth, sample_rate)
        shaped = lfilter(b, a, shaped)

    signal_out = shaped * envelope
    ramp = min(int(RAMP_SECONDS * sample_rate), n // 2)
    if ramp > 0:
        signal_out[:ramp] *= np.linspace(0, 1, ramp)
        signal_out[-ramp:] *= np.linspace(1, 0, ramp)
    rms = np.sqrt(np.mean(signal_out ** 2))
    if rms > 0:
        signal_out = 0.1 * signal_out / rms
    return AudioBuffer(signal_out, sample_rate)


def synth_utterances(profile: SyntheticSpeakerProfile, count: int, length: float, seed: int,
                     sample_rate: int = config.SAMPLE_RATE) -> AudioBuffer:
    """count 個の発話を連結した信号（発話ごとに派生シード）"""
    parts = [synth_utterance(profile, length, derive_seed(seed, 'utterance', u), sample_rate).samples[0]
             for u in range(count)]
    return AudioBuffer(np.concatenate(parts), sample_rate)


# ========== 室内インパルス応答 ==========

def fractional_delay_filter(delay: float, length: int, taps: int = config.FRACTIONAL_DELAY_TAPS) -> np.ndarray:
    """
    窓付き sinc による分数遅延フィルタ（直流ゲイン1）

    Args:
        delay: 遅延（サンプル）
        length: 出力の長さ
        taps: sinc のタップ数
    """
    h = np.zeros(length)
    center = int(math.floor(delay))
    n = np.arange(center - taps // 2 + 1, center + taps // 2 + 1)
    n = n[(n >= 0) & (n < length)]
    offset = n - delay
    window = 0.5 * (1.0 + np.cos(np.pi * offset / (taps / 2)))
    values = np.sinc(offset) * window
    h[n] = values / values.sum()
    return h


def _velvet_tail(length: int, rt60: float, sample_rate: int, rng: RandomGenerator) -> np.ndarray:
    """±1 のまばらなパルス列に −60 dB / rt60 の指数減衰を掛けた残響テール"""
    spacing = max(int(sample_rate / config.VELVET_DENSITY), 1)
    tail = np.zeros(length)
    starts = np.arange(0, length, spacing)
    positions = np.minimum(starts + rng.rng.integers(0, spacing, size=len(starts)), length - 1)
    tail[positions] = rng.choice([-1.0, 1.0], size=len(starts))
    t = np.arange(length) / sample_rate
    return tail * np.exp(-np.log(1000.0) * t / rt60)


def generate_rir(angle: float, scene_config: SceneConfig, index: int = 0) -> np.ndarray:
    """
    角度に応じた2マイクの室内インパルス応答

    直接音は分数遅延（マイク1は base − tdoa/2, マイク2は base + tdoa/2）、
    残響は全マイク共通のテールを各マイクの遅延だけずらして加える（DRR で音量を合わせる）。

    Args:
        angle: 到来角（度, |angle| ≤ 90）
        scene_config: シーン設定（rt60, drr_db, geometry, seed）
        index: 同じシーン内の話者番号（残響テールのシード）

    Returns:
        2 × L のインパルス応答
    """
    if abs(angle) > 90:
        raise ConfigError(f'角度は ±90 度以内です: {angle}')
    geometry = scene_config.geometry
    sr = geometry.sample_rate
    taps = config.FRACTIONAL_DELAY_TAPS
    tdoa_samples = geometry.tdoa_of_angle(angle) * sr
    base = taps // 2 + math.ceil(geometry.max_lag / 2) + 1
    delays = [base - tdoa_samples / 2, base + tdoa_samples / 2]

    predelay = int(round(config.TAIL_PREDELAY_MS * 1e-3 * sr))
    tail_length = int(math.ceil(scene_config.rt60 * sr)) if scene_config.rt60 > 0 else 0
    length = base + geometry.max_lag + taps + predelay + tail_length
    rir = np.stack([fractional_delay_filter(d, length, taps) for d in delays])

    if tail_length > 0:
        rng = RandomGenerator(derive_seed(scene_config.seed, 'rir', index))
        tail = _velvet_tail(tail_length, scene_config.rt60, sr, rng)
        direct_energy = np.sum(rir[0] ** 2)
        tail *= np.sqrt(direct_energy / (np.sum(tail ** 2) * 10 ** (scene_config.drr_db / 10)))
        for mic, d in enumerate(delays):
            start = int(round(d)) + predelay
            rir[mic, start:start + tail_length] += tail[:length - start]
    return rir


# ========== シーン ==========

def random_angles(s_count: int, min_separation: float, rng: RandomGenerator,
                  limit: float = config.ANGLE_LIMIT_DEG, max_tries: int = 10000) -> List[float]:
    """
    ±limit 度の範囲で互いに min_separation 度以上離れた角度を選ぶ

    Raises:
        ConfigError: 条件を満たす配置が存在しない・見つからない場合
    """
    if (s_count - 1) * min_separation > 2 * limit:
        raise ConfigError(f'{s_count} 人を {min_separation} 度以上離して ±{limit} 度に配置できません')
    for _ in range(max_tries):
        angles = np.round(rng.rng.uniform(-limit, limit, size=s_count), 2)
        if s_count == 1 or np.diff(np.sort(angles)).min() >= min_separation:
            return [float(a) for a in angles]
    raise ConfigError('角度の配置が見つかりませんでした')


def simulate_scene(profiles: Sequence[SyntheticSpeakerProfile], scene_config: SceneConfig,
                   dry_sources: Optional[Sequence[AudioBuffer]] = None) -> SceneOutput:
    """
    各話者の発話をインパルス応答で畳み込んで足し合わせた2チャネル混合を作る

    Args:
        profiles: 話者ごとのプロファイル（s_count 人）
        scene_config: シーン設定
        dry_sources: 使う発話（None の場合はプロファイルから合成）

    Returns:
        SceneOutput（mixture は source_images の和と厳密に一致）
    """
    if len(profiles) != scene_config.s_count:
        raise InsufficientInputError(f'プロファイル数 {len(profiles)} が s_count={scene_config.s_count} と一致しません')
    sr = scene_config.geometry.sample_rate
    if dry_sources is None:
        dry_sources = [synth_utterances(p, scene_config.utterances, scene_config.utterance_length,
                                        derive_seed(scene_config.seed, 'scene', s), sr)
                       for s, p in enumerate(profiles)]
    length = min(d.length for d in dry_sources)

    images = []
    for s, dry in enumerate(dry_sources):
        rir = generate_rir(scene_config.angles[s], scene_config, index=s)
        image = np.stack([fftconvolve(dry.samples[0][:length], rir[mic])[:length] for mic in range(2)])
        images.append(image)

    mixture = np.sum(np.stack(images), axis=0)
    gain = 1.0
    peak = np.max(np.abs(mixture))
    if peak > CLIP_LEVEL:
        gain = CLIP_LEVEL / peak
        warnings.warn(f'混合がクリップするため全体に {gain:.3f} 倍を掛けます')
        images = [image * gain for image in images]
        mixture = np.sum(np.stack(images), axis=0)

    geometry = scene_config.geometry
    return SceneOutput(
        mixture=AudioBuffer(mixture, sr),
        source_images=[AudioBuffer(image, sr) for image in images],
        dry_sources=[AudioBuffer(d.samples[0][:length], sr) for d in dry_sources],
        true_angles=list(scene_config.angles),
        true_tdoas=[geometry.tdoa_of_angle(a) for a in scene_config.angles],
        labels=[p.label for p in profiles],
        config=scene_config,
        gain=gain,
    )


def save_scene(scene: SceneOutput, directory, profiles: Sequence[SyntheticSpeakerProfile] = ()) -> Path:
    """
    シーンを WAV（mixture, 音源像, ドライ音源）と JSON マニフェストで保存

    Returns:
        マニフェストのパス
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_wav(scene.mixture, directory / 'mixture.wav')
    images, drys = [], []
    for s in range(len(scene.source_images)):
        save_wav(scene.source_images[s], directory / f'image_{s}.wav')
        save_wav(scene.dry_sources[s], directory / f'dry_{s}.wav')
        images.append(f'image_{s}.wav')
        drys.append(f'dry_{s}.wav')
    manifest = {
        'format_version': SCENE_FORMAT_VERSION,
        'config': scene.config.to_dict(),
        'labels': list(scene.labels),
        'true_angles': list(scene.true_angles),
        'true_tdoas': list(scene.true_tdoas),
        'gain': scene.gain,
        'profiles': [p.to_dict() for p in profiles],
        'files': {'mixture': 'mixture.wav', 'images': images, 'dry': drys},
    }
    path = directory / 'manifest.json'
    atomic_write_text(path, json.dumps(manifest, indent=2, ensure_ascii=False))
    return path


def load_scene(directory) -> SceneOutput:
    """save_scene で保存したシーンを読み込む（ステムが無い場合は InsufficientInputError）"""
    directory = Path(directory)
    path = directory / 'manifest.json'
    if not path.exists():
        raise InsufficientInputError(f'シーンのマニフェストがありません: {path}')
    try:
        manifest = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise InvalidDataError(f'マニフェストのJSONが不正です: {path}: {e}') from e

    files = manifest['files']
    for name in [files['mixture']] + files['images'] + files['dry']:
        if not (directory / name).exists():
            raise InsufficientInputError(f'ステムがありません: {directory / name}')
    return SceneOutput(
        mixture=load_wav(directory / files['mixture']),
        source_images=[load_wav(directory / f) for f in files['images']],
        dry_sources=[load_wav(directory / f) for f in files['dry']],
        true_angles=list(manifest['true_angles']),
        true_tdoas=list(manifest['true_tdoas']),
        labels=list(manifest['labels']),
        config=SceneConfig.from_dict(manifest['config']),
        gain=float(manifest.get('gain', 1.0)),
    )
