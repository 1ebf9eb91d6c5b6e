"""
実験設定ファイル
すべてのパラメータをここで一元管理
"""

from dataclasses import dataclass, field, fields, asdict
import json
from pathlib import Path

from errors import ConfigError

# ========== 信号処理の設定 ==========
SAMPLE_RATE = 16000  # Hz
WINDOW_MS = 64.0  # ms, STFT窓長（1024サンプル）
HOP_MS = 32.0  # ms, シフト幅（512サンプル, 50%オーバーラップ）
WINDOW_TYPE = 'sqrt_hann'  # 分析・合成とも平方根ハン窓

# ========== NMFの設定 ==========
K_PER_SPEAKER = 10  # 話者あたりの基底数
ITERATIONS_TRAIN = 1000
ITERATIONS_TEST = 1000
EPS = 1e-12  # 除算・対数・固有値のフロア
INIT_OFFSET = 0.1  # T, V ~ uniform(0,1) + 0.1

# ========== マイクアレイ・音場の設定 ==========
MIC_SPACING = 0.15  # m
SPEED_OF_SOUND = 343.0  # m/s
MIN_SEPARATION_DEG = 20.0  # 話者間の最小角度差
RT60 = 0.28  # s
DRR_DB = 6.0  # 直接音/残響音エネルギー比
UTTERANCE_LENGTH = 1.5  # s
FRACTIONAL_DELAY_TAPS = 32
ANGLE_LIMIT_DEG = 60.0  # 話者位置は ±この角度の範囲でランダムに選ぶ
VELVET_DENSITY = 2000  # 残響テールのパルス密度（個/秒）
TAIL_PREDELAY_MS = 2.0  # 直接音から残響テール開始までの時間
PITCH_RANGE = (70.0, 320.0)  # Hz

# ========== GCC-PHATの設定 ==========
GCC_ALPHA = 3.0  # ピーク閾値 mean + α·std
GCC_MIN_PEAK_DISTANCE = 2  # ラグ（サンプル）
GCC_FRAME_MS = 128.0  # フレーム平均に使うフレーム長

# ========== 評価の設定 ==========
BSS_FILTER_LEN = 512  # 許容歪みフィルタのタップ数
SENTINEL_DB = 200.0  # ±∞ の代わりに出力する値

# ========== 乱数シード設定 ==========
DEFAULT_SEED = 42

# 派生シードのオフセット（utils.derive_seed で使用）
SEED_OFFSETS = {
    'profile': 1000,
    'utterance': 2000,
    'scene': 3000,
    'rir': 4000,
    'train': 5000,
    'test': 6000,
    'blind': 7000,
}

# ========== 実験プリセット設定 ==========
EXPERIMENT_PRESETS = {
    'desk': {
        'name': 'デスクスケール（3学習セット × 10テスト混合）',
        'eval': {'n_training_sets': 3, 'n_test_mixtures': 10},
    },
    'full': {
        'name': '本番スケール（20学習セット × 50テスト混合）',
        'eval': {'n_training_sets': 20, 'n_test_mixtures': 50},
    },
    'smoke': {
        'name': '動作確認用（最小構成）',
        'corpus': {'utterances_train': 1, 'utterance_length': 0.5},
        'model': {'k_per_speaker': 2, 'iterations_train': 5, 'iterations_test': 5},
        'eval': {'n_training_sets': 1, 'n_test_mixtures': 1},
    },
}

DEFAULT_PRESET = 'desk'


def _check(condition: bool, message: str):
    if not condition:
        raise ConfigError(message)


@dataclass
class CorpusConfig:
    """合成話者コーパスの設定"""
    speaker_count: int = 3
    utterances_train: int = 20  # U_tr
    utterances_test: int = 1
    utterance_length: float = UTTERANCE_LENGTH

    def __post_init__(self):
        _check(self.speaker_count >= 1, 'speaker_count は1以上にしてください')
        _check(self.utterances_train >= 1, 'utterances_train は1以上にしてください')
        _check(self.utterances_test >= 1, 'utterances_test は1以上にしてください')
        _check(self.utterance_length > 0, 'utterance_length は正の値にしてください')


@dataclass
class ModelConfig:
    """NMFモデルの設定"""
    k_per_speaker: int = K_PER_SPEAKER
    iterations_train: int = ITERATIONS_TRAIN
    iterations_test: int = ITERATIONS_TEST
    assignment: str = 'fixed'  # 'fixed'（二値Z）or 'argmax'（自由なZ）

    def __post_init__(self):
        _check(self.k_per_speaker >= 1, 'k_per_speaker は1以上にしてください')
        _check(self.iterations_train >= 1, 'iterations_train は1以上にしてください')
        _check(self.iterations_test >= 1, 'iterations_test は1以上にしてください')
        _check(self.assignment in ('fixed', 'argmax'),
               f"assignment は 'fixed' か 'argmax' です: {self.assignment}")


@dataclass
class StftSection:
    window_ms: float = WINDOW_MS
    hop_ms: float = HOP_MS

    def __post_init__(self):
        _check(self.window_ms > 0 and self.hop_ms > 0, 'STFTの窓長・シフト幅は正の値にしてください')
        _check(self.hop_ms <= self.window_ms, 'hop_ms は window_ms 以下にしてください')


@dataclass
class SceneSection:
    """音場シミュレーションの設定"""
    sample_rate: int = SAMPLE_RATE
    mic_spacing: float = MIC_SPACING
    speed_of_sound: float = SPEED_OF_SOUND
    min_separation: float = MIN_SEPARATION_DEG
    rt60: float = RT60
    drr_db: float = DRR_DB

    def __post_init__(self):
        _check(self.sample_rate > 0, 'sample_rate は正の値にしてください')
        _check(self.mic_spacing > 0, 'mic_spacing は正の値にしてください')
        _check(self.speed_of_sound > 0, 'speed_of_sound は正の値にしてください')
        _check(0 <= self.min_separation < 180, 'min_separation は 0〜180 度です')
        _check(0 <= self.rt60 < 2, 'rt60 は 0 以上 2 秒未満にしてください')


@dataclass
class DoaSection:
    alpha: float = GCC_ALPHA
    min_peak_distance: int = GCC_MIN_PEAK_DISTANCE
    frame_ms: float = GCC_FRAME_MS

    def __post_init__(self):
        _check(self.alpha >= 0, 'alpha は0以上にしてください')
        _check(self.min_peak_distance >= 1, 'min_peak_distance は1以上にしてください')
        _check(self.frame_ms > 0, 'frame_ms は正の値にしてください')


@dataclass
class EvalSection:
    n_test_mixtures: int = 10
    n_training_sets: int = 3
    bss_filter_len: int = BSS_FILTER_LEN

    def __post_init__(self):
        _check(self.n_test_mixtures >= 1, 'n_test_mixtures は1以上にしてください')
        _check(self.n_training_sets >= 1, 'n_training_sets は1以上にしてください')
        _check(self.bss_filter_len >= 1, 'bss_filter_len は1以上にしてください')


_SECTIONS = {
    'corpus': CorpusConfig,
    'model': ModelConfig,
    'stft': StftSection,
    'scene': SceneSection,
    'doa': DoaSection,
    'eval': EvalSection,
}


@dataclass
class ExperimentConfig:
    """実験全体の設定（JSONと相互変換可能）"""
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stft: StftSection = field(default_factory=StftSection)
    scene: SceneSection = field(default_factory=SceneSection)
    doa: DoaSection = field(default_factory=DoaSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = DEFAULT_SEED

    @classmethod
    def from_dict(cls, data: dict) -> 'ExperimentConfig':
        """
        辞書から設定を生成（未知のキーはエラー）

        Args:
            data: JSONから読み込んだ辞書

        Returns:
            ExperimentConfig
        """
        if not isinstance(data, dict):
            raise ConfigError('設定はJSONオブジェクトである必要があります')
        unknown = set(data) - set(_SECTIONS) - {'seed'}
        if unknown:
            raise ConfigError(f'未知の設定項目: {sorted(unknown)}')

        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f'{name} はオブジェクトである必要があります')
            allowed = {f.name for f in fields(section_cls)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f'{name} の未知の設定項目: {sorted(bad)}')
            try:
                kwargs[name] = section_cls(**section)
            except TypeError as e:
                raise ConfigError(f'{name} の設定が不正です: {e}') from e
        seed = data.get('seed', DEFAULT_SEED)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError(f'seed は0以上の整数にしてください: {seed}')
        return cls(seed=seed, **kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path) -> 'ExperimentConfig':
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except FileNotFoundError as e:
            raise ConfigError(f'設定ファイルが見つかりません: {path}') from e
        except json.JSONDecodeError as e:
            raise ConfigError(f'設定ファイルのJSONが不正です: {path}: {e}') from e
        return cls.from_dict(data)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False), encoding='utf-8')

    def with_overrides(self, overrides: dict) -> 'ExperimentConfig':
        """
        セクション単位で値を上書きした新しい設定を返す

        Args:
            overrides: {'model': {'k_per_speaker': 15}} のような辞書
        """
        data = self.to_dict()
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return ExperimentConfig.from_dict(data)


def preset_config(preset: str = DEFAULT_PRESET, seed: int = DEFAULT_SEED) -> ExperimentConfig:
    """
    プリセット名から設定を生成

    Args:
        preset: EXPERIMENT_PRESETS のキー
        seed: 乱数シード
    """
    if preset not in EXPERIMENT_PRESETS:
        raise ConfigError(f'未知のプリセット: {preset}（{list(EXPERIMENT_PRESETS)}）')
    overrides = {k: v for k, v in EXPERIMENT_PRESETS[preset].items() if k != 'name'}
    overrides['seed'] = seed
    return ExperimentConfig().with_overrides(overrides)
