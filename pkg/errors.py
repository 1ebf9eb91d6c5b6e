"""
例外クラス定義
CLIの終了コード（1: 使用法/設定, 2: データ, 3: 数値計算）を各例外に持たせる
"""


class SeparationError(Exception):
    """本リポジトリの全例外の基底クラス"""

    exit_code = 2


class ConfigError(SeparationError):
    """設定値・引数の不整合"""

    exit_code = 1


class AudioFormatError(SeparationError):
    """WAVヘッダの破損"""


class UnsupportedFormatError(AudioFormatError):
    """PCM-16 / float32 以外のエンコーディング"""


class InvalidDataError(SeparationError):
    """NaN/Inf、空の入力など、値として不正なデータ"""


class InsufficientInputError(SeparationError):
    """窓長より短い信号など、処理に足りない入力"""


class ShapeError(SeparationError):
    """行列の次元不一致"""


class DomainError(SeparationError):
    """負の入力など、定義域外の値"""


class InvalidLabelError(SeparationError):
    """ライブラリに存在しない話者ラベル"""


class UndefinedMetricError(SeparationError):
    """参照信号のエネルギーが0で評価指標が定義できない"""


class NumericalError(SeparationError):
    """固有値分解の失敗・特異行列など"""

    exit_code = 3


class RankWarning(UserWarning):
    """基底数が min(F, N) を超えるなど、階数削減になっていない"""
