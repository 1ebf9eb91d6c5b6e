"""
ユーティリティ関数
乱数生成、シード派生、ログ設定、ファイルの原子的書き込みなど
"""

import logging
import os
import tempfile
from pathlib import Path
from typing import List

import numpy as np

import config


class RandomGenerator:
    """シードベースの乱数生成器"""

    def __init__(self, seed: int = config.DEFAULT_SEED):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def shuffle(self, arr: List) -> List:
        """配列をシャッフル（元の配列は変更しない）"""
        arr_copy = list(arr)
        self.rng.shuffle(arr_copy)
        return arr_copy

    def choice(self, arr, size: int = None, replace: bool = True, p=None) -> np.ndarray:
        """重み付きランダム選択"""
        return self.rng.choice(arr, size=size, replace=replace, p=p)

    def positive_matrix(self, shape, offset: float = config.INIT_OFFSET) -> np.ndarray:
        """
        NMFの初期値用の正値行列 uniform(0,1) + offset

        Args:
            shape: 行列の形状
            offset: 下限オフセット
        """
        return self.rng.uniform(0.0, 1.0, size=shape) + offset


def derive_seed(seed: int, tag: str, index: int = 0) -> int:
    """
    グローバルシードから各モジュール用のシードを固定オフセットで派生

    Args:
        seed: グローバルシード
        tag: config.SEED_OFFSETS のキー
        index: 同じ用途内での通し番号
    """
    return int(seed) * 100003 + config.SEED_OFFSETS[tag] + int(index)


def floor(x, eps: float = config.EPS):
    """ε でフロアした値を返す"""
    return np.maximum(x, eps)


def setup_logging(verbosity: int = 0):
    """
    CLI用のログ設定

    Args:
        verbosity: 0=WARNING, 1=INFO, 2以上=DEBUG
    """
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(
        level=level,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        datefmt='%H:%M:%S',
    )
    logging.captureWarnings(True)


def atomic_write_bytes(path, data: bytes):
    """
    一時ファイルに書いてからリネームする（途中で落ちても壊れたファイルを残さない）

    Args:
        path: 書き込み先
        data: 書き込むバイト列
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode('utf-8'))
