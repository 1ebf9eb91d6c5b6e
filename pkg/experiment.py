"""
多チャネル NMF による音源分離と話者識別の実験
サブコマンド: simulate / train / test / evaluate / sweep / scenarios / separation

使い方:
    python experiment.py simulate --out corpus
    python experiment.py train --corpus corpus --out models
    python experiment.py test --corpus corpus --library models --out results
    python experiment.py evaluate --corpus corpus --results results --out results/metrics.csv
"""

import argparse
from datetime import datetime
from functools import partial
import json
import logging
from pathlib import Path
import sys
import warnings

import numpy as np
import pandas as pd

import config
from analysis import METRIC_COLUMNS, print_summary, summarize, warn_partial
from audio import load_wav, save_wav
from config import ExperimentConfig, preset_config
from errors import ConfigError, InsufficientInputError, InvalidDataError, SeparationError
from multichannel_nmf import save_checkpoint
from nmf import Library
from pipeline import (
    SceneResult,
    make_training_set,
    parallel_map,
    run_joint_test,
    run_scenarios,
    run_separation,
    run_sweep,
    scenario_table,
    score_scene,
    separation_table,
    test_scene,
    train_joint,
    training_scene,
)
from doa import DoaEstimate
from scene import load_scene, save_scene
from utils import atomic_write_text, derive_seed, setup_logging

logger = logging.getLogger(__name__)

CORPUS_MANIFEST = 'corpus.json'
MONOTONE_TOLERANCE = 1e-7


# ========== ファイル配置 ==========

def set_dir(root, index: int) -> Path:
    return Path(root) / f'set_{index:02d}'


def test_dir(root, index: int, m: int) -> Path:
    return set_dir(root, index) / f'test_{m:03d}'


def _write_json(path, data):
    atomic_write_text(path, json.dumps(data, indent=2, ensure_ascii=False))


def _read_corpus(corpus_dir) -> dict:
    path = Path(corpus_dir) / CORPUS_MANIFEST
    if not path.exists():
        raise InsufficientInputError(f'コーパスのマニフェストがありません: {path}（先に simulate を実行してください）')
    try:
        return json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise InvalidDataError(f'コーパスのマニフェストが不正です: {path}: {e}') from e


# ========== サブコマンド ==========

def _simulate_set(cfg: ExperimentConfig, out_dir: Path, index: int) -> dict:
    training_set = make_training_set(cfg, index)
    save_scene(training_scene(cfg, training_set), set_dir(out_dir, index) / 'train', training_set.profiles)
    tests = []
    for m in range(cfg.eval.n_test_mixtures):
        save_scene(test_scene(cfg, training_set, m), test_dir(out_dir, index, m), training_set.profiles)
        tests.append(test_dir(out_dir, index, m).name)
    return {'index': index, 'labels': training_set.labels, 'train': 'train', 'tests': tests}


def cmd_simulate(cfg: ExperimentConfig, out_dir, jobs: int = 1) -> Path:
    """
    学習用混合とテスト混合を合成して WAV + JSON で保存

    Returns:
        コーパスのマニフェストのパス
    """
    out_dir = Path(out_dir)
    sets = parallel_map(partial(_simulate_set, cfg, out_dir), range(cfg.eval.n_training_sets), jobs,
                        desc='シーン合成')
    path = out_dir / CORPUS_MANIFEST
    _write_json(path, {'config': cfg.to_dict(), 'sets': sets})

    print('\n=== コーパス合成 ===')
    print(f'学習セット: {len(sets)}, テスト混合: {sum(len(s["tests"]) for s in sets)}')
    print(f'保存先: {out_dir}')
    return path


def _train_set(cfg: ExperimentConfig, corpus_dir: Path, out_dir: Path, entry: dict) -> dict:
    index = entry['index']
    scene = load_scene(set_dir(corpus_dir, index) / entry['train'])
    library, result = train_joint(cfg, scene, derive_seed(cfg.seed, 'train', index))

    directory = set_dir(out_dir, index)
    library.save(directory / 'library.json')
    save_checkpoint(result.model, directory)
    log = np.asarray(result.model.divergence_log, dtype=float)
    steps = np.diff(log) / np.maximum(np.abs(log[:-1]), config.EPS) if len(log) > 1 else np.zeros(0)
    report = {
        'index': index,
        'labels': library.speaker_ids,
        'k_total': library.k_total,
        'iterations': result.model.iterations_done,
        'divergence_first': float(log[0]) if len(log) else None,
        'divergence_last': float(log[-1]) if len(log) else None,
        'max_relative_increase': float(steps.max()) if len(steps) else 0.0,
        'monotone': bool(np.all(steps <= MONOTONE_TOLERANCE)),
    }
    _write_json(directory / 'divergence.json', {**report, 'divergence_log': log.tolist()})
    return report


def cmd_train(cfg: ExperimentConfig, corpus_dir, out_dir, jobs: int = 1) -> list:
    """
    学習用混合ごとにライブラリを学習

    set_XX/library.json, set_XX/model.*（チェックポイント）, set_XX/divergence.json を書き出す
    """
    corpus_dir, out_dir = Path(corpus_dir), Path(out_dir)
    corpus = _read_corpus(corpus_dir)
    reports = parallel_map(partial(_train_set, cfg, corpus_dir, out_dir), corpus['sets'], jobs, desc='学習')

    print('\n=== ライブラリ学習 ===')
    for r in reports:
        mark = '単調減少' if r['monotone'] else f'増加あり（最大 {r["max_relative_increase"]:.2e}）'
        print(f'set {r["index"]:02d}: K_tot={r["k_total"]}, D: {r["divergence_first"]:.4g} → '
              f'{r["divergence_last"]:.4g} ({mark})')
    return reports


def _test_set(cfg: ExperimentConfig, corpus_dir: Path, library_dir: Path, out_dir: Path, entry: dict) -> dict:
    index = entry['index']
    library_path = set_dir(library_dir, index) / 'library.json'
    if not library_path.exists():
        raise InsufficientInputError(f'ライブラリがありません: {library_path}（先に train を実行してください）')
    library = Library.load(library_path)

    excluded = 0
    for m, name in enumerate(entry['tests']):
        scene = load_scene(set_dir(corpus_dir, index) / name)
        scene_id = f'set{index:02d}_{name}'
        result = run_joint_test(cfg, library, scene, scene_id, index,
                                derive_seed(cfg.seed, 'test', index * 10000 + m))
        directory = set_dir(out_dir, index) / name
        directory.mkdir(parents=True, exist_ok=True)
        for s, buffer in enumerate(result.separated):
            save_wav(buffer, directory / f'sep_{s}.wav')
        _write_json(directory / 'assignments.json', result.to_dict())
        excluded += int(result.excluded)
    return {'index': index, 'total': len(entry['tests']), 'excluded': excluded}


def cmd_test(cfg: ExperimentConfig, corpus_dir, library_dir, out_dir, jobs: int = 1) -> dict:
    """
    テスト混合ごとに同時推定を行い、割り当てと分離音を保存

    Returns:
        {'total': シーン数, 'excluded': 除外数, 'sets': 学習セットごとの内訳}
    """
    corpus_dir, library_dir, out_dir = Path(corpus_dir), Path(library_dir), Path(out_dir)
    corpus = _read_corpus(corpus_dir)
    per_set = parallel_map(partial(_test_set, cfg, corpus_dir, library_dir, out_dir), corpus['sets'], jobs,
                           desc='テスト')
    report = {'total': sum(r['total'] for r in per_set), 'excluded': sum(r['excluded'] for r in per_set),
              'sets': per_set}
    _write_json(out_dir / 'test_report.json', report)

    print('\n=== テスト ===')
    print(f'シーン数: {report["total"]}, 音源数推定の失敗で除外: {report["excluded"]}')
    return report


def _load_scene_result(directory: Path) -> SceneResult:
    data = json.loads((directory / 'assignments.json').read_text(encoding='utf-8'))
    result = SceneResult(data['scene'], data['training_set'], data['scene_seed'],
                         DoaEstimate.from_dict(data['doa']), excluded=data['excluded'],
                         assignments=data['assignments'], truth=data['truth'],
                         true_indices=data['true_indices'])
    if not result.excluded:
        result.separated = [load_wav(directory / f'sep_{s}.wav') for s in range(len(result.assignments))]
    return result


def cmd_evaluate(cfg: ExperimentConfig, corpus_dir, results_dir, out_csv) -> dict:
    """
    分離音を正解の音源像と比較し、識別結果と合わせて CSV と要約を書き出す

    結果が一部しかない場合は揃っている分だけ評価する（警告を出す）。
    """
    corpus_dir, results_dir = Path(corpus_dir), Path(results_dir)
    corpus = _read_corpus(corpus_dir)
    rows, expected, found, excluded = [], 0, 0, 0
    labels = []
    for entry in corpus['sets']:
        labels = entry['labels']
        for name in entry['tests']:
            expected += 1
            directory = set_dir(results_dir, entry['index']) / name
            if not (directory / 'assignments.json').exists():
                continue
            found += 1
            result = _load_scene_result(directory)
            excluded += int(result.excluded)
            rows.extend(score_scene(cfg, load_scene(set_dir(corpus_dir, entry['index']) / name), result))
    warn_partial(expected, found)
    if not rows:
        raise InsufficientInputError(f'評価できる結果がありません: {results_dir}')

    metrics = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_csv, metrics.to_csv(index=False))

    summary = print_summary(metrics, chance=1.0 / len(labels), excluded=excluded)
    summary.update({'scenes': expected, 'scored': found - excluded, 'excluded': excluded})
    per_set = summarize(metrics).iloc[0].to_dict()
    summary.update({k: float(v) for k, v in per_set.items()})
    _write_json(out_csv.with_name(out_csv.stem + '_summary.json'), summary)
    return summary


def cmd_sweep(cfg: ExperimentConfig, parameter: str, values, out_csv, jobs: int = 1) -> pd.DataFrame:
    """K または U_tr を変えたときの正解率の表を書き出す"""
    table = run_sweep(cfg, parameter, values, jobs)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_csv, table.to_csv(index=False))

    print(f'\n=== {parameter} の影響 ===')
    for _, row in table.iterrows():
        if row['error']:
            print(f'{parameter}={row["value"]}: 失敗 ({row["error"]})')
        else:
            print(f'{parameter}={row["value"]}: {row["accuracy_mean"] * 100:.1f}% ± '
                  f'{row["accuracy_sem"] * 100:.1f} (除外 {row["excluded"]}/{row["total"]})')
    return table


def cmd_scenarios(cfg: ExperimentConfig, out_csv, jobs: int = 1) -> pd.DataFrame:
    """学習方式×テスト方式の正解率表を書き出す（行ごとの結果も *_rows.csv に保存）"""
    rows = run_scenarios(cfg, jobs)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_csv.with_name(out_csv.stem + '_rows.csv'), rows.to_csv(index=False))
    table = scenario_table(rows)
    atomic_write_text(out_csv, table.to_csv())

    print('\n=== 話者識別の正解率 (%)（行: 学習, 列: テスト） ===')
    print(table.round(1).to_string())
    print(f'除外したシーン: {int(rows["excluded"].astype(bool).sum())}')
    return table


def cmd_separation(cfg: ExperimentConfig, out_csv, jobs: int = 1) -> pd.DataFrame:
    """分離状況ごとの SDR/SIR/SAR 表を書き出す"""
    rows = run_separation(cfg, jobs)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_csv.with_name(out_csv.stem + '_rows.csv'), rows.to_csv(index=False))
    table = separation_table(rows)
    atomic_write_text(out_csv, table.to_csv(index=False))

    print('\n=== 分離性能 (dB) ===')
    print(table.round(2).to_string(index=False))
    return table


# ========== 引数 ==========

class _ArgumentParser(argparse.ArgumentParser):
    """使用法の誤りを終了コード1で返す"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f'{self.prog}: エラー: {message}\n')


def _parse_values(text: str):
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f'カンマ区切りの整数で指定してください: {text}') from e


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None, help='設定ファイル（JSON）')
    common.add_argument('--preset', type=str, default=config.DEFAULT_PRESET,
                        choices=sorted(config.EXPERIMENT_PRESETS), help='実験プリセット')
    common.add_argument('--full-scale', action='store_true', help="'full' プリセット（20 × 50）で実行")
    common.add_argument('--seed', type=int, default=None, help='乱数シード')
    common.add_argument('--out', type=str, required=True, help='出力先')
    common.add_argument('--jobs', type=int, default=1, help='並列数')
    common.add_argument('-v', '--verbose', action='count', default=0, help='ログを詳しく（-vv でデバッグ）')

    parser = _ArgumentParser(description='多チャネル NMF による音源分離と話者識別の実験')
    sub = parser.add_subparsers(dest='command', required=True, parser_class=_ArgumentParser)

    sub.add_parser('simulate', parents=[common], help='コーパスを合成')
    train = sub.add_parser('train', parents=[common], help='ライブラリを学習')
    train.add_argument('--corpus', type=str, required=True)
    test = sub.add_parser('test', parents=[common], help='同時推定でテスト')
    test.add_argument('--corpus', type=str, required=True)
    test.add_argument('--library', type=str, required=True, help='train の出力先')
    evaluate = sub.add_parser('evaluate', parents=[common], help='結果を評価（--out は CSV のパス）')
    evaluate.add_argument('--corpus', type=str, required=True)
    evaluate.add_argument('--results', type=str, required=True, help='test の出力先')
    sweep = sub.add_parser('sweep', parents=[common], help='K または U_tr を変えて実行（--out は CSV）')
    sweep.add_argument('--parameter', choices=['k', 'utr'], required=True)
    sweep.add_argument('--values', type=_parse_values, required=True, help='例: 8,15,30')
    sub.add_parser('scenarios', parents=[common], help='学習×テスト方式の比較（--out は CSV）')
    sub.add_parser('separation', parents=[common], help='分離状況ごとの比較（--out は CSV）')
    return parser


def load_config(args) -> ExperimentConfig:
    """プリセット → 設定ファイル → --seed の順に適用"""
    preset = 'full' if args.full_scale else args.preset
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        if args.full_scale:
            cfg = cfg.with_overrides({'eval': preset_config('full').to_dict()['eval']})
    else:
        cfg = preset_config(preset)
    if args.seed is not None:
        cfg = cfg.with_overrides({'seed': args.seed})
    if args.jobs < 1:
        raise ConfigError(f'--jobs は1以上です: {args.jobs}')
    return cfg


def run(args) -> int:
    cfg = load_config(args)
    logger.info('開始: %s（seed=%d, %s）', args.command, cfg.seed, datetime.now().strftime('%Y-%m-%d %H:%M:%S'))
    if args.command == 'simulate':
        cmd_simulate(cfg, args.out, args.jobs)
    elif args.command == 'train':
        cmd_train(cfg, args.corpus, args.out, args.jobs)
    elif args.command == 'test':
        cmd_test(cfg, args.corpus, args.library, args.out, args.jobs)
    elif args.command == 'evaluate':
        cmd_evaluate(cfg, args.corpus, args.results, args.out)
    elif args.command == 'sweep':
        cmd_sweep(cfg, args.parameter, args.values, args.out, args.jobs)
    elif args.command == 'scenarios':
        cmd_scenarios(cfg, args.out, args.jobs)
    elif args.command == 'separation':
        cmd_separation(cfg, args.out, args.jobs)
    return 0


def main(argv=None) -> int:
    """メイン関数"""
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        return run(args)
    except SeparationError as e:
        print(f'エラー: {e}', file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f'エラー: {e}', file=sys.stderr)
        return 2


if __name__ == '__main__':
    with warnings.catch_warnings():
        warnings.simplefilter('default')
        sys.exit(main())
