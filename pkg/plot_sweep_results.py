"""
スイープ結果をプロットするスクリプト
横軸: 辞書サイズ K または 学習発話数 U_tr
縦軸: 話者識別の正解率（学習セット平均 ± 標準誤差）
"""

from pathlib import Path
import sys

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import pandas as pd
import seaborn as sns

AXIS_LABELS = {'k': '辞書サイズ K', 'utr': '学習発話数 U_tr'}


def plot_sweep_results(csv_path: str, output_path: str = None, chance: float = None):
    """
    スイープの正解率をプロット

    Args:
        csv_path: cmd_sweep が書き出した CSV のパス
        output_path: 出力画像のパス（Noneの場合は表示のみ）
        chance: チャンスレベル（0〜1, 指定すると参照線を引く）

    Returns:
        プロットに使った（失敗を除いた）DataFrame
    """
    df = pd.read_csv(csv_path)
    failed = df[df['error'].fillna('').astype(str) != '']
    ok = df[df['error'].fillna('').astype(str) == ''].sort_values('value')

    if len(ok) == 0:
        print('エラー: プロットできる値がありません')
        return ok

    parameter = str(ok['parameter'].iloc[0])
    print(f'値の数: {len(ok)}（失敗 {len(failed)}）')
    for _, row in ok.iterrows():
        print(f"  {parameter}={row['value']}: {row['accuracy_mean'] * 100:.1f}% ± {row['accuracy_sem'] * 100:.1f}")

    sns.set_style('whitegrid')
    plt.figure(figsize=(8, 5))
    plt.errorbar(ok['value'], ok['accuracy_mean'] * 100, yerr=ok['accuracy_sem'].fillna(0) * 100,
                 fmt='o-', markersize=8, capsize=5, capthick=2, linewidth=2)
    if chance is not None:
        plt.axhline(y=chance * 100, color='gray', linestyle='--', alpha=0.5, label='チャンスレベル')
        plt.legend()

    plt.xlabel(AXIS_LABELS.get(parameter, parameter), fontsize=14)
    plt.ylabel('正解率 (%)', fontsize=14)
    plt.title('話者識別の正解率', fontsize=16)
    plt.xticks(ok['value'])
    plt.ylim(0, 105)
    plt.tight_layout()

    if output_path:
        plt.savefig(output_path, dpi=300, bbox_inches='tight')
        plt.close()
        print(f'\nグラフを保存しました: {output_path}')
    else:
        plt.show()
    return ok


def main():
    """メイン関数"""
    if len(sys.argv) < 2:
        print('使用方法:')
        print('  python plot_sweep_results.py results/sweep_k.csv [チャンスレベル]')
        sys.exit(1)

    csv_path = Path(sys.argv[1])
    if not csv_path.exists():
        print(f'エラー: ファイルが見つかりません: {csv_path}')
        sys.exit(1)
    chance = float(sys.argv[2]) if len(sys.argv) > 2 else None

    output_path = csv_path.parent / f'{csv_path.stem}_plot.png'
    plot_sweep_results(str(csv_path), str(output_path), chance)


if __name__ == '__main__':
    main()
