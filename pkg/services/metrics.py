"""
評価指標サービス
マルチラベルの混同行列カウント・マイクロ/マクロ指標・サンプル単位の正解率を提供
"""

import logging
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from models.metrics import (
    DEFAULT_THRESHOLD, ClassCounts, ConfusionCounts, LabelSet, MetricsReport, PredictionSet, Score,
)


logger = logging.getLogger(__name__)

PredictionLike = Union[PredictionSet, LabelSet]


def _prediction_mask(prediction: PredictionLike, tau: float) -> LabelSet:
    if isinstance(prediction, LabelSet):
        return prediction
    return prediction.threshold(tau)


def _validate_inputs(preds: Sequence[PredictionLike], labels: Sequence[LabelSet], tau: float) -> List[LabelSet]:
    if len(preds) != len(labels):
        raise ValueError(f"予測とラベルの件数が一致しません: {len(preds)} != {len(labels)}")
    if not preds:
        raise ValueError("空の入力では指標を定義できません")
    if not 0 < tau < 1:
        raise ValueError(f"閾値τは(0, 1)の範囲である必要があります: {tau}")
    masks = [_prediction_mask(p, tau) for p in preds]
    widths = {m.num_classes for m in masks} | {label.num_classes for label in labels}
    if len(widths) != 1:
        raise ValueError(f"クラス数が一致しません: {sorted(widths)}")
    return masks


def confusion_counts(preds: Sequence[PredictionLike], labels: Sequence[LabelSet],
                     tau: float = DEFAULT_THRESHOLD) -> ConfusionCounts:
    """
    クラス毎のTP/FP/FN/TNを集計

    Args:
        preds: 予測（確率またはしきい値処理済みの集合）
        labels: 正解ラベル集合
        tau: 陽性判定の閾値（p > τ）

    Returns:
        混同行列カウント
    """
    masks = _validate_inputs(preds, labels, tau)
    num_classes = labels[0].num_classes
    per_class = [ClassCounts() for _ in range(num_classes)]
    for predicted, actual in zip(masks, labels):
        for k in range(num_classes):
            p = predicted.mask >> k & 1
            a = actual.mask >> k & 1
            counts = per_class[k]
            if p and a:
                counts.tp += 1
            elif p:
                counts.fp += 1
            elif a:
                counts.fn += 1
            else:
                counts.tn += 1
    return ConfusionCounts(per_class=per_class, num_samples=len(labels))


def safe_ratio(numerator: int, denominator: int) -> Score:
    """分母ゼロの場合は0（縮退フラグ付き）"""
    if denominator == 0:
        return Score(Fraction(0), degenerate=True)
    return Score(Fraction(numerator, denominator))


def precision_recall_f(counts: ClassCounts) -> Tuple[Score, Score, Score]:
    """P=TP/(TP+FP), R=TP/(TP+FN), F=2TP/(2TP+FP+FN)"""
    return (
        safe_ratio(counts.tp, counts.tp + counts.fp),
        safe_ratio(counts.tp, counts.tp + counts.fn),
        safe_ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn),
    )


def micro_scores(counts: ConfusionCounts) -> Tuple[Score, Score, Score]:
    """全（サンプル, ラベル）対で集計したマイクロ指標"""
    return precision_recall_f(counts.pooled)


def macro_f(counts: ConfusionCounts) -> Tuple[List[Score], Fraction]:
    """クラス毎のFスコアとその平均"""
    per_class = [precision_recall_f(c)[2] for c in counts.per_class]
    mean = sum((s.value for s in per_class), Fraction(0)) / len(per_class)
    return per_class, mean


def example_accuracy(preds: Sequence[PredictionLike], labels: Sequence[LabelSet],
                     tau: float = DEFAULT_THRESHOLD) -> Fraction:
    """サンプル毎の |P∩L| / |P∪L| の平均（空集合同士は1）"""
    masks = _validate_inputs(preds, labels, tau)
    total = Fraction(0)
    for predicted, actual in zip(masks, labels):
        union = predicted.mask | actual.mask
        if union == 0:
            total += 1
        else:
            total += Fraction(bin(predicted.mask & actual.mask).count("1"), bin(union).count("1"))
    return total / len(labels)


def exact_match_ratio(preds: Sequence[PredictionLike], labels: Sequence[LabelSet],
                      tau: float = DEFAULT_THRESHOLD) -> Fraction:
    """予測集合が正解集合と完全一致するサンプルの割合"""
    masks = _validate_inputs(preds, labels, tau)
    matches = sum(1 for predicted, actual in zip(masks, labels) if predicted.mask == actual.mask)
    return Fraction(matches, len(labels))


def sample_jaccard_and_dice(predicted: LabelSet, actual: LabelSet) -> Tuple[Fraction, Fraction]:
    """1サンプルのJaccard係数とDice係数（空集合同士は共に1）"""
    union = predicted.mask | actual.mask
    if union == 0:
        return Fraction(1), Fraction(1)
    inter = bin(predicted.mask & actual.mask).count("1")
    size_sum = len(predicted) + len(actual)
    return Fraction(inter, bin(union).count("1")), Fraction(2 * inter, size_sum)


def compute_report(preds: Sequence[PredictionLike], labels: Sequence[LabelSet],
                   tau: float = DEFAULT_THRESHOLD, class_names: Optional[List[str]] = None,
                   inference_rate: Optional[float] = None) -> MetricsReport:
    """
    全指標をまとめた評価レポートを作成

    Args:
        preds: 予測
        labels: 正解ラベル
        tau: 閾値
        class_names: クラス名（省略時はクラス数から決定）
        inference_rate: 推論速度（画像/秒）

    Returns:
        評価レポート
    """
    counts = confusion_counts(preds, labels, tau)
    precision, recall, f_score = micro_scores(counts)
    per_class_f, macro = macro_f(counts)
    per_class = [precision_recall_f(c) for c in counts.per_class]
    report = MetricsReport(
        counts=counts,
        micro_precision=precision,
        micro_recall=recall,
        micro_f=f_score,
        per_class_precision=[p for p, _, _ in per_class],
        per_class_recall=[r for _, r, _ in per_class],
        per_class_f=per_class_f,
        macro_f=macro,
        example_accuracy=example_accuracy(preds, labels, tau),
        exact_match=exact_match_ratio(preds, labels, tau),
        threshold=tau,
        class_names=list(class_names) if class_names else [],
        inference_rate=inference_rate,
    )
    if report.degenerate_flags:
        logger.warning(f"分母ゼロの指標があります: {', '.join(report.degenerate_flags)}")
    return report


def report_from_arrays(probabilities: np.ndarray, targets: np.ndarray, tau: float = DEFAULT_THRESHOLD,
                       class_names: Optional[List[str]] = None,
                       inference_rate: Optional[float] = None) -> MetricsReport:
    """確率行列 N×K と0/1行列 N×K からレポートを作成"""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    targets = np.asarray(targets)
    if probabilities.shape != targets.shape or probabilities.ndim != 2:
        raise ValueError(f"確率とターゲットの形状が一致しません: {probabilities.shape} != {targets.shape}")
    preds = [PredictionSet.from_array(row) for row in np.clip(probabilities, 0.0, 1.0)]
    labels = [LabelSet.from_array(row) for row in targets]
    return compute_report(preds, labels, tau, class_names, inference_rate)
