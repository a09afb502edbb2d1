"""
評価指標データモデル
マルチラベルのラベル集合・予測・混同行列カウント・評価レポートを管理するためのデータクラス
"""

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np


BIGEARTHNET_CLASSES = (
    "Urban fabric",
    "Industrial or commercial units",
    "Arable land",
    "Permanent crops",
    "Pastures",
    "Complex cultivation patterns",
    "Land principally occupied by agriculture, with significant areas of natural vegetation",
    "Agro-forestry areas",
    "Broad-leaved forest",
    "Coniferous forest",
    "Mixed forest",
    "Natural grassland and sparsely vegetated areas",
    "Moors, heathland and sclerophyllous vegetation",
    "Transitional woodland, shrub",
    "Beaches, dunes, sands",
    "Inland wetlands",
    "Coastal wetlands",
    "Inland waters",
    "Marine waters",
)

DEFAULT_NUM_CLASSES = len(BIGEARTHNET_CLASSES)
DEFAULT_THRESHOLD = 0.5


def class_names_for(num_classes: int) -> List[str]:
    """クラス数に応じたクラス名（19クラスの場合はBigEarthNetの名称）"""
    if num_classes == DEFAULT_NUM_CLASSES:
        return list(BIGEARTHNET_CLASSES)
    return [f"class_{index}" for index in range(num_classes)]


@dataclass(frozen=True)
class LabelSet:
    """クラス数ビット幅のラベル集合（ビットkがクラスkに対応）"""
    mask: int
    num_classes: int = DEFAULT_NUM_CLASSES

    def __post_init__(self):
        """設定値の検証"""
        if self.num_classes < 1:
            raise ValueError(f"num_classesは1以上である必要があります: {self.num_classes}")
        if self.mask < 0 or self.mask >> self.num_classes:
            raise ValueError(f"ラベルマスクがビット幅{self.num_classes}を超えています: {self.mask:#x}")

    @classmethod
    def from_indices(cls, indices: Iterable[int], num_classes: int = DEFAULT_NUM_CLASSES) -> "LabelSet":
        mask = 0
        for index in indices:
            if not 0 <= index < num_classes:
                raise ValueError(f"クラス番号が範囲外です: {index} (クラス数 {num_classes})")
            mask |= 1 << int(index)
        return cls(mask, num_classes)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "LabelSet":
        """0/1配列から作成"""
        array = np.asarray(values)
        return cls.from_indices(np.flatnonzero(array > 0.5).tolist(), num_classes=array.shape[0])

    @classmethod
    def full(cls, num_classes: int = DEFAULT_NUM_CLASSES) -> "LabelSet":
        """全クラスの集合"""
        return cls((1 << num_classes) - 1, num_classes)

    def indices(self) -> List[int]:
        return [k for k in range(self.num_classes) if self.mask >> k & 1]

    def to_array(self, dtype=np.float32) -> np.ndarray:
        return np.array([(self.mask >> k) & 1 for k in range(self.num_classes)], dtype=dtype)

    def __contains__(self, index: int) -> bool:
        return bool(self.mask >> index & 1)

    def __len__(self) -> int:
        return bin(self.mask).count("1")


@dataclass(frozen=True)
class PredictionSet:
    """クラス毎の確率ベクトル"""
    probabilities: tuple

    def __post_init__(self):
        """設定値の検証"""
        values = np.asarray(self.probabilities, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("確率は1次元の非空ベクトルである必要があります")
        if not np.all(np.isfinite(values)) or np.any(values < 0) or np.any(values > 1):
            raise ValueError("確率は[0, 1]の有限値である必要があります")

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "PredictionSet":
        return cls(tuple(float(v) for v in np.asarray(values).ravel()))

    @property
    def num_classes(self) -> int:
        return len(self.probabilities)

    def threshold(self, tau: float = DEFAULT_THRESHOLD) -> LabelSet:
        """p > τ のクラスを陽性とする"""
        return LabelSet.from_indices(
            [k for k, p in enumerate(self.probabilities) if p > tau], self.num_classes
        )


@dataclass
class ClassCounts:
    """1クラスの混同行列カウント"""
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ClassCounts") -> "ClassCounts":
        return ClassCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass
class ConfusionCounts:
    """クラス毎のカウントと全体集計"""
    per_class: List[ClassCounts]
    num_samples: int

    @property
    def pooled(self) -> ClassCounts:
        total = ClassCounts()
        for counts in self.per_class:
            total = total + counts
        return total


@dataclass(frozen=True)
class Score:
    """有理数のスコア（分母ゼロの場合は0で縮退フラグ付き）"""
    value: Fraction
    degenerate: bool = False

    def __float__(self) -> float:
        return float(self.value)

    @property
    def percent(self) -> float:
        return float(self.value) * 100.0


@dataclass
class MetricsReport:
    """評価レポート"""
    counts: ConfusionCounts
    micro_precision: Score
    micro_recall: Score
    micro_f: Score
    per_class_precision: List[Score]
    per_class_recall: List[Score]
    per_class_f: List[Score]
    macro_f: Fraction
    example_accuracy: Fraction
    exact_match: Fraction
    threshold: float = DEFAULT_THRESHOLD
    class_names: List[str] = field(default_factory=list)
    inference_rate: Optional[float] = None

    def __post_init__(self):
        if not self.class_names:
            self.class_names = class_names_for(len(self.counts.per_class))
        for counts in self.counts.per_class:
            if counts.total != self.counts.num_samples:
                raise ValueError("TP+FP+FN+TNがサンプル数と一致しません")

    @property
    def num_samples(self) -> int:
        return self.counts.num_samples

    @property
    def degenerate_flags(self) -> List[str]:
        """縮退したスコアの名前"""
        flags = [name for name, score in (("micro_precision", self.micro_precision),
                                          ("micro_recall", self.micro_recall),
                                          ("micro_f", self.micro_f)) if score.degenerate]
        flags.extend(f"f[{self.class_names[k]}]" for k, score in enumerate(self.per_class_f) if score.degenerate)
        return flags

    def summary(self) -> Dict[str, float]:
        """主要スコア（パーセント）"""
        return {
            "accuracy": float(self.example_accuracy) * 100,
            "precision": self.micro_precision.percent,
            "recall": self.micro_recall.percent,
            "f_score": self.micro_f.percent,
            "macro_f": float(self.macro_f) * 100,
            "exact_match": float(self.exact_match) * 100,
        }

    def to_csv_rows(self) -> List[Dict[str, Any]]:
        """クラス毎の行と集計行"""
        rows = []
        for k, name in enumerate(self.class_names):
            c = self.counts.per_class[k]
            rows.append({
                "class": name,
                "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn,
                "precision": f"{float(self.per_class_precision[k].value):.6f}",
                "recall": f"{float(self.per_class_recall[k].value):.6f}",
                "f_score": f"{float(self.per_class_f[k].value):.6f}",
            })
        pooled = self.counts.pooled
        rows.append({
            "class": "micro",
            "tp": pooled.tp, "fp": pooled.fp, "fn": pooled.fn, "tn": pooled.tn,
            "precision": f"{float(self.micro_precision.value):.6f}",
            "recall": f"{float(self.micro_recall.value):.6f}",
            "f_score": f"{float(self.micro_f.value):.6f}",
        })
        return rows

    def class_table_markdown(self) -> str:
        """クラス毎のFスコア表（マクロ平均付き）"""
        lines = ["| Class | F-Score (%) |", "|---|---:|"]
        for name, score in zip(self.class_names, self.per_class_f):
            lines.append(f"| {name} | {score.percent:.2f} |")
        lines.append(f"| Average | {float(self.macro_f) * 100:.2f} |")
        return "\n".join(lines) + "\n"
