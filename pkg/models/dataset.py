"""
データセットデータモデル
マルチスペクトルパッチ・データセット記述子・データセットを管理するためのデータクラス
"""

from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.metrics import DEFAULT_NUM_CLASSES, LabelSet


# 除外バンド（B01, B09, B10）を除いたSentinel-2の10バンド
S2_BANDS = ("B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B11", "B12")
EXCLUDED_BANDS = ("B01", "B09", "B10")
S1_BANDS = ("VV", "VH")

CHANNEL_MODES: Dict[str, Tuple[str, ...]] = {
    "rgb": ("B04", "B03", "B02"),
    "rgb_nir": ("B04", "B03", "B02", "B08"),
    "all": S2_BANDS,
    "mm": S2_BANDS + S1_BANDS,
}

SPLITS = ("train", "val", "test")
NATIVE_RESOLUTION = 120


class DescriptorError(ValueError):
    """データセット記述子の不整合エラー"""
    pass


@dataclass(frozen=True)
class DatasetDescriptor:
    """データセット記述子（バンド構成・解像度・クラス数・分割）"""
    bands: Tuple[str, ...] = S2_BANDS
    resolution: int = NATIVE_RESOLUTION
    num_classes: int = DEFAULT_NUM_CLASSES
    split: str = "train"

    def __post_init__(self):
        """設定値の検証"""
        object.__setattr__(self, "bands", tuple(self.bands))
        if not self.bands:
            raise DescriptorError("バンドが指定されていません")
        for band in self.bands:
            if band in EXCLUDED_BANDS:
                raise DescriptorError(f"除外バンドは使用できません: {band}")
            if band not in S2_BANDS and band not in S1_BANDS:
                raise DescriptorError(f"未知のバンド: {band}")
        if len(set(self.bands)) != len(self.bands):
            raise DescriptorError(f"バンドが重複しています: {self.bands}")
        if self.resolution < 1:
            raise DescriptorError(f"resolutionは1以上である必要があります: {self.resolution}")
        if self.num_classes < 1:
            raise DescriptorError(f"num_classesは1以上である必要があります: {self.num_classes}")
        if self.split not in SPLITS:
            raise DescriptorError(f"無効な分割: {self.split}. 有効な値: {list(SPLITS)}")

    @classmethod
    def for_mode(cls, mode: str, **kwargs) -> "DatasetDescriptor":
        """チャネルモード（rgb / rgb_nir / all / mm）から作成"""
        if mode not in CHANNEL_MODES:
            raise DescriptorError(f"無効なチャネルモード: {mode}. 有効な値: {list(CHANNEL_MODES)}")
        return cls(bands=CHANNEL_MODES[mode], **kwargs)

    @property
    def channels(self) -> int:
        return len(self.bands)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "bands": list(self.bands),
            "resolution": self.resolution,
            "num_classes": self.num_classes,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetDescriptor":
        values = dict(data)
        values["bands"] = tuple(values.get("bands", S2_BANDS))
        return cls(**values)


@dataclass
class PatchSample:
    """1枚のマルチスペクトルパッチ"""
    id: str
    pixels: np.ndarray
    labels: LabelSet
    masks: Optional[np.ndarray] = None

    def __post_init__(self):
        """設定値の検証"""
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3:
            raise ValueError(f"ピクセルはC×H×Wである必要があります: shape={self.pixels.shape}")
        if self.pixels.shape[1] != self.pixels.shape[2]:
            raise ValueError(f"パッチは正方形である必要があります: {self.pixels.shape[1]}×{self.pixels.shape[2]}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError(f"ピクセル値に非有限値が含まれています: {self.id}")
        if self.masks is not None and self.masks.shape != (self.labels.num_classes,) + self.pixels.shape[1:]:
            raise ValueError(f"領域マスクの形状が不正です: {self.masks.shape}")

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def resolution(self) -> int:
        return self.pixels.shape[1]


@dataclass
class PatchDataset:
    """記述子とパッチの列"""
    descriptor: DatasetDescriptor
    samples: List[PatchSample] = field(default_factory=list)

    def __post_init__(self):
        """記述子との整合性を検証"""
        for sample in self.samples:
            self.validate_sample(sample)

    def validate_sample(self, sample: PatchSample) -> None:
        if sample.channels < self.descriptor.channels:
            band = self.descriptor.bands[sample.channels]
            raise DescriptorError(
                f"チャネル数が記述子と一致しません ({sample.id}): {sample.channels} != "
                f"{self.descriptor.channels} (バンド {band} が欠落)"
            )
        if sample.channels > self.descriptor.channels:
            raise DescriptorError(
                f"チャネル数が記述子と一致しません ({sample.id}): {sample.channels} != "
                f"{self.descriptor.channels} (最終バンド {self.descriptor.bands[-1]} の後に余分なチャネル)"
            )
        if sample.labels.num_classes != self.descriptor.num_classes:
            raise DescriptorError(
                f"ラベルのビット幅がクラス数と一致しません ({sample.id}): "
                f"{sample.labels.num_classes} != {self.descriptor.num_classes}"
            )
        if sample.resolution != self.descriptor.resolution:
            raise DescriptorError(
                f"解像度が記述子と一致しません ({sample.id}): {sample.resolution} != {self.descriptor.resolution}"
            )

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> PatchSample:
        return self.samples[index]

    @property
    def ids(self) -> List[str]:
        return [s.id for s in self.samples]

    def arrays(self, indices: Optional[Sequence[int]] = None, dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
        """
        バッチ配列を作成

        Returns:
            (ピクセル N×C×H×W, ターゲット N×K)
        """
        chosen = range(len(self.samples)) if indices is None else indices
        pixels = np.stack([self.samples[i].pixels for i in chosen]).astype(dtype, copy=False)
        targets = np.stack([self.samples[i].labels.to_array(dtype) for i in chosen])
        return pixels, targets

    def subset(self, indices: Sequence[int], split: Optional[str] = None) -> "PatchDataset":
        """指定インデックスの部分データセット"""
        descriptor = replace(self.descriptor, split=split) if split else self.descriptor
        return PatchDataset(descriptor, [self.samples[i] for i in indices])

    def fraction(self, ratio: float, seed: int = 0) -> "PatchDataset":
        """データの一部（シード付き無作為抽出、最低1件）"""
        if not 0 < ratio <= 1:
            raise ValueError(f"ratioは(0, 1]の範囲である必要があります: {ratio}")
        count = max(1, int(round(len(self.samples) * ratio)))
        order = np.random.default_rng(seed).permutation(len(self.samples))[:count]
        return self.subset(sorted(order.tolist()))
