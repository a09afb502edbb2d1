"""
合成データサービス
マルチラベル・マルチスペクトルの合成パッチ生成、バンド選択、リサイズを提供
"""

import logging
from dataclasses import replace
from typing import Optional, Tuple

import numpy as np

from models.dataset import (
    CHANNEL_MODES, DatasetDescriptor, DescriptorError, PatchDataset, PatchSample,
)
from models.metrics import LabelSet
from nn.functional import bilinear_matrix


logger = logging.getLogger(__name__)

MOTIF_KINDS = ("disk", "stripe", "blob")
MAX_LABELS = 4
DEFAULT_NOISE = 0.05


def class_signatures(num_classes: int, channels: int, seed: int, shift: float = 0.0) -> np.ndarray:
    """
    クラス毎のスペクトル署名（K×C）

    shift>0 の場合は別クラスの署名へ向けてずらした署名を返す（転移学習の対象タスク用）。
    """
    rng = np.random.default_rng([seed, 0])
    signatures = rng.uniform(0.1, 1.0, size=(num_classes, channels))
    if shift:
        signatures = (1.0 - shift) * signatures + shift * np.roll(signatures, 1, axis=0)
    return signatures


def _motif_mask(kind: str, resolution: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """モチーフの強度マップと領域マスク"""
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64) + 0.5
    cy, cx = rng.uniform(0.25, 0.75, size=2) * resolution
    if kind == "disk":
        radius = rng.uniform(0.12, 0.22) * resolution
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
        return mask.astype(np.float64), mask
    if kind == "stripe":
        half_width = rng.uniform(0.06, 0.12) * resolution
        if rng.integers(2):
            mask = np.abs(yy - cy) <= half_width
        else:
            mask = np.abs(xx - cx) <= half_width
        return mask.astype(np.float64), mask
    sy, sx = rng.uniform(0.08, 0.16, size=2) * resolution
    intensity = np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
    return intensity, intensity >= 0.5


def synth_generate(n: int, num_classes: int = 19, channels: int = 10, resolution: int = 120, seed: int = 0,
                   noise: float = DEFAULT_NOISE, split: str = "train", mode: Optional[str] = None,
                   id_prefix: str = "synth", start_index: int = 0, shift: float = 0.0) -> PatchDataset:
    """
    合成データセットを生成

    各クラスは固有のスペクトル署名と空間モチーフ（円・帯・塊）を持ち、
    サンプルは1〜4クラスのモチーフの和にガウスノイズを加えたもの。

    Args:
        n: サンプル数
        num_classes: クラス数
        channels: チャネル数（modeを指定した場合はmodeのバンド数）
        resolution: 解像度
        seed: 乱数シード
        noise: ノイズの標準偏差
        split: 分割名
        mode: チャネルモード（rgb / rgb_nir / all / mm）
        id_prefix: サンプルIDの接頭辞
        start_index: サンプル番号の開始値
        shift: 署名のずらし量

    Returns:
        合成データセット
    """
    if n < 0:
        raise ValueError(f"nは0以上である必要があります: {n}")
    if mode is not None:
        descriptor = DatasetDescriptor.for_mode(mode, resolution=resolution, num_classes=num_classes, split=split)
    else:
        if not 1 <= channels <= len(CHANNEL_MODES["mm"]):
            raise DescriptorError(f"チャネル数は1〜{len(CHANNEL_MODES['mm'])}である必要があります: {channels}")
        descriptor = DatasetDescriptor(
            bands=CHANNEL_MODES["mm"][:channels], resolution=resolution, num_classes=num_classes, split=split,
        )
    signatures = class_signatures(num_classes, descriptor.channels, seed, shift)
    kinds = [MOTIF_KINDS[k % len(MOTIF_KINDS)] for k in range(num_classes)]

    samples = []
    for index in range(start_index, start_index + n):
        rng = np.random.default_rng([seed, 1, index])
        count = int(rng.integers(1, min(MAX_LABELS, num_classes) + 1))
        chosen = sorted(rng.choice(num_classes, size=count, replace=False).tolist())
        pixels = np.zeros((descriptor.channels, resolution, resolution), dtype=np.float64)
        masks = np.zeros((num_classes, resolution, resolution), dtype=bool)
        for k in chosen:
            intensity, mask = _motif_mask(kinds[k], resolution, rng)
            pixels += signatures[k][:, None, None] * intensity[None]
            masks[k] = mask
        pixels += rng.normal(0.0, noise, size=pixels.shape)
        samples.append(PatchSample(
            id=f"{id_prefix}-{index:06d}",
            pixels=pixels.astype(np.float32),
            labels=LabelSet.from_indices(chosen, num_classes),
            masks=masks,
        ))
    logger.info(f"合成データを生成しました: {n}件, {descriptor.channels}チャネル, {resolution}px, シード{seed}")
    return PatchDataset(descriptor, samples)


def synth_splits(n_train: int, n_test: int, seed: int = 0, **kwargs) -> Tuple[PatchDataset, PatchDataset]:
    """サンプルIDが重ならない学習用・評価用データセットを生成"""
    train = synth_generate(n_train, seed=seed, split="train", start_index=0, **kwargs)
    test = synth_generate(n_test, seed=seed, split="test", start_index=n_train, **kwargs)
    return train, test


def channel_subset(dataset: PatchDataset, mode: str) -> PatchDataset:
    """
    チャネルモードのバンドだけを残したデータセット

    Args:
        dataset: 元データセット
        mode: rgb / rgb_nir / all / mm
    """
    if mode not in CHANNEL_MODES:
        raise DescriptorError(f"無効なチャネルモード: {mode}. 有効な値: {list(CHANNEL_MODES)}")
    bands = CHANNEL_MODES[mode]
    if bands == dataset.descriptor.bands:
        return dataset
    missing = [band for band in bands if band not in dataset.descriptor.bands]
    if missing:
        raise DescriptorError(f"データセットにバンドがありません: {missing}")
    indices = [dataset.descriptor.bands.index(band) for band in bands]
    descriptor = replace(dataset.descriptor, bands=bands)
    samples = [replace(s, pixels=s.pixels[indices].copy()) for s in dataset.samples]
    return PatchDataset(descriptor, samples)


def resize_dataset(dataset: PatchDataset, target: int) -> PatchDataset:
    """
    双線形補間で全パッチをリサイズ（ラベルは不変）

    Args:
        dataset: 元データセット
        target: 目標解像度
    """
    if target < 1:
        raise ValueError(f"目標解像度は1以上である必要があります: {target}")
    source = dataset.descriptor.resolution
    if target == source:
        return dataset
    matrix = bilinear_matrix(source, target, np.float64)
    samples = []
    for sample in dataset.samples:
        pixels = (matrix @ sample.pixels.astype(np.float64) @ matrix.T).astype(np.float32)
        masks = None
        if sample.masks is not None:
            masks = (matrix @ sample.masks.astype(np.float64) @ matrix.T) >= 0.5
        samples.append(replace(sample, pixels=pixels, masks=masks))
    logger.debug(f"データセットをリサイズしました: {source}px → {target}px ({len(samples)}件)")
    return PatchDataset(replace(dataset.descriptor, resolution=target), samples)
