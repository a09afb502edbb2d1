"""
説明可能性サービス
最終畳み込み特徴マップに対するGrad-CAMヒートマップと、その保存・局在化評価を提供
"""

import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from models.dataset import PatchSample
from models.metrics import LabelSet, class_names_for
from nn import functional as F
from nn.tensor import Tape, Tensor
from services.architectures import ClassifierModel, UnsupportedFamilyError, build_model
from services.job_pool import JobPool, first_failure
from utils.file_manager import FileManager


logger = logging.getLogger(__name__)

TOP_FRACTION = 0.1


@dataclass
class GradCamResult:
    """1クラス分のGrad-CAMの結果"""
    heatmap: np.ndarray
    class_index: int
    class_name: str
    probability: float
    degenerate: bool = False

    def tag(self, labels: Optional[LabelSet], tau: float = 0.5) -> Optional[str]:
        """正解ラベルに対する判定（TP / FP / FN / TN）"""
        if labels is None:
            return None
        predicted = self.probability > tau
        actual = self.class_index in labels
        if predicted and actual:
            return "TP"
        if predicted:
            return "FP"
        if actual:
            return "FN"
        return "TN"

    def sidecar(self, labels: Optional[LabelSet] = None, tau: float = 0.5) -> Dict[str, Any]:
        data = {
            "class_index": self.class_index,
            "class_name": self.class_name,
            "probability": round(self.probability, 6),
            "degenerate": self.degenerate,
            "height": int(self.heatmap.shape[0]),
            "width": int(self.heatmap.shape[1]),
        }
        tag = self.tag(labels, tau)
        if tag is not None:
            data["tag"] = tag
        return data


def gradcam_from_activations(activations: np.ndarray, gradients: np.ndarray,
                             out_hw: Tuple[int, int]) -> Tuple[np.ndarray, bool]:
    """
    特徴マップと勾配からヒートマップを計算

    α_k = ∂logit/∂A_k の空間平均、map = ReLU(Σ_k α_k·A_k) を双線形補間で拡大し、
    最小値・最大値で[0,1]に正規化する。

    Args:
        activations: 特徴マップ K×h×w
        gradients: 特徴マップに対するロジットの勾配 K×h×w
        out_hw: 出力サイズ (H, W)

    Returns:
        (ヒートマップ H×W, 縮退フラグ)
    """
    activations = np.asarray(activations, dtype=np.float64)
    gradients = np.asarray(gradients, dtype=np.float64)
    if activations.ndim != 3 or activations.shape != gradients.shape:
        raise ValueError(f"特徴マップと勾配はK×h×wで同形状である必要があります: {activations.shape}, {gradients.shape}")
    weights = gradients.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, activations, axes=1), 0.0)
    h, w = cam.shape
    out_h, out_w = out_hw
    cam = F.bilinear_matrix(h, out_h) @ cam @ F.bilinear_matrix(w, out_w).T
    low, high = cam.min(), cam.max()
    if not high > low:
        return np.zeros((out_h, out_w), dtype=np.float64), True
    return (cam - low) / (high - low), False


def gradcam(model: ClassifierModel, sample: Union[PatchSample, np.ndarray], class_index: int,
            class_names: Optional[Sequence[str]] = None) -> GradCamResult:
    """
    Grad-CAMヒートマップを計算

    対象層はGAP直前の最終畳み込み特徴マップ。

    Args:
        model: 畳み込み系（wrn / efficientnet）のモデル
        sample: パッチまたは C×H×W 配列
        class_index: 対象クラス
        class_names: クラス名

    Returns:
        入力と同じ空間サイズのヒートマップと付随情報
    """
    config = model.config
    if not config.is_convolutional:
        raise UnsupportedFamilyError(f"Grad-CAMは畳み込み系のモデルのみ対応しています: {config.family}")
    if not 0 <= class_index < config.num_classes:
        raise ValueError(f"class_indexが範囲外です: {class_index} (クラス数 {config.num_classes})")
    pixels = sample.pixels if isinstance(sample, PatchSample) else np.asarray(sample)
    if pixels.ndim != 3:
        raise ValueError(f"入力はC×H×Wである必要があります: shape={pixels.shape}")

    dtype = next(iter(model.parameters())).data.dtype
    was_training = model.training
    model.eval()
    try:
        with Tape() as tape:
            features = model.features(Tensor(pixels[None].astype(dtype)))
            leaf = Tensor(features.data.copy(), requires_grad=True)
            logits = model.classify(leaf)
            tape.backward(logits[:, class_index].sum())
            gradients = tape.grad(leaf)
    finally:
        if was_training:
            model.train()
    if gradients is None:
        gradients = np.zeros_like(leaf.data)

    heatmap, degenerate = gradcam_from_activations(leaf.data[0], gradients[0], pixels.shape[1:])
    names = list(class_names) if class_names else class_names_for(config.num_classes)
    probability = float(F.stable_sigmoid(logits.data[0, class_index]))
    if degenerate:
        logger.warning(f"Grad-CAMが縮退しました（全て0）: クラス {names[class_index]}")
    return GradCamResult(
        heatmap=heatmap,
        class_index=class_index,
        class_name=names[class_index],
        probability=probability,
        degenerate=degenerate,
    )


def gradcam_batch(model: ClassifierModel, samples: Sequence[PatchSample], class_indices: Sequence[int],
                  max_workers: int = 1) -> List[GradCamResult]:
    """
    複数サンプルのGrad-CAM

    並行実行時はワーカースレッド毎に重みを複製したモデルを使う。
    """
    if len(samples) != len(class_indices):
        raise ValueError("samplesとclass_indicesの件数が一致しません")
    if max_workers == 1:
        return [gradcam(model, sample, index) for sample, index in zip(samples, class_indices)]

    state = model.state_dict()
    dtype = next(iter(model.parameters())).data.dtype.type
    local = threading.local()

    def replica() -> ClassifierModel:
        if getattr(local, "model", None) is None:
            clone = build_model(model.config, dtype=dtype)
            clone.load_state_dict(state)
            local.model = clone
        return local.model

    outcomes = JobPool(max_workers=max_workers, name="gradcam").map(
        lambda item: gradcam(replica(), item[0], item[1]),
        list(zip(samples, class_indices)),
        key=lambda item: item[0].id,
    )
    failure = first_failure(outcomes)
    if failure:
        raise RuntimeError(f"Grad-CAMの計算に失敗しました: {failure.describe()}")
    return [outcome.value for outcome in outcomes]


def localization_score(heatmap: np.ndarray, region: np.ndarray, top_fraction: float = TOP_FRACTION) -> float:
    """
    上位の熱量のうち生成領域マスク内にある割合

    Args:
        heatmap: ヒートマップ H×W
        region: 領域マスク H×W
        top_fraction: 対象とする上位画素の割合

    Returns:
        [0,1]の割合（熱量が0の場合は0）
    """
    heatmap = np.asarray(heatmap, dtype=np.float64)
    region = np.asarray(region, dtype=bool)
    if heatmap.shape != region.shape:
        raise ValueError(f"ヒートマップとマスクの形状が一致しません: {heatmap.shape} != {region.shape}")
    count = max(1, int(np.ceil(heatmap.size * top_fraction)))
    top = np.argsort(heatmap, axis=None, kind="stable")[-count:]
    mass = heatmap.ravel()[top]
    total = mass.sum()
    if total <= 0:
        return 0.0
    return float(mass[region.ravel()[top]].sum() / total)


def write_gradcam(result: GradCamResult, path: Union[str, Path], file_manager: Optional[FileManager] = None,
                  labels: Optional[LabelSet] = None, tau: float = 0.5) -> Tuple[Path, Path]:
    """
    ヒートマップをPGMで、付随情報を同名のJSONで保存

    Returns:
        (PGMのパス, JSONのパス)
    """
    file_manager = file_manager or FileManager()
    pgm_path = Path(path).with_suffix(".pgm")
    json_path = Path(path).with_suffix(".json")
    written_pgm = file_manager.write_pgm(pgm_path, result.heatmap)
    written_json = file_manager.write_json(json_path, result.sidecar(labels, tau))
    logger.info(f"Grad-CAMを保存しました: {written_pgm}")
    return written_pgm, written_json
