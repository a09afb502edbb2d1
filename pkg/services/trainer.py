"""
学習サービス
BCE損失・Adam・学習率スケジュール・学習ループ・評価・ファインチューニングを提供
"""

import logging
import math
import queue
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from models.architecture import ConfigurationError
from models.config import TrainConfig
from models.dataset import PatchDataset
from models.metrics import MetricsReport, class_names_for
from nn import functional as F
from nn.layers import Parameter
from nn.tensor import Tape, Tensor
from services.architectures import ClassifierModel, build_model
from services.job_pool import EpochProgress
from services.metrics import report_from_arrays
from utils.checkpoint_io import Checkpoint, read_checkpoint


logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 64


class NonFiniteLossError(Exception):
    """損失が非有限値になったエラー"""

    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"損失が非有限値になりました: エポック {epoch}, バッチ {batch}, 値 {value}")


def format_hmm(seconds: float) -> str:
    """秒を h.mm 形式（時間.分）に変換"""
    total_minutes = int(seconds // 60)
    return f"{total_minutes // 60}.{total_minutes % 60:02d}"


# 損失・最適化

def bce_loss(logits: Tensor, targets: Union[Tensor, np.ndarray]) -> Tensor:
    """シグモイド出力に対するバイナリ交差エントロピー（N·K要素の平均、log-sum-exp形式）"""
    return F.bce_with_logits(logits, targets)


@dataclass
class AdamState:
    """Adamのステップ数と1次・2次モーメント"""
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Parameter], grads: Dict[str, Optional[np.ndarray]], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7) -> AdamState:
    """
    Adamの1ステップ（パラメータをその場で更新）

    勾配がNoneのパラメータは更新せず、モーメントも変更しない。

    Args:
        params: 名前→パラメータ
        grads: 名前→勾配
        state: 最適化状態（その場で更新）
        lr: 学習率

    Returns:
        更新後の状態
    """
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, grad in grads.items():
        if grad is None:
            continue
        param = params[name]
        dtype = param.data.dtype
        grad = np.asarray(grad, dtype=dtype)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = (beta1 * m + (1.0 - beta1) * grad).astype(dtype, copy=False)
        v = (beta2 * v + (1.0 - beta2) * grad * grad).astype(dtype, copy=False)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        param.data = (param.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(dtype, copy=False)
    return state


class AdamOptimizer:
    """モデルのパラメータに対するAdam（凍結パラメータは更新しない）"""

    def __init__(self, model: ClassifierModel, cfg: TrainConfig, frozen: Iterable[str] = ()):
        self.params: Dict[str, Parameter] = OrderedDict(model.named_parameters())
        self.frozen = set(frozen)
        self.cfg = cfg
        self.state = AdamState()

    def step(self, grads: Dict[str, Optional[np.ndarray]], lr: float) -> None:
        trainable = {name: grad for name, grad in grads.items() if name not in self.frozen}
        adam_step(self.params, trainable, self.state, lr, self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps)


def lr_schedule(epoch: int, cfg: TrainConfig, base_lr: Optional[float] = None) -> float:
    """
    1段階のステップ減衰

    Args:
        epoch: 0始まりのエポック番号
        cfg: 学習設定
        base_lr: 基本学習率（省略時はcfg.base_lr）
    """
    lr = cfg.base_lr if base_lr is None else base_lr
    if cfg.decay_epoch is not None and epoch >= cfg.decay_epoch:
        return lr * cfg.decay_factor
    return lr


# データ供給

def epoch_order(num_samples: int, seed: int, epoch: int) -> np.ndarray:
    """エポック毎のシード付き並べ替え（単一ワーカー・分散学習で共通）"""
    return np.random.default_rng([seed, epoch]).permutation(num_samples)


def batch_indices(order: np.ndarray, batch_size: int, drop_last: bool = False) -> List[np.ndarray]:
    """並べ替え済みのインデックスを連続したバッチに分割"""
    batches = [order[start:start + batch_size] for start in range(0, len(order), batch_size)]
    if drop_last and batches and len(batches[-1]) < batch_size:
        batches.pop()
    return batches


class BatchPrefetcher:
    """
    別スレッドでバッチ配列を先読みする反復子

    生産者は1スレッドのみで、上限付きキューを介して順序通りに受け渡す。
    """

    _DONE = object()

    def __init__(self, dataset: PatchDataset, batches: Sequence[np.ndarray], dtype: type, depth: int = 2):
        self.dataset = dataset
        self.batches = list(batches)
        self.dtype = dtype
        self.depth = depth

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        if self.depth <= 0:
            for indices in self.batches:
                yield self.dataset.arrays(indices, self.dtype)
            return

        buffer: "queue.Queue" = queue.Queue(maxsize=self.depth)
        stop = threading.Event()

        def produce():
            try:
                for indices in self.batches:
                    item = self.dataset.arrays(indices, self.dtype)
                    while not stop.is_set():
                        try:
                            buffer.put(item, timeout=0.1)
                            break
                        except queue.Full:
                            continue
                    if stop.is_set():
                        return
                buffer.put(self._DONE)
            except Exception as e:
                buffer.put(e)

        producer = threading.Thread(target=produce, name="batch-prefetch", daemon=True)
        producer.start()
        try:
            while True:
                item = buffer.get()
                if item is self._DONE:
                    break
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            stop.set()
            producer.join(timeout=1.0)


# 学習

@dataclass
class TrainStats:
    """学習の統計（エポック毎の損失・時間）"""
    epoch_losses: List[float] = field(default_factory=list)
    epoch_times: List[float] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)
    wall_time: float = 0.0
    steps: int = 0
    samples_seen: int = 0

    @property
    def training_time_hmm(self) -> str:
        return format_hmm(self.wall_time)

    def to_csv_rows(self) -> List[Dict[str, object]]:
        return [
            {"epoch": index + 1, "loss": loss, "lr": lr, "seconds": round(seconds, 6)}
            for index, (loss, lr, seconds) in enumerate(zip(self.epoch_losses, self.learning_rates, self.epoch_times))
        ]


def check_dataset_matches(model: ClassifierModel, dataset: PatchDataset) -> None:
    """データセットの形状がモデル設定と一致するか検証"""
    config = model.config
    descriptor = dataset.descriptor
    if descriptor.channels != config.in_channels:
        raise ConfigurationError(f"チャネル数がモデルと一致しません: {descriptor.channels} != {config.in_channels}")
    if descriptor.resolution != config.resolution:
        raise ConfigurationError(
            f"解像度がモデルと一致しません: {descriptor.resolution} != {config.resolution} (事前にリサイズしてください)"
        )
    if descriptor.num_classes != config.num_classes:
        raise ConfigurationError(f"クラス数がモデルと一致しません: {descriptor.num_classes} != {config.num_classes}")


def set_training_mode(model: ClassifierModel, freeze_backbone_batchnorm: bool = False) -> None:
    """学習モードに切り替え（指定時はヘッド以外を推論モードに固定）"""
    model.train()
    if freeze_backbone_batchnorm:
        for name, module in model.named_modules():
            if name and not name.startswith("head"):
                module.training = False


def model_dtype(model: ClassifierModel) -> type:
    return next(iter(model.parameters())).data.dtype.type


def compute_gradients(model: ClassifierModel, pixels: np.ndarray, targets: np.ndarray,
                      tape: Tape) -> Tuple[Tensor, Dict[str, np.ndarray]]:
    """
    1バッチの損失と全パラメータの勾配

    tapeは呼び出し側のスレッドで有効化されている必要がある。
    """
    tape.reset()
    loss = bce_loss(model(Tensor(pixels)), targets)
    if not math.isfinite(loss.item()):
        return loss, {}
    tape.backward(loss)
    grads = OrderedDict()
    for name, param in model.named_parameters():
        grad = tape.grad(param)
        grads[name] = np.zeros_like(param.data) if grad is None else grad
    return loss, grads


def train(model: ClassifierModel, dataset: PatchDataset, cfg: TrainConfig, frozen: Iterable[str] = (),
          freeze_backbone_batchnorm: bool = False, base_lr: Optional[float] = None
          ) -> Tuple[ClassifierModel, TrainStats]:
    """
    単一ワーカーの学習ループ

    Args:
        model: 学習するモデル（その場で更新）
        dataset: 学習データ（解像度・チャネル数はモデル設定と一致）
        cfg: 学習設定
        frozen: 更新しないパラメータ名
        freeze_backbone_batchnorm: ヘッド以外のBatchNormを推論モードに固定するかどうか
        base_lr: 基本学習率の上書き

    Returns:
        (学習済みモデル, 学習統計)
    """
    check_dataset_matches(model, dataset)
    if len(dataset) == 0:
        raise ValueError("学習データが空です")
    dtype = model_dtype(model)
    optimizer = AdamOptimizer(model, cfg, frozen)
    stats = TrainStats()
    tracker = EpochProgress(total=cfg.epochs, label="学習")
    set_training_mode(model, freeze_backbone_batchnorm)

    start = time.perf_counter()
    with Tape() as tape:
        for epoch in range(cfg.epochs):
            epoch_start = time.perf_counter()
            lr = lr_schedule(epoch, cfg, base_lr)
            batches = batch_indices(epoch_order(len(dataset), cfg.seed, epoch), cfg.batch_size)
            total_loss = 0.0
            for batch_index, (pixels, targets) in enumerate(BatchPrefetcher(dataset, batches, dtype, cfg.prefetch)):
                loss, grads = compute_gradients(model, pixels, targets, tape)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteLossError(epoch, batch_index, value)
                optimizer.step(grads, lr)
                total_loss += value
                stats.steps += 1
                stats.samples_seen += len(pixels)
            tape.reset()
            stats.epoch_losses.append(total_loss / len(batches))
            stats.learning_rates.append(lr)
            stats.epoch_times.append(time.perf_counter() - epoch_start)
            tracker.advance(epoch + 1, cfg.epochs, f"損失: {stats.epoch_losses[-1]:.4f}, 学習率: {lr:g}")
    stats.wall_time = time.perf_counter() - start
    model.eval()
    if cfg.epochs:
        tracker.finish()
    return model, stats


# 評価

def predict(model: ClassifierModel, dataset: PatchDataset,
            batch_size: int = EVAL_BATCH_SIZE) -> Tuple[np.ndarray, float]:
    """
    推論モードで確率を計算

    Returns:
        (確率 N×K, 推論に要した秒数)
    """
    check_dataset_matches(model, dataset)
    dtype = model_dtype(model)
    model.eval()
    outputs = []
    start = time.perf_counter()
    for indices in batch_indices(np.arange(len(dataset)), batch_size):
        pixels, _ = dataset.arrays(indices, dtype)
        outputs.append(F.stable_sigmoid(model(Tensor(pixels)).data))
    elapsed = time.perf_counter() - start
    return np.concatenate(outputs).astype(np.float64), elapsed


def evaluate(model: ClassifierModel, dataset: PatchDataset, tau: float = 0.5,
             batch_size: int = EVAL_BATCH_SIZE, class_names: Optional[List[str]] = None) -> MetricsReport:
    """
    評価指標と推論速度（画像/秒）を計算

    Args:
        model: 評価するモデル
        dataset: 評価データ
        tau: 陽性判定の閾値
        batch_size: 推論バッチサイズ
        class_names: クラス名（省略時はクラス数から決定）
    """
    if len(dataset) == 0:
        raise ValueError("評価データが空です")
    probabilities, elapsed = predict(model, dataset, batch_size)
    _, targets = dataset.arrays()
    rate = len(dataset) / max(elapsed, 1e-9)
    names = class_names or class_names_for(dataset.descriptor.num_classes)
    report = report_from_arrays(probabilities, targets, tau, names, rate)
    logger.info(
        f"評価完了: {len(dataset)}件, マイクロF {report.micro_f.percent:.2f}%, 推論速度 {rate:.1f}画像/秒"
    )
    return report


# 転移学習

def finetune(checkpoint: Union[str, Path, Checkpoint], dataset: PatchDataset, new_num_classes: int,
             freeze_backbone: bool, cfg: TrainConfig, seed: int = 0,
             dtype: type = np.float32) -> Tuple[ClassifierModel, TrainStats]:
    """
    チェックポイントの重みから学習を再開

    ヘッドは新しいクラス数の全結合層として新たに初期化し、形状が一致しないテンソルは読み込まない。

    Args:
        checkpoint: チェックポイントのパスまたは読み込み済みの内容
        dataset: 対象タスクの学習データ
        new_num_classes: 対象タスクのクラス数
        freeze_backbone: Trueの場合はヘッド以外を更新しない（BatchNormも推論モード）
        cfg: 学習設定
        seed: ヘッド初期化のシード
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = read_checkpoint(checkpoint)
    source = checkpoint.config
    target = replace(
        source,
        num_classes=new_num_classes,
        in_channels=dataset.descriptor.channels,
        resolution=dataset.descriptor.resolution,
        name=f"{source.name}-finetuned" if source.name else "",
    )
    model = build_model(target, seed=seed, dtype=dtype)
    state = {name: array for name, array in checkpoint.tensors.items() if not name.startswith("head.")}
    skipped = [name for name in model.load_state_dict(state, strict=False) if not name.startswith("head.")]
    if skipped:
        logger.warning(f"形状が一致しないため読み込まなかったテンソル: {len(skipped)}個 ({', '.join(skipped[:5])}...)")
    frozen = model.backbone_parameter_names() if freeze_backbone else []
    logger.info(
        f"ファインチューニング開始: {source.name or source.family} → {new_num_classes}クラス"
        f" (バックボーン{'凍結' if freeze_backbone else '学習可能'})"
    )
    return train(model, dataset, cfg, frozen=frozen, freeze_backbone_batchnorm=freeze_backbone)


@dataclass
class LowDataRow:
    """低データ量の比較結果（事前学習あり vs なし）"""
    fraction: float
    seed: int
    train_samples: int
    pretrained_f: float
    scratch_f: float

    @property
    def gain(self) -> float:
        return self.pretrained_f - self.scratch_f

    def to_row(self) -> Dict[str, object]:
        return {
            "fraction": self.fraction,
            "seed": self.seed,
            "train_samples": self.train_samples,
            "pretrained_f": round(self.pretrained_f * 100, 2),
            "scratch_f": round(self.scratch_f * 100, 2),
            "gain": round(self.gain * 100, 2),
        }


def low_data_study(checkpoint: Union[str, Path, Checkpoint], train_set: PatchDataset, test_set: PatchDataset,
                   cfg: TrainConfig, fractions: Sequence[float] = (0.1,), seeds: Sequence[int] = (0,),
                   freeze_backbone: bool = False, tau: float = 0.5) -> List[LowDataRow]:
    """
    学習データの割合毎に、ファインチューニングとスクラッチ学習を同じ予算で比較

    Returns:
        割合・シード毎の比較行
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = read_checkpoint(checkpoint)
    num_classes = train_set.descriptor.num_classes
    rows = []
    for fraction in fractions:
        for seed in seeds:
            subset = train_set.fraction(fraction, seed=seed)
            run_cfg = replace(cfg, seed=seed)
            pretrained, _ = finetune(checkpoint, subset, num_classes, freeze_backbone, run_cfg, seed=seed)
            scratch_config = replace(
                checkpoint.config,
                num_classes=num_classes,
                in_channels=train_set.descriptor.channels,
                resolution=train_set.descriptor.resolution,
            )
            scratch, _ = train(build_model(scratch_config, seed=seed), subset, run_cfg)
            row = LowDataRow(
                fraction=fraction,
                seed=seed,
                train_samples=len(subset),
                pretrained_f=float(evaluate(pretrained, test_set, tau).micro_f),
                scratch_f=float(evaluate(scratch, test_set, tau).micro_f),
            )
            logger.info(
                f"低データ比較: 割合{fraction:g}, シード{seed} - 事前学習あり {row.pretrained_f:.3f} / なし {row.scratch_f:.3f}"
            )
            rows.append(row)
    return rows
