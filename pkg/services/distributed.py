"""
分散学習サービス
プロセス内ワーカーによる同期データ並列学習（勾配の平均化・同期BatchNorm・整合性検証）を提供
"""

import logging
import threading
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.architecture import ModelConfig
from models.config import TrainConfig, WorkerPoolConfig
from models.dataset import PatchDataset
from nn.layers import batchnorm_sync
from nn.tensor import Tape
from services.architectures import ClassifierModel, build_model
from services.job_pool import EpochProgress
from services.trainer import (
    AdamOptimizer, NonFiniteLossError, TrainStats, check_dataset_matches, compute_gradients,
    epoch_order, lr_schedule, model_dtype, train,
)


logger = logging.getLogger(__name__)

GradientSet = Dict[str, np.ndarray]


class CollectiveProtocolError(Exception):
    """ワーカー間の集約プロトコル違反（テンソル名・形状の不一致など）"""
    pass


@dataclass
class ReductionStats:
    """1回の集約の通信量"""
    topology: str
    workers: int
    payload_bytes: int
    bytes_sent: int


# バッチ分割

def shard_batches(order: np.ndarray, workers: int, per_worker_batch: int) -> List[List[np.ndarray]]:
    """
    グローバルバッチを各ワーカーに分割

    ステップtのグローバルバッチは order[t·W·b : (t+1)·W·b] で、
    ワーカーwはその中の連続区間 [w·b, (w+1)·b) を受け持つ。
    W=1の場合は端数バッチも残し、W>1の場合はグローバルバッチを満たさない端数を捨てる。

    Args:
        order: エポックのサンプル順
        workers: ワーカー数W
        per_worker_batch: ワーカー毎のバッチサイズb

    Returns:
        ステップ毎のワーカー別インデックス列
    """
    if workers < 1 or per_worker_batch < 1:
        raise ValueError("workersとper_worker_batchは1以上である必要があります")
    global_batch = workers * per_worker_batch
    if workers == 1:
        return [[order[start:start + global_batch]] for start in range(0, len(order), global_batch)]
    steps = len(order) // global_batch
    dropped = len(order) - steps * global_batch
    if dropped:
        logger.debug(f"グローバルバッチを満たさない{dropped}件をこのエポックから除外します")
    return [
        [order[step * global_batch + w * per_worker_batch: step * global_batch + (w + 1) * per_worker_batch]
         for w in range(workers)]
        for step in range(steps)
    ]


# 勾配の集約

def _check_gradient_sets(worker_grads: Sequence[GradientSet]) -> List[str]:
    if not worker_grads:
        raise CollectiveProtocolError("ワーカーの勾配がありません")
    names = list(worker_grads[0].keys())
    for rank, grads in enumerate(worker_grads[1:], start=1):
        if list(grads.keys()) != names:
            missing = sorted(set(names) - set(grads))
            extra = sorted(set(grads) - set(names))
            raise CollectiveProtocolError(f"ワーカー{rank}のテンソル名が一致しません: 不足={missing}, 余分={extra}")
        for name in names:
            if np.shape(grads[name]) != np.shape(worker_grads[0][name]):
                raise CollectiveProtocolError(
                    f"ワーカー{rank}のテンソル形状が一致しません: {name} "
                    f"{np.shape(grads[name])} != {np.shape(worker_grads[0][name])}"
                )
    return names


def _ring_sum(flats: List[np.ndarray]) -> Tuple[np.ndarray, int]:
    """
    リング型のreduce-scatter + all-gather

    チャンクcはワーカー(c+1) mod W から始めてリングの順に加算する。
    """
    workers = len(flats)
    chunks = np.array_split(np.arange(flats[0].size), workers)
    total = np.empty_like(flats[0])
    bytes_sent = 0
    for c, index in enumerate(chunks):
        start = (c + 1) % workers
        accum = flats[start][index].copy()
        for hop in range(1, workers):
            accum = accum + flats[(start + hop) % workers][index]
            bytes_sent += accum.nbytes
        total[index] = accum
        # all-gather: 各チャンクをW-1回転送
        bytes_sent += (workers - 1) * accum.nbytes
    return total, bytes_sent


def _tree_sum(flats: List[np.ndarray]) -> Tuple[np.ndarray, int]:
    """二分木の縮約（隣接ペアを加算）＋ブロードキャスト"""
    level = [f.copy() for f in flats]
    bytes_sent = 0
    while len(level) > 1:
        merged = []
        for i in range(0, len(level) - 1, 2):
            merged.append(level[i] + level[i + 1])
            bytes_sent += level[i + 1].nbytes
        if len(level) % 2:
            merged.append(level[-1])
        level = merged
    bytes_sent += (len(flats) - 1) * level[0].nbytes
    return level[0], bytes_sent


REDUCERS = {
    "ring": _ring_sum,
    "tree": _tree_sum,
}


def allreduce_mean(worker_grads: Sequence[GradientSet], topology: str = "ring") -> Tuple[GradientSet, ReductionStats]:
    """
    ワーカー毎の勾配の要素毎平均

    加算順はトポロジーで固定されるため、同じWでは結果がビット単位で再現する。

    Args:
        worker_grads: ワーカー順の勾配（名前→配列）
        topology: ring / tree

    Returns:
        (平均勾配, 通信量の統計)
    """
    if topology not in REDUCERS:
        raise ValueError(f"無効なトポロジー: {topology}. 有効な値: {list(REDUCERS)}")
    names = _check_gradient_sets(worker_grads)
    workers = len(worker_grads)
    reference = worker_grads[0]
    dtype = np.result_type(*[np.asarray(reference[name]).dtype for name in names]) if names else np.float64
    flats = [
        np.concatenate([np.asarray(grads[name], dtype=dtype).ravel() for name in names])
        if names else np.zeros(0, dtype=dtype)
        for grads in worker_grads
    ]
    if workers == 1:
        total, bytes_sent = flats[0].copy(), 0
    else:
        total, bytes_sent = REDUCERS[topology](flats)
    mean = total / dtype.type(workers)

    averaged: GradientSet = OrderedDict()
    offset = 0
    for name in names:
        shape = np.shape(reference[name])
        size = int(np.prod(shape, dtype=np.int64))
        averaged[name] = mean[offset:offset + size].reshape(shape).astype(np.asarray(reference[name]).dtype)
        offset += size
    stats = ReductionStats(topology=topology, workers=workers, payload_bytes=int(total.nbytes), bytes_sent=bytes_sent)
    return averaged, stats


class CollectiveExchange:
    """
    ワーカースレッド間の合算（同期BatchNormの統計用）

    全ワーカーが同じ順序で呼び出す必要がある。合算はランク昇順で行う。
    """

    def __init__(self, workers: int):
        self.workers = workers
        self._barrier = threading.Barrier(workers)
        self._slots: List[Optional[np.ndarray]] = [None] * workers
        self._result: Optional[np.ndarray] = None
        self._error: Optional[str] = None
        self.bytes_exchanged = 0
        self.calls = 0

    def allreduce_sum(self, rank: int, values: np.ndarray) -> np.ndarray:
        self._slots[rank] = np.asarray(values)
        if self._barrier.wait() == 0:
            shapes = {slot.shape for slot in self._slots}
            if len(shapes) != 1:
                self._error = f"合算するベクトルの形状が一致しません: {sorted(shapes)}"
                self._result = None
            else:
                total = self._slots[0].copy()
                for slot in self._slots[1:]:
                    total = total + slot
                self._result = total
                self._error = None
                self.bytes_exchanged += 2 * (self.workers - 1) * total.nbytes
                self.calls += 1
        self._barrier.wait()
        error, result = self._error, self._result
        self._barrier.wait()
        if error:
            raise CollectiveProtocolError(error)
        return result.copy()

    def reducer_for(self, rank: int):
        return lambda values: self.allreduce_sum(rank, values)

    def abort(self) -> None:
        self._barrier.abort()


def verify_consistency(replicas: Sequence[ClassifierModel]) -> None:
    """全レプリカの重み・バッファがランク0とビット単位で一致するか検証"""
    reference = OrderedDict(replicas[0].named_tensors())
    for rank, replica in enumerate(replicas[1:], start=1):
        for name, array in replica.named_tensors():
            if not np.array_equal(array, reference[name]):
                raise CollectiveProtocolError(f"ワーカー{rank}の重みがランク0と一致しません: {name}")


def check_linearity(reference: ClassifierModel, dataset: PatchDataset, shards: Sequence[np.ndarray],
                    averaged: GradientSet, dtype: type, tolerance: float) -> float:
    """
    集約した勾配が全シャードをまとめたバッチの勾配と一致するか検証

    referenceはワーカーと同じ重みを持つ検証用レプリカ。BatchNormは同期なしで全バッチの統計を使う。

    Returns:
        テンソル毎の最大相対誤差

    Raises:
        CollectiveProtocolError: 相対誤差がtoleranceを超えた場合
    """
    pixels, targets = dataset.arrays(np.concatenate(list(shards)), dtype)
    with Tape() as tape:
        _, full = compute_gradients(reference, pixels, targets, tape)
        tape.reset()
    worst = 0.0
    for name, expected in full.items():
        got = averaged[name]
        scale = max(float(np.linalg.norm(expected)), float(np.linalg.norm(got)), 1e-6)
        error = float(np.linalg.norm(got - expected)) / scale
        if error > tolerance:
            raise CollectiveProtocolError(
                f"集約した勾配が全バッチの勾配と一致しません: {name} (相対誤差 {error:.3e} > {tolerance:g})"
            )
        worst = max(worst, error)
    return worst


@dataclass
class DistributedStats:
    """分散学習の統計"""
    train: TrainStats
    workers: int
    topology: str
    step_times: List[float] = field(default_factory=list)
    reduction_bytes: List[int] = field(default_factory=list)
    bn_bytes: int = 0
    linearity_errors: List[float] = field(default_factory=list)

    def to_csv_rows(self) -> List[Dict[str, object]]:
        return [
            {"step": index + 1, "seconds": round(seconds, 6), "reduction_bytes": size}
            for index, (seconds, size) in enumerate(zip(self.step_times, self.reduction_bytes))
        ]


def _worker_step(rank: int, replica: ClassifierModel, dataset: PatchDataset, indices: np.ndarray,
                 exchange: CollectiveExchange, dtype: type, epoch: int, step: int) -> Tuple[float, GradientSet]:
    """1ワーカーの順伝播・逆伝播（同期BatchNorm有効）"""
    try:
        pixels, targets = dataset.arrays(indices, dtype)
        with Tape() as tape, batchnorm_sync(exchange.reducer_for(rank)):
            loss, grads = compute_gradients(replica, pixels, targets, tape)
            tape.reset()
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteLossError(epoch, step, value)
        return value, grads
    except Exception:
        exchange.abort()
        raise


def distributed_train(model_config: ModelConfig, dataset: PatchDataset, pool_cfg: WorkerPoolConfig,
                      train_cfg: TrainConfig, seed: int = 0,
                      dtype: type = np.float32) -> Tuple[ClassifierModel, DistributedStats]:
    """
    W個のワーカーで同期データ並列学習

    各ステップで全ワーカーが同一の重みから自分の分担の勾配を計算し、
    allreduce_meanで平均した勾配に学習率 base_lr·W のAdamを全レプリカで同一に適用する。
    pool_cfg.check_linearityが有効な場合は、検証用レプリカで毎ステップ全バッチの勾配を計算して
    平均勾配と比較する（不一致はCollectiveProtocolError）。

    Args:
        model_config: モデル設定
        dataset: 学習データ
        pool_cfg: ワーカープール設定
        train_cfg: 学習設定（エポック数・減衰・Adamの係数・シャッフルのシード）
        seed: 重み初期化のシード
        dtype: 計算精度

    Returns:
        (ランク0のモデル, 分散学習の統計)
    """
    workers = pool_cfg.workers
    base_lr = pool_cfg.effective_lr(train_cfg.base_lr)
    if workers == 1:
        model = build_model(model_config, seed=seed, dtype=dtype)
        single_cfg = replace(train_cfg, batch_size=pool_cfg.per_worker_batch)
        model, stats = train(model, dataset, single_cfg, base_lr=base_lr)
        return model, DistributedStats(train=stats, workers=1, topology=pool_cfg.reduction_topology,
                                       step_times=[], reduction_bytes=[])

    replicas = [build_model(model_config, seed=seed, dtype=dtype) for _ in range(workers)]
    check_dataset_matches(replicas[0], dataset)
    if len(dataset) < pool_cfg.global_batch:
        raise ValueError(f"データ数({len(dataset)})がグローバルバッチ({pool_cfg.global_batch})より少ないです")
    dtype = model_dtype(replicas[0])
    optimizers = [AdamOptimizer(replica, train_cfg) for replica in replicas]
    for replica in replicas:
        replica.train()
    checker: Optional[ClassifierModel] = None
    if pool_cfg.check_linearity:
        checker = build_model(model_config, seed=seed, dtype=dtype)
        checker.train()
        optimizers.append(AdamOptimizer(checker, train_cfg))

    stats = DistributedStats(train=TrainStats(), workers=workers, topology=pool_cfg.reduction_topology)
    tracker = EpochProgress(total=train_cfg.epochs, label=f"分散学習(W={workers})")
    logger.info(
        f"分散学習開始: ワーカー{workers}, ワーカー毎バッチ{pool_cfg.per_worker_batch}, "
        f"学習率{base_lr:g}, トポロジー{pool_cfg.reduction_topology}"
    )

    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="worker") as executor:
        for epoch in range(train_cfg.epochs):
            epoch_start = time.perf_counter()
            lr = lr_schedule(epoch, train_cfg, base_lr)
            steps = shard_batches(epoch_order(len(dataset), train_cfg.seed, epoch), workers, pool_cfg.per_worker_batch)
            exchange = CollectiveExchange(workers)
            total_loss = 0.0
            for step_index, shards in enumerate(steps):
                step_start = time.perf_counter()
                futures = [
                    executor.submit(_worker_step, rank, replicas[rank], dataset, shards[rank], exchange, dtype,
                                    epoch, step_index)
                    for rank in range(workers)
                ]
                wait(futures)
                errors = [future.exception() for future in futures if future.exception() is not None]
                if errors:
                    # 中断による二次的なバリア例外より元の例外を優先
                    primary = [e for e in errors if not isinstance(e, threading.BrokenBarrierError)]
                    raise (primary or errors)[0]
                outcomes = [future.result() for future in futures]
                step_loss = float(np.mean([loss for loss, _ in outcomes]))
                averaged, reduction = allreduce_mean([grads for _, grads in outcomes], pool_cfg.reduction_topology)
                if checker is not None:
                    stats.linearity_errors.append(
                        check_linearity(checker, dataset, shards, averaged, dtype, pool_cfg.linearity_tolerance))
                for optimizer in optimizers:
                    optimizer.step(averaged, lr)
                verify_consistency(replicas)

                total_loss += step_loss
                stats.train.steps += 1
                stats.train.samples_seen += pool_cfg.global_batch
                stats.step_times.append(time.perf_counter() - step_start)
                stats.reduction_bytes.append(reduction.bytes_sent)
            stats.bn_bytes += exchange.bytes_exchanged
            stats.train.epoch_losses.append(total_loss / max(len(steps), 1))
            stats.train.learning_rates.append(lr)
            stats.train.epoch_times.append(time.perf_counter() - epoch_start)
            tracker.advance(epoch + 1, train_cfg.epochs, f"損失: {stats.train.epoch_losses[-1]:.4f}")
    stats.train.wall_time = time.perf_counter() - start
    if train_cfg.epochs:
        tracker.finish()
    model = replicas[0]
    model.eval()
    return model, stats
