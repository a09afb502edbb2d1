"""
分散学習サービスのユニットテスト
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import pytest

from models.architecture import ModelConfig
from models.config import TrainConfig, WorkerPoolConfig
from services import distributed
from services.architectures import build_model
from services.distributed import (
    CollectiveExchange, CollectiveProtocolError, allreduce_mean, distributed_train,
    shard_batches, verify_consistency
)
from services.synthetic_data import synth_generate
from services.trainer import train
from services.zoo_registry import resolve_model


def _grads(seed, shapes=(("a", (3, 2)), ("b", (5,)))):
    rng = np.random.default_rng(seed)
    return {name: rng.standard_normal(shape) for name, shape in shapes}


class TestShardBatches:
    """バッチ分割のテスト"""

    def test_contiguous_shards(self):
        """ワーカーが連続区間を受け持つことのテスト"""
        steps = shard_batches(np.arange(10), workers=2, per_worker_batch=2)
        assert [[s.tolist() for s in shards] for shards in steps] == [
            [[0, 1], [2, 3]],
            [[4, 5], [6, 7]],
        ]

    def test_single_worker_keeps_remainder(self):
        """単一ワーカーでは端数バッチを残すことのテスト"""
        steps = shard_batches(np.arange(5), workers=1, per_worker_batch=2)
        assert [len(shards[0]) for shards in steps] == [2, 2, 1]

    def test_invalid_arguments(self):
        """無効な引数のテスト"""
        with pytest.raises(ValueError):
            shard_batches(np.arange(4), workers=0, per_worker_batch=2)


class TestAllreduce:
    """勾配集約のテスト"""

    @pytest.mark.parametrize("topology", ["ring", "tree"])
    @pytest.mark.parametrize("workers", [2, 3, 5])
    def test_mean(self, topology, workers):
        """要素毎平均のテスト"""
        worker_grads = [_grads(seed) for seed in range(workers)]
        averaged, stats = allreduce_mean(worker_grads, topology)
        for name in ("a", "b"):
            expected = np.mean([g[name] for g in worker_grads], axis=0)
            np.testing.assert_allclose(averaged[name], expected, rtol=1e-12, atol=1e-14)
        assert stats.payload_bytes == 11 * 8
        assert stats.bytes_sent == 2 * (workers - 1) * stats.payload_bytes

    def test_bitwise_reproducible(self):
        """同じ入力で結果がビット単位で一致することのテスト"""
        worker_grads = [_grads(seed) for seed in range(4)]
        first, _ = allreduce_mean(worker_grads, "ring")
        second, _ = allreduce_mean(worker_grads, "ring")
        for name in first:
            np.testing.assert_array_equal(first[name], second[name])

    def test_single_worker(self):
        """単一ワーカーでは通信しないことのテスト"""
        grads = _grads(0)
        averaged, stats = allreduce_mean([grads])
        np.testing.assert_array_equal(averaged["a"], grads["a"])
        assert stats.bytes_sent == 0

    def test_name_mismatch(self):
        """テンソル名の不一致のテスト"""
        other = _grads(1, shapes=(("a", (3, 2)), ("c", (5,))))
        with pytest.raises(CollectiveProtocolError, match="テンソル名"):
            allreduce_mean([_grads(0), other])

    def test_shape_mismatch(self):
        """テンソル形状の不一致のテスト"""
        other = _grads(1, shapes=(("a", (2, 3)), ("b", (5,))))
        with pytest.raises(CollectiveProtocolError, match="形状"):
            allreduce_mean([_grads(0), other])

    def test_invalid_topology(self):
        """無効なトポロジーのテスト"""
        with pytest.raises(ValueError, match="トポロジー"):
            allreduce_mean([_grads(0)], "star")


class TestCollectiveExchange:
    """CollectiveExchange のテスト"""

    def test_allreduce_sum(self):
        """全ワーカーが同じ合計を受け取ることのテスト"""
        exchange = CollectiveExchange(3)
        with ThreadPoolExecutor(max_workers=3) as executor:
            futures = [executor.submit(exchange.allreduce_sum, rank, np.array([rank + 1.0, 1.0]))
                       for rank in range(3)]
            results = [future.result(timeout=10) for future in futures]
        for result in results:
            np.testing.assert_array_equal(result, [6.0, 3.0])
        assert exchange.calls == 1
        assert exchange.bytes_exchanged == 2 * 2 * 16

    def test_shape_mismatch(self):
        """形状が一致しない場合は全ワーカーが失敗することのテスト"""
        exchange = CollectiveExchange(2)
        with ThreadPoolExecutor(max_workers=2) as executor:
            futures = [executor.submit(exchange.allreduce_sum, 0, np.zeros(2)),
                       executor.submit(exchange.allreduce_sum, 1, np.zeros(3))]
            for future in futures:
                with pytest.raises(CollectiveProtocolError, match="形状"):
                    future.result(timeout=10)


class TestVerifyConsistency:
    """レプリカ整合性検証のテスト"""

    def test_identical_replicas(self):
        """同じシードのレプリカは一致することのテスト"""
        config = ModelConfig(family="wrn", in_channels=2, num_classes=3)
        verify_consistency([build_model(config, seed=4), build_model(config, seed=4)])

    def test_diverged_replica(self):
        """重みが異なるレプリカの検出のテスト"""
        config = ModelConfig(family="wrn", in_channels=2, num_classes=3)
        replicas = [build_model(config, seed=4), build_model(config, seed=4)]
        replicas[1].head.bias.data[0] += 1.0
        with pytest.raises(CollectiveProtocolError, match="ワーカー1.*head.bias"):
            verify_consistency(replicas)


class TestDistributedTrain:
    """分散学習のテスト"""

    def setup_method(self):
        """テストセットアップ"""
        self.config = ModelConfig(family="wrn", resolution=8, in_channels=3, num_classes=4)
        self.dataset = synth_generate(32, num_classes=4, channels=3, resolution=8, seed=6)
        self.train_cfg = TrainConfig(epochs=2, base_lr=0.005, decay_epoch=None, seed=3)

    @pytest.mark.parametrize("topology", ["ring", "tree"])
    def test_matches_single_worker(self, topology):
        """W·bのバッチとbase_lr·Wの単一ワーカー学習と一致することのテスト"""
        pool_cfg = WorkerPoolConfig(workers=4, per_worker_batch=4, reduction_topology=topology)
        model, stats = distributed_train(self.config, self.dataset, pool_cfg, self.train_cfg,
                                         seed=1, dtype=np.float64)

        reference = build_model(self.config, seed=1, dtype=np.float64)
        single_cfg = replace(self.train_cfg, batch_size=16)
        reference, reference_stats = train(reference, self.dataset, single_cfg, base_lr=0.005 * 4)

        for name, array in reference.state_dict().items():
            np.testing.assert_allclose(model.state_dict()[name], array, rtol=1e-7, atol=1e-9, err_msg=name)
        np.testing.assert_allclose(stats.train.epoch_losses, reference_stats.epoch_losses, rtol=1e-9)
        assert stats.train.steps == 4
        assert stats.train.learning_rates == [0.02, 0.02]
        assert len(stats.reduction_bytes) == 4
        assert stats.bn_bytes > 0
        assert not model.training

    def test_single_worker_delegates(self):
        """W=1では単一ワーカーの学習になることのテスト"""
        pool_cfg = WorkerPoolConfig(workers=1, per_worker_batch=8)
        model, stats = distributed_train(self.config, self.dataset, pool_cfg, self.train_cfg)
        assert stats.workers == 1
        assert stats.train.steps == 8
        assert stats.reduction_bytes == []

    def test_dataset_smaller_than_global_batch(self):
        """データ数がグローバルバッチ未満の場合のテスト"""
        pool_cfg = WorkerPoolConfig(workers=4, per_worker_batch=16)
        with pytest.raises(ValueError, match="グローバルバッチ"):
            distributed_train(self.config, self.dataset, pool_cfg, self.train_cfg)

    def test_step_rows(self):
        """ステップ毎のCSV行のテスト"""
        pool_cfg = WorkerPoolConfig(workers=2, per_worker_batch=8)
        _, stats = distributed_train(self.config, self.dataset, pool_cfg, replace(self.train_cfg, epochs=1))
        rows = stats.to_csv_rows()
        assert [row["step"] for row in rows] == [1, 2]
        assert all(row["reduction_bytes"] > 0 for row in rows)

    def test_linearity_check_passes(self):
        """平均勾配が全バッチの勾配と一致し検証を通ることのテスト"""
        pool_cfg = WorkerPoolConfig(workers=4, per_worker_batch=4, check_linearity=True, linearity_tolerance=1e-9)
        _, stats = distributed_train(self.config, self.dataset, pool_cfg, self.train_cfg, seed=1, dtype=np.float64)
        assert len(stats.linearity_errors) == stats.train.steps == 4
        assert max(stats.linearity_errors) < 1e-9

    def test_linearity_check_detects_mismatch(self, mocker):
        """集約結果が全バッチの勾配とずれた場合に検出されることのテスト"""
        original = distributed.allreduce_mean

        def skewed(worker_grads, topology="ring"):
            averaged, reduction = original(worker_grads, topology)
            return {name: grad * 1.5 for name, grad in averaged.items()}, reduction

        mocker.patch("services.distributed.allreduce_mean", side_effect=skewed)
        pool_cfg = WorkerPoolConfig(workers=2, per_worker_batch=8, check_linearity=True)
        with pytest.raises(CollectiveProtocolError, match="全バッチの勾配"):
            distributed_train(self.config, self.dataset, pool_cfg, self.train_cfg, seed=1, dtype=np.float64)

    def test_linearity_check_off_by_default(self):
        """既定では検証しないことのテスト"""
        pool_cfg = WorkerPoolConfig(workers=2, per_worker_batch=8)
        _, stats = distributed_train(self.config, self.dataset, pool_cfg, replace(self.train_cfg, epochs=1))
        assert stats.linearity_errors == []

    def test_invalid_linearity_tolerance(self):
        """無効な許容誤差のテスト"""
        with pytest.raises(ValueError, match="linearity_tolerance"):
            WorkerPoolConfig(workers=2, linearity_tolerance=0.0)


@pytest.mark.slow
class TestDistributedAcceptance:
    """受け入れ規模の分散学習の検証"""

    def setup_method(self):
        """テストセットアップ"""
        self.config = resolve_model("WRNB0-ECA", resolution=32, in_channels=10, num_classes=8)
        self.dataset = synth_generate(64, num_classes=8, channels=10, resolution=32, seed=7)
        self.train_cfg = TrainConfig(epochs=5, base_lr=1e-3, decay_epoch=None, seed=3)
        self.pool_cfg = WorkerPoolConfig(workers=4, per_worker_batch=8)

    def test_four_workers_match_single_worker(self):
        """W=4×b=8の学習が1×b=32・学習率base·4の学習と一致することのテスト"""
        model, stats = distributed_train(self.config, self.dataset, self.pool_cfg, self.train_cfg,
                                         seed=1, dtype=np.float64)
        single_pool = WorkerPoolConfig(workers=1, per_worker_batch=32, base_lr=self.train_cfg.base_lr * 4)
        reference, reference_stats = distributed_train(self.config, self.dataset, single_pool, self.train_cfg,
                                                       seed=1, dtype=np.float64)

        assert stats.train.steps == reference_stats.train.steps == 10
        for name, array in reference.state_dict().items():
            np.testing.assert_allclose(model.state_dict()[name], array, rtol=1e-9, atol=1e-10, err_msg=name)

    def test_repeated_runs_are_bit_identical(self):
        """同じ設定のW=4の学習がビット単位で再現することのテスト"""
        first, _ = distributed_train(self.config, self.dataset, self.pool_cfg, self.train_cfg,
                                     seed=1, dtype=np.float64)
        second, _ = distributed_train(self.config, self.dataset, self.pool_cfg, self.train_cfg,
                                      seed=1, dtype=np.float64)
        for name, array in first.state_dict().items():
            np.testing.assert_array_equal(second.state_dict()[name], array, err_msg=name)
