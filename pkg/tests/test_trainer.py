"""
学習サービスのユニットテスト
"""

from unittest.mock import MagicMock

import numpy as np
import pytest

from models.architecture import ConfigurationError, ModelConfig
from models.config import TrainConfig
from models.dataset import DatasetDescriptor, PatchDataset
from nn.layers import Parameter
from nn.tensor import Tape
from services.architectures import build_model
from services.synthetic_data import synth_generate
from services.trainer import (
    AdamOptimizer, AdamState, BatchPrefetcher, LowDataRow, NonFiniteLossError, TrainStats,
    adam_step, batch_indices, compute_gradients, epoch_order, evaluate, finetune, format_hmm, low_data_study,
    lr_schedule, predict, train
)
from utils.checkpoint_io import Checkpoint


def _small_config(num_classes=4):
    return ModelConfig(family="wrn", resolution=8, in_channels=3, num_classes=num_classes)


def _small_dataset(n=16, num_classes=4, seed=0):
    return synth_generate(n, num_classes=num_classes, channels=3, resolution=8, seed=seed)


class TestSchedule:
    """学習率スケジュールと時間表記のテスト"""

    def test_step_decay(self):
        """1段階のステップ減衰のテスト"""
        cfg = TrainConfig(epochs=10, base_lr=0.01, decay_epoch=5, decay_factor=0.1)
        assert lr_schedule(4, cfg) == 0.01
        assert lr_schedule(5, cfg) == pytest.approx(0.001)
        assert lr_schedule(9, cfg, base_lr=0.04) == pytest.approx(0.004)

    def test_no_decay(self):
        """減衰なしのテスト"""
        cfg = TrainConfig(epochs=3, base_lr=0.01, decay_epoch=None)
        assert [lr_schedule(e, cfg) for e in range(3)] == [0.01, 0.01, 0.01]

    def test_decay_epoch_must_precede_end(self):
        """減衰エポックが学習エポック数以上の場合のテスト"""
        with pytest.raises(ValueError, match="decay_epoch"):
            TrainConfig(epochs=5, decay_epoch=5)

    @pytest.mark.parametrize("seconds,expected", [(59, "0.00"), (3660, "1.01"), (9000, "2.30")])
    def test_format_hmm(self, seconds, expected):
        """h.mm形式のテスト"""
        assert format_hmm(seconds) == expected


class TestAdam:
    """Adamのテスト"""

    def test_first_step_moves_by_learning_rate(self):
        """最初のステップは学習率とほぼ同じ大きさで動くことのテスト"""
        param = Parameter(np.array([1.0, -1.0]))
        state = adam_step({"w": param}, {"w": np.array([2.0, -0.5])}, AdamState(), lr=0.1)
        np.testing.assert_allclose(param.data, [0.9, -0.9], atol=1e-6)
        assert state.step == 1

    def test_none_gradient_is_skipped(self):
        """勾配がNoneのパラメータは更新されないことのテスト"""
        param = Parameter(np.array([1.0]))
        state = adam_step({"w": param}, {"w": None}, AdamState(), lr=0.1)
        assert param.data[0] == 1.0
        assert "w" not in state.m

    def test_frozen_parameters(self):
        """凍結パラメータが更新されないことのテスト"""
        model = build_model(_small_config(), dtype=np.float64)
        before = model.state_dict()
        optimizer = AdamOptimizer(model, TrainConfig(), frozen=["head.weight"])
        grads = {name: np.ones_like(p.data) for name, p in model.named_parameters()}
        optimizer.step(grads, lr=0.01)
        after = model.state_dict()
        np.testing.assert_array_equal(after["head.weight"], before["head.weight"])
        assert not np.array_equal(after["head.bias"], before["head.bias"])


class TestBatching:
    """データ供給のテスト"""

    def test_epoch_order(self):
        """エポック毎の並べ替えのテスト"""
        first = epoch_order(20, seed=1, epoch=0)
        assert sorted(first.tolist()) == list(range(20))
        np.testing.assert_array_equal(first, epoch_order(20, seed=1, epoch=0))
        assert not np.array_equal(first, epoch_order(20, seed=1, epoch=1))

    def test_batch_indices(self):
        """バッチ分割のテスト"""
        order = np.arange(10)
        assert [len(b) for b in batch_indices(order, 4)] == [4, 4, 2]
        assert [len(b) for b in batch_indices(order, 4, drop_last=True)] == [4, 4]

    @pytest.mark.parametrize("depth", [0, 1, 3])
    def test_prefetcher_keeps_order(self, depth):
        """先読みしても順序が保たれることのテスト"""
        dataset = _small_dataset(n=7)
        batches = batch_indices(np.arange(7)[::-1].copy(), 2)
        fetched = list(BatchPrefetcher(dataset, batches, np.float32, depth=depth))
        assert len(fetched) == 4
        for (pixels, _), indices in zip(fetched, batches):
            np.testing.assert_array_equal(pixels, dataset.arrays(indices)[0])

    def test_prefetcher_propagates_errors(self):
        """生産者スレッドの例外が伝播することのテスト"""
        dataset = MagicMock()
        dataset.arrays.side_effect = OSError("読み込み失敗")
        with pytest.raises(OSError, match="読み込み失敗"):
            list(BatchPrefetcher(dataset, [np.arange(2)], np.float32, depth=2))


class TestTrain:
    """学習ループのテスト"""

    def setup_method(self):
        """テストセットアップ"""
        self.dataset = _small_dataset()
        self.cfg = TrainConfig(epochs=4, base_lr=0.01, decay_epoch=None, batch_size=8)

    def test_train_records_statistics(self):
        """学習統計のテスト"""
        model, stats = train(build_model(_small_config()), self.dataset, self.cfg)
        assert not model.training
        assert len(stats.epoch_losses) == 4
        assert stats.steps == 8
        assert stats.samples_seen == 64
        assert stats.learning_rates == [0.01] * 4
        assert stats.epoch_losses[-1] < stats.epoch_losses[0]
        rows = stats.to_csv_rows()
        assert rows[0]["epoch"] == 1
        assert set(rows[0]) == {"epoch", "loss", "lr", "seconds"}

    def test_training_is_deterministic(self):
        """同じシードで同じ重みになることのテスト"""
        a, _ = train(build_model(_small_config(), seed=2), self.dataset, self.cfg)
        b, _ = train(build_model(_small_config(), seed=2), self.dataset, self.cfg)
        for name, array in a.state_dict().items():
            np.testing.assert_array_equal(array, b.state_dict()[name])

    def test_tape_replay_is_bit_identical(self):
        """同じ重み・バッチの順伝播と逆伝播を2回行うと勾配がビット単位で一致することのテスト"""
        pixels, targets = self.dataset.arrays(np.arange(8))
        results = []
        for _ in range(2):
            model = build_model(_small_config(), seed=5)
            model.train()
            with Tape() as tape:
                loss, grads = compute_gradients(model, pixels, targets, tape)
            results.append((loss.item(), grads))
        assert results[0][0] == results[1][0]
        assert list(results[0][1]) == list(results[1][1])
        for name, grad in results[0][1].items():
            np.testing.assert_array_equal(grad, results[1][1][name], err_msg=name)

    def test_resolution_mismatch(self):
        """解像度がモデルと一致しない場合のテスト"""
        model = build_model(ModelConfig(family="wrn", resolution=16, in_channels=3, num_classes=4))
        with pytest.raises(ConfigurationError, match="リサイズ"):
            train(model, self.dataset, self.cfg)

    def test_empty_dataset(self):
        """空の学習データのテスト"""
        empty = PatchDataset(DatasetDescriptor(bands=("B02", "B03", "B04"), resolution=8, num_classes=4))
        with pytest.raises(ValueError, match="空"):
            train(build_model(_small_config()), empty, self.cfg)

    def test_non_finite_loss(self):
        """損失が非有限値になった場合のテスト"""
        model = build_model(_small_config())
        model.head.bias.data[:] = np.nan
        with pytest.raises(NonFiniteLossError) as exc_info:
            train(model, self.dataset, self.cfg)
        assert exc_info.value.epoch == 0
        assert exc_info.value.batch == 0

    def test_zero_epochs(self):
        """エポック数0のテスト"""
        model, stats = train(build_model(_small_config()), self.dataset, TrainConfig(epochs=0, decay_epoch=None))
        assert stats.steps == 0
        assert stats.training_time_hmm == "0.00"


class TestEvaluate:
    """評価のテスト"""

    def test_predict(self):
        """確率計算のテスト"""
        dataset = _small_dataset(n=5)
        probabilities, elapsed = predict(build_model(_small_config()), dataset, batch_size=2)
        assert probabilities.shape == (5, 4)
        assert ((probabilities > 0) & (probabilities < 1)).all()
        assert elapsed >= 0

    def test_evaluate_report(self):
        """評価レポートのテスト"""
        report = evaluate(build_model(_small_config()), _small_dataset(n=6))
        assert 0.0 <= float(report.micro_f) <= 1.0
        assert report.inference_rate > 0
        assert len(report.per_class_f) == 4

    def test_evaluate_empty(self):
        """空の評価データのテスト"""
        empty = PatchDataset(DatasetDescriptor(bands=("B02", "B03", "B04"), resolution=8, num_classes=4))
        with pytest.raises(ValueError, match="評価データが空"):
            evaluate(build_model(_small_config()), empty)


class TestFinetune:
    """転移学習のテスト"""

    def setup_method(self):
        """テストセットアップ"""
        source = build_model(ModelConfig(family="wrn", resolution=8, in_channels=3, num_classes=4,
                                         name="WRNB0"), seed=1)
        self.checkpoint = Checkpoint(config=source.config, tensors=source.state_dict())
        self.cfg = TrainConfig(epochs=1, base_lr=0.01, decay_epoch=None, batch_size=4)

    def test_frozen_backbone_is_unchanged(self):
        """バックボーン凍結時はヘッドだけが学習されることのテスト"""
        dataset = _small_dataset(n=8, num_classes=3, seed=5)
        model, _ = finetune(self.checkpoint, dataset, 3, freeze_backbone=True, cfg=self.cfg)
        assert model.config.num_classes == 3
        assert model.config.name == "WRNB0-finetuned"
        assert model.head.weight.shape == (128, 3)
        state = model.state_dict()
        for name in model.backbone_parameter_names():
            np.testing.assert_array_equal(state[name], self.checkpoint.tensors[name])
        # BatchNormの移動統計も凍結される
        running = [name for name in state if "running_" in name]
        assert running
        for name in running:
            np.testing.assert_array_equal(state[name], self.checkpoint.tensors[name])

    def test_unfrozen_backbone_changes(self):
        """バックボーンを凍結しない場合は重みが更新されることのテスト"""
        dataset = _small_dataset(n=8, num_classes=3, seed=5)
        model, _ = finetune(self.checkpoint, dataset, 3, freeze_backbone=False, cfg=self.cfg)
        assert not np.array_equal(model.state_dict()["stem.weight"], self.checkpoint.tensors["stem.weight"])

    def test_low_data_study(self):
        """低データ量の比較のテスト"""
        train_set = _small_dataset(n=10, num_classes=4, seed=2)
        test_set = _small_dataset(n=4, num_classes=4, seed=3)
        rows = low_data_study(self.checkpoint, train_set, test_set, self.cfg, fractions=(0.5,), seeds=(0,))
        assert len(rows) == 1
        assert rows[0].train_samples == 5
        assert 0.0 <= rows[0].pretrained_f <= 1.0

    def test_low_data_row(self):
        """比較行の出力のテスト"""
        row = LowDataRow(fraction=0.1, seed=0, train_samples=200, pretrained_f=0.6, scratch_f=0.45)
        assert row.gain == pytest.approx(0.15)
        assert row.to_row()["gain"] == 15.0


class TestTrainStats:
    """TrainStats のテスト"""

    def test_hmm(self):
        """学習時間表記のテスト"""
        assert TrainStats(wall_time=5400).training_time_hmm == "1.30"
