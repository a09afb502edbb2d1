"""
ベンチマークランナーのユニットテスト
"""

import shutil
import tempfile
from dataclasses import replace
from pathlib import Path

import pytest

from models.architecture import ConfigurationError
from models.config import AppConfig, DataConfig, OutputConfig, TrainConfig
from services.benchmark_runner import (
    REPORT_COLUMNS, BenchmarkEntry, BenchmarkResult, BenchmarkRow, BenchmarkRunner, ManifestError,
    best_rows_by_family, channel_suite, create_benchmark_report, ladder_table_markdown,
    manifest_from_entries, model_config_for, parse_manifest, prepare_datasets, resolution_suite,
    results_csv_rows, results_table_markdown, scale_plan
)
from services.synthetic_data import synth_generate
from services.zoo_registry import ZooRegistry
from utils.file_manager import FileManager


SMALL_TRAINING = TrainConfig(epochs=1, base_lr=0.01, decay_epoch=None, batch_size=8)
SMALL_DATA = DataConfig(n_train=16, n_test=4, resolution=8, num_classes=4, seed=1)


def _row(model, family, f_score, seconds=3725.0):
    return BenchmarkRow(model=model, family=family, accuracy=50.0, precision=60.0, recall=55.0,
                        f_score=f_score, training_seconds=seconds, inference_rate=120.5, model_size=306803)


class TestBenchmarkResult:
    """BenchmarkResult のテスト"""

    def test_init(self):
        """初期化テスト"""
        result = BenchmarkResult()
        assert result.total_entries == 0
        assert result.rows == []
        assert result.end_time is None
        assert result.success_rate == 0.0
        assert result.exit_code == 0

    def test_failed_entry_sets_exit_code(self):
        """失敗したエントリがある場合の終了コードのテスト"""
        result = BenchmarkResult()
        result.total_entries = 2
        result.rows.append(_row("WRNB0", "wrn", 60.0))
        result.failed_entries.append("WRNB9")
        assert result.success_rate == 50.0
        assert result.exit_code == 1

    def test_summary(self):
        """サマリーのテスト"""
        result = BenchmarkResult()
        result.add_warning("警告")
        result.complete()
        summary = result.get_summary()
        assert summary["has_warnings"] is True
        assert summary["has_errors"] is False
        assert summary["end_time"] is not None


class TestManifest:
    """マニフェストのテスト"""

    def test_defaults_are_merged(self):
        """既定値とエントリの値の合成のテスト"""
        entries = parse_manifest({
            "defaults": {"training": {"epochs": 2, "decay_epoch": None}, "data": {"resolution": 16}, "workers": 2},
            "entries": [
                {"model": "WRNB0-ECA"},
                {"model": "ViT/4", "label": "ViT", "training": {"base_lr": 0.0005}, "workers": 1},
            ],
        })
        assert [e.display_name for e in entries] == ["WRNB0-ECA", "ViT"]
        assert entries[0].training.epochs == 2
        assert entries[0].data.resolution == 16
        assert entries[0].workers == 2
        assert entries[1].training.base_lr == 0.0005
        assert entries[1].training.epochs == 2
        assert entries[1].workers == 1

    def test_empty_manifest(self):
        """空のマニフェストのテスト"""
        assert parse_manifest({}) == []
        assert parse_manifest({"entries": []}) == []

    def test_missing_model(self):
        """modelがないエントリのテスト"""
        with pytest.raises(ManifestError, match="modelが必要"):
            parse_manifest({"entries": [{"label": "x"}]})

    def test_unknown_key(self):
        """未知のキーのテスト"""
        with pytest.raises(ManifestError, match="未知のキー"):
            parse_manifest({"entries": [{"model": "WRNB0", "optimizer": "sgd"}]})

    def test_invalid_section(self):
        """不正な学習設定のテスト"""
        with pytest.raises(ManifestError, match="entries\\[0\\].training"):
            parse_manifest({"entries": [{"model": "WRNB0", "training": {"epochs": 5, "decay_epoch": 5}}]})
        with pytest.raises(ManifestError, match="辞書"):
            parse_manifest({"entries": [{"model": "WRNB0", "data": [1]}]})

    def test_entries_must_be_list(self):
        """entriesがリストでない場合のテスト"""
        with pytest.raises(ManifestError, match="リスト"):
            parse_manifest({"entries": {"model": "WRNB0"}})

    def test_manifest_from_entries(self):
        """エントリからマニフェストへの変換のテスト"""
        entries = resolution_suite(template=BenchmarkEntry(model="WRNB0-ECA", training=SMALL_TRAINING))
        assert parse_manifest(manifest_from_entries(entries)) == entries

    def test_ablation_suites(self):
        """アブレーションのエントリのテスト"""
        resolutions = resolution_suite()
        assert [e.data.resolution for e in resolutions] == [60, 70, 80, 90, 100, 110, 120]
        assert resolutions[0].label == "WRNB0-ECA@60"
        channels = channel_suite()
        assert [e.data.channel_mode for e in channels] == ["rgb", "rgb_nir", "all"]
        assert channels[1].label == "WRNB0-ECA[rgb_nir]"


class TestReportTables:
    """結果表のテスト"""

    def test_best_row_per_family(self):
        """ファミリー毎の最良行のテスト（同点は先頭）"""
        rows = [_row("WRNB0", "wrn", 50.0), _row("WRNB1", "wrn", 60.0), _row("WRNB2", "wrn", 60.0),
                _row("ViT/20", "vit", 40.0)]
        assert best_rows_by_family(rows) == {"wrn": 1, "vit": 3}

    def test_markdown_bolds_once_per_family(self):
        """最良のFスコアがファミリー毎に1回だけ太字になることのテスト"""
        rows = [_row("WRNB0", "wrn", 50.0), _row("WRNB1", "wrn", 60.0), _row("ViT/20", "vit", 40.0)]
        table = results_table_markdown(rows)
        lines = table.strip().splitlines()
        assert lines[0] == "| " + " | ".join(REPORT_COLUMNS) + " |"
        assert [("**" in line) for line in lines[2:]] == [False, True, True]

    def test_masked_golden_row(self):
        """時間の列を伏せた行の完全一致テスト"""
        table = results_table_markdown([_row("WRNB0", "wrn", 57.41)], mask_timing=True)
        assert table.splitlines()[2] == "| WRNB0 | 50.00 | 60.00 | 55.00 | **57.41** | - | - | - | 306803 |"

    def test_unmasked_timing_cells(self):
        """時間の列の表示のテスト"""
        cells = _row("WRNB0", "wrn", 57.41).cells()
        assert cells["Training Time (h.mm)"] == "1.02"
        assert cells["Training Time (s)"] == "3725.000"
        assert cells["Inference Rate (img/s)"] == "120.5"

    def test_csv_rows(self):
        """CSV用の行のテスト"""
        rows = results_csv_rows([_row("ViT/20", "vit", 40.0)], mask_timing=True)
        assert rows[0]["Family"] == "ViT"
        assert rows[0]["Training Time (s)"] == "-"
        assert rows[0]["F-Score"] == "40.00"

    def test_empty_report(self):
        """空の結果のレポートのテスト"""
        result = BenchmarkResult()
        result.complete()
        report = create_benchmark_report(result, mask_timing=True)
        assert "開始時刻" not in report
        assert "- 対象エントリ数: 0" in report
        assert "問題は見つかりませんでした" in report

    def test_scale_plan(self):
        """スケールラダーの表のテスト"""
        rows = scale_plan("WRNB0-ECA", phis=range(3))
        assert [row.name for row in rows] == ["WRNB0-ECA", "WRNB1-ECA", "WRNB2-ECA"]
        table = ladder_table_markdown(rows)
        assert "| WRNB0-ECA | 0 | 1.0000 | 1.0000 | 1.0000 | 60 | 306,817 |" in table

    def test_scale_plan_requires_base(self):
        """φ=0以外を基本にした場合のテスト"""
        with pytest.raises(ConfigurationError, match="φ=0"):
            scale_plan("WRNB1")


class TestDatasets:
    """データ準備のテスト"""

    def setup_method(self):
        """テストセットアップ"""
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        """テストクリーンアップ"""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_synthetic(self):
        """合成データの準備のテスト"""
        train_set, test_set = prepare_datasets(replace(SMALL_DATA, channel_mode="rgb"))
        assert len(train_set) == 16
        assert len(test_set) == 4
        assert train_set.descriptor.bands == ("B04", "B03", "B02")
        assert not set(train_set.ids) & set(test_set.ids)

    def test_from_root(self):
        """ディレクトリからの読み込みのテスト"""
        file_manager = FileManager(self.temp_dir)
        file_manager.write_dataset(synth_generate(3, resolution=8, seed=1), "data/train")
        file_manager.write_dataset(synth_generate(2, resolution=8, seed=2, split="test"), "data/test")
        data_cfg = DataConfig(root=str(Path(self.temp_dir) / "data"), resolution=4, channel_mode="rgb_nir")
        train_set, test_set = prepare_datasets(data_cfg, file_manager)
        assert (len(train_set), len(test_set)) == (3, 2)
        assert train_set.descriptor.resolution == 4
        assert train_set.descriptor.channels == 4

    def test_model_config_follows_dataset(self):
        """モデル設定の入力形状がデータセットに合わせられることのテスト"""
        train_set = synth_generate(1, num_classes=5, channels=3, resolution=8)
        config = model_config_for("WRNB0-SE", train_set, {"num_classes": 19})
        assert (config.resolution, config.in_channels, config.num_classes) == (8, 3, 5)


class TestBenchmarkRunner:
    """BenchmarkRunner のテスト"""

    def setup_method(self):
        """テストセットアップ"""
        self.temp_dir = tempfile.mkdtemp()
        self.config = AppConfig(output=OutputConfig(directory=self.temp_dir, report_name="bench"))

    def teardown_method(self):
        """テストクリーンアップ"""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def _entry(self, model, **kwargs):
        return BenchmarkEntry(model=model, training=SMALL_TRAINING, data=SMALL_DATA, **kwargs)

    def test_failure_does_not_stop_benchmark(self):
        """失敗したエントリがあっても残りを続行することのテスト"""
        runner = BenchmarkRunner(self.config)
        result = runner.run_benchmark([self._entry("NoSuchNet"), self._entry("WRNB0")])
        assert result.total_entries == 2
        assert [row.model for row in result.rows] == ["WRNB0"]
        assert result.failed_entries == ["NoSuchNet"]
        assert "未知のモデル名" in result.errors[0]
        assert result.exit_code == 1
        assert result.rows[0].model_size > 0

    def test_distributed_entry(self):
        """複数ワーカーのエントリのテスト"""
        runner = BenchmarkRunner(self.config)
        row = runner.run_entry(self._entry("WRNB0-ECA", workers=2, per_worker_batch=4))
        assert row.family == "wrn"
        assert 0.0 <= row.f_score <= 100.0

    def test_masked_report_is_reproducible(self):
        """時間を伏せたレポートが実行毎に一致することのテスト"""
        entries = [self._entry("WRNB0"), self._entry("WRNB0-ECA", label="ECA")]
        first = create_benchmark_report(BenchmarkRunner(self.config).run_benchmark(entries), mask_timing=True)
        second = create_benchmark_report(BenchmarkRunner(self.config).run_benchmark(entries), mask_timing=True)
        assert first == second

    def test_write_reports(self):
        """レポートファイルの書き出しのテスト"""
        runner = BenchmarkRunner(self.config)
        result = BenchmarkResult()
        result.rows.append(_row("WRNB0", "wrn", 57.41))
        result.complete()
        markdown_path, csv_path = runner.write_reports(result, mask_timing=True)
        assert markdown_path.name == "bench.md"
        assert "**57.41**" in markdown_path.read_text(encoding="utf-8")
        header = csv_path.read_text(encoding="utf-8").splitlines()[0]
        assert header.split(",")[-1] == "Family"

    def test_zoo_export(self):
        """ズーへのエクスポートのテスト"""
        zoo = ZooRegistry(Path(self.temp_dir) / "zoo")
        runner = BenchmarkRunner(self.config, zoo=zoo)
        runner.run_entry(self._entry("WRNB0", label="WRNB0-small"))
        assert "WRNB0-small" in zoo.entries
        assert "f_score" in zoo.entries["WRNB0-small"].metrics

    def test_zero_f_score_warning(self, mocker):
        """Fスコアが0のエントリに警告が出ることのテスト"""
        runner = BenchmarkRunner(self.config)
        zero = _row("WRNB0", "wrn", 0.0)
        zero.metrics = {"f_score": 0.0}
        mocker.patch.object(runner, "run_entry", return_value=zero)
        result = runner.run_benchmark([self._entry("WRNB0")])
        assert result.warnings == ["WRNB0: Fスコアが0です"]
        assert "エポック数や学習率" in create_benchmark_report(result)
