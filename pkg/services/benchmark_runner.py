"""
ベンチマークランナー
マニフェストの各エントリを学習・評価し、結果表（Markdown / CSV）を作成するクラス
"""

import logging
import threading
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.architecture import ConfigurationError, ModelConfig
from models.config import AppConfig, DataConfig, TrainConfig, WorkerPoolConfig
from models.dataset import PatchDataset
from models.scaling import ScalingCoefficients
from services.architectures import count_params
from services.job_pool import EpochProgress, JobPool
from services.distributed import distributed_train
from services.scaling import MAX_RESOLUTION, MIN_RESOLUTION, RESOLUTION_STEP, LadderRow, scale_ladder
from services.synthetic_data import channel_subset, resize_dataset, synth_splits
from services.trainer import evaluate, format_hmm
from services.zoo_registry import ZooRegistry, resolve_model
from utils.file_manager import FileManager


REPORT_COLUMNS = (
    "Model", "Accuracy", "Precision", "Recall", "F-Score",
    "Training Time (h.mm)", "Training Time (s)", "Inference Rate (img/s)", "Model Size",
)
TIMING_COLUMNS = ("Training Time (h.mm)", "Training Time (s)", "Inference Rate (img/s)")
TIMING_MASK = "-"

FAMILY_LABELS = {"wrn": "WRN", "efficientnet": "EfficientNet", "mlpmixer": "MLPMixer", "vit": "ViT"}
ABLATION_CHANNEL_MODES = ("rgb", "rgb_nir", "all")
ABLATION_RESOLUTIONS = tuple(range(MIN_RESOLUTION, MAX_RESOLUTION + 1, RESOLUTION_STEP))

ENTRY_KEYS = {"model", "label", "overrides", "training", "data", "workers", "per_worker_batch", "topology", "seed"}


class ManifestError(ConfigurationError):
    """ベンチマークマニフェストの形式エラー"""
    pass


@dataclass
class BenchmarkEntry:
    """マニフェストの1エントリ"""
    model: str
    label: str = ""
    overrides: Dict[str, Any] = field(default_factory=dict)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    workers: int = 1
    per_worker_batch: Optional[int] = None
    topology: str = "ring"
    seed: int = 0

    @property
    def display_name(self) -> str:
        return self.label or self.model

    def pool_config(self) -> WorkerPoolConfig:
        return WorkerPoolConfig(
            workers=self.workers,
            per_worker_batch=self.per_worker_batch or self.training.batch_size,
            reduction_topology=self.topology,
        )


@dataclass
class BenchmarkRow:
    """結果表の1行"""
    model: str
    family: str
    accuracy: float
    precision: float
    recall: float
    f_score: float
    training_seconds: float
    inference_rate: float
    model_size: int
    metrics: Dict[str, float] = field(default_factory=dict)

    def cells(self) -> Dict[str, str]:
        """列名→表示文字列"""
        return {
            "Model": self.model,
            "Accuracy": f"{self.accuracy:.2f}",
            "Precision": f"{self.precision:.2f}",
            "Recall": f"{self.recall:.2f}",
            "F-Score": f"{self.f_score:.2f}",
            "Training Time (h.mm)": format_hmm(self.training_seconds),
            "Training Time (s)": f"{self.training_seconds:.3f}",
            "Inference Rate (img/s)": f"{self.inference_rate:.1f}",
            "Model Size": str(self.model_size),
        }


class BenchmarkResult:
    """ベンチマーク結果を表すクラス"""

    def __init__(self):
        self.start_time = datetime.now()
        self.end_time: Optional[datetime] = None
        self.total_entries = 0
        self.rows: List[BenchmarkRow] = []
        self.failed_entries: List[str] = []
        self.errors: List[str] = []
        self.warnings: List[str] = []

    def add_error(self, error: str) -> None:
        """エラーを追加"""
        self.errors.append(error)

    def add_warning(self, warning: str) -> None:
        """警告を追加"""
        self.warnings.append(warning)

    def complete(self) -> None:
        """ベンチマーク完了時に呼び出す"""
        self.end_time = datetime.now()

    @property
    def duration(self) -> float:
        """ベンチマークにかかった時間（秒）"""
        if self.end_time:
            return (self.end_time - self.start_time).total_seconds()
        return 0.0

    @property
    def success_rate(self) -> float:
        """成功率（%）"""
        if self.total_entries == 0:
            return 0.0
        return len(self.rows) / self.total_entries * 100

    @property
    def exit_code(self) -> int:
        return 1 if self.failed_entries else 0

    def get_summary(self) -> Dict[str, Any]:
        """ベンチマーク結果のサマリーを取得"""
        return {
            "start_time": self.start_time.isoformat(),
            "end_time": self.end_time.isoformat() if self.end_time else None,
            "duration_seconds": self.duration,
            "total_entries": self.total_entries,
            "successful_entries": len(self.rows),
            "failed_entries": len(self.failed_entries),
            "success_rate": self.success_rate,
            "error_count": len(self.errors),
            "warning_count": len(self.warnings),
            "has_errors": len(self.errors) > 0,
            "has_warnings": len(self.warnings) > 0,
        }


# マニフェスト

def _section(base, values: Any, label: str):
    if values is None:
        return base
    if not isinstance(values, dict):
        raise ManifestError(f"{label}は辞書である必要があります")
    try:
        return replace(base, **values)
    except (TypeError, ValueError) as e:
        raise ManifestError(f"{label}が不正です: {str(e)}")


def parse_manifest(data: Dict[str, Any], defaults: Optional[AppConfig] = None) -> List[BenchmarkEntry]:
    """
    マニフェスト（JSON）をエントリに変換

    形式:
        {"defaults": {"training": {...}, "data": {...}, "workers": 1},
         "entries": [{"model": "WRNB0-ECA", "training": {...}, "data": {...}, "workers": 4}, ...]}

    Args:
        data: マニフェストの辞書
        defaults: 既定値の元になるアプリケーション設定

    Returns:
        エントリのリスト
    """
    if not isinstance(data, dict):
        raise ManifestError("マニフェストはJSONオブジェクトである必要があります")
    app = defaults or AppConfig()
    shared = data.get("defaults") or {}
    if not isinstance(shared, dict):
        raise ManifestError("defaultsは辞書である必要があります")
    base_training = _section(app.training, shared.get("training"), "defaults.training")
    base_data = _section(app.data, shared.get("data"), "defaults.data")
    base_workers = shared.get("workers", app.distributed.workers)
    base_topology = shared.get("topology", app.distributed.reduction_topology)

    raw_entries = data.get("entries", [])
    if not isinstance(raw_entries, list):
        raise ManifestError("entriesはリストである必要があります")
    entries = []
    for index, raw in enumerate(raw_entries):
        label = f"entries[{index}]"
        if not isinstance(raw, dict) or "model" not in raw:
            raise ManifestError(f"{label}: modelが必要です")
        unknown = set(raw) - ENTRY_KEYS
        if unknown:
            raise ManifestError(f"{label}: 未知のキー {sorted(unknown)}")
        overrides = raw.get("overrides") or {}
        if not isinstance(overrides, dict):
            raise ManifestError(f"{label}.overridesは辞書である必要があります")
        entries.append(BenchmarkEntry(
            model=raw["model"],
            label=raw.get("label", ""),
            overrides=overrides,
            training=_section(base_training, raw.get("training"), f"{label}.training"),
            data=_section(base_data, raw.get("data"), f"{label}.data"),
            workers=int(raw.get("workers", base_workers)),
            per_worker_batch=raw.get("per_worker_batch"),
            topology=raw.get("topology", base_topology),
            seed=int(raw.get("seed", 0)),
        ))
    return entries


def manifest_from_entries(entries: Sequence[BenchmarkEntry]) -> Dict[str, Any]:
    """エントリをマニフェストの辞書に変換"""
    return {"entries": [
        {
            "model": entry.model,
            "label": entry.label,
            "overrides": dict(entry.overrides),
            "training": entry.training.to_dict(),
            "data": asdict(entry.data),
            "workers": entry.workers,
            "per_worker_batch": entry.per_worker_batch,
            "topology": entry.topology,
            "seed": entry.seed,
        }
        for entry in entries
    ]}


def resolution_suite(model: str = "WRNB0-ECA", resolutions: Sequence[int] = ABLATION_RESOLUTIONS,
                     template: Optional[BenchmarkEntry] = None) -> List[BenchmarkEntry]:
    """解像度アブレーション（60〜120px）のエントリ"""
    template = template or BenchmarkEntry(model=model)
    return [
        replace(template, model=model, label=f"{model}@{px}", data=replace(template.data, resolution=px))
        for px in resolutions
    ]


def channel_suite(model: str = "WRNB0-ECA", modes: Sequence[str] = ABLATION_CHANNEL_MODES,
                  template: Optional[BenchmarkEntry] = None) -> List[BenchmarkEntry]:
    """チャネルアブレーション（rgb / rgb_nir / all）のエントリ"""
    template = template or BenchmarkEntry(model=model)
    return [
        replace(template, model=model, label=f"{model}[{mode}]", data=replace(template.data, channel_mode=mode))
        for mode in modes
    ]


# データ

def prepare_datasets(data_cfg: DataConfig,
                     file_manager: Optional[FileManager] = None) -> Tuple[PatchDataset, PatchDataset]:
    """
    学習用・評価用データセットを用意

    rootが指定されていれば root/train と root/test を読み込み、
    なければ合成データを生成する。その後チャネルモードと解像度を合わせる。
    """
    if data_cfg.root:
        file_manager = file_manager or FileManager()
        root = Path(data_cfg.root).resolve()
        train_set = file_manager.load_dataset(root / "train")
        test_set = file_manager.load_dataset(root / "test")
    else:
        source_mode = "mm" if data_cfg.channel_mode == "mm" else "all"
        train_set, test_set = synth_splits(
            data_cfg.n_train, data_cfg.n_test, seed=data_cfg.seed, num_classes=data_cfg.num_classes,
            resolution=data_cfg.resolution, noise=data_cfg.noise, mode=source_mode,
        )
    train_set = resize_dataset(channel_subset(train_set, data_cfg.channel_mode), data_cfg.resolution)
    test_set = resize_dataset(channel_subset(test_set, data_cfg.channel_mode), data_cfg.resolution)
    return train_set, test_set


def model_config_for(name: str, dataset: PatchDataset, overrides: Optional[Dict[str, Any]] = None) -> ModelConfig:
    """モデル名の設定（入力形状はデータセットに合わせる）"""
    descriptor = dataset.descriptor
    return resolve_model(
        name,
        **{**(overrides or {}), "resolution": descriptor.resolution,
           "in_channels": descriptor.channels, "num_classes": descriptor.num_classes},
    )


# レポート

def mask_timings(cells: Dict[str, str]) -> Dict[str, str]:
    """時間に依存する列を伏せる"""
    return {key: (TIMING_MASK if key in TIMING_COLUMNS else value) for key, value in cells.items()}


def best_rows_by_family(rows: Sequence[BenchmarkRow]) -> Dict[str, int]:
    """ファミリー毎に最良Fスコアの行番号（同点は先頭）"""
    best: Dict[str, int] = {}
    for index, row in enumerate(rows):
        current = best.get(row.family)
        if current is None or row.f_score > rows[current].f_score:
            best[row.family] = index
    return best


def results_table_markdown(rows: Sequence[BenchmarkRow], mask_timing: bool = False) -> str:
    """
    結果表（Markdown）

    ファミリー毎に最良のFスコアを太字にする。
    """
    lines = [
        "| " + " | ".join(REPORT_COLUMNS) + " |",
        "|" + "|".join(["---"] + ["---:"] * (len(REPORT_COLUMNS) - 1)) + "|",
    ]
    best = set(best_rows_by_family(rows).values())
    for index, row in enumerate(rows):
        cells = row.cells()
        if mask_timing:
            cells = mask_timings(cells)
        if index in best:
            cells["F-Score"] = f"**{cells['F-Score']}**"
        lines.append("| " + " | ".join(cells[column] for column in REPORT_COLUMNS) + " |")
    return "\n".join(lines) + "\n"


def results_csv_rows(rows: Sequence[BenchmarkRow], mask_timing: bool = False) -> List[Dict[str, str]]:
    """結果表（CSV用の行）"""
    csv_rows = []
    for row in rows:
        cells = mask_timings(row.cells()) if mask_timing else row.cells()
        cells = {column: cells[column] for column in REPORT_COLUMNS}
        cells["Family"] = FAMILY_LABELS.get(row.family, row.family)
        csv_rows.append(cells)
    return csv_rows


def ladder_table_markdown(rows: Sequence[LadderRow]) -> str:
    """スケールラダーの表"""
    lines = ["| Model | φ | Depth | Width | Resolution Multiplier | Resolution | Params |",
             "|---|---:|---:|---:|---:|---:|---:|"]
    for row in rows:
        cells = row.to_row()
        lines.append(
            f"| {cells['model']} | {cells['phi']} | {cells['depth']} | {cells['width']} | "
            f"{cells['resolution_multiplier']} | {cells['resolution']} | {cells['params']:,} |"
        )
    return "\n".join(lines) + "\n"


def scale_plan(base_name: str, coefficients: Optional[ScalingCoefficients] = None,
               phis: Sequence[int] = range(8)) -> List[LadderRow]:
    """
    基本モデル名からスケールラダーを作成

    Args:
        base_name: φ=0のモデル名（例: WRNB0-ECA）
        coefficients: 係数（省略時はファミリーの既定値）
        phis: φの範囲
    """
    base = resolve_model(base_name)
    if base.depth_multiplier != 1.0 or base.width_multiplier != 1.0:
        raise ConfigurationError(f"スケールラダーの基本にはφ=0のモデルを指定してください: {base_name}")
    return scale_ladder(base, coefficients, phis)


class BenchmarkRunner:
    """ベンチマークランナー"""

    def __init__(self, config: AppConfig, file_manager: Optional[FileManager] = None,
                 parallel_entries: int = 1, zoo: Optional[ZooRegistry] = None):
        """
        初期化

        Args:
            config: アプリケーション設定
            file_manager: 出力に使うFileManager
            parallel_entries: 同時に実行するエントリ数
            zoo: 指定時は学習済みモデルをエクスポートする
        """
        self.config = config
        self.file_manager = file_manager or FileManager(config.output.directory)
        self.pool = JobPool(max_workers=parallel_entries, name="bench")
        self.zoo = zoo
        self.dtype = np.float64 if config.engine.precision == "f64" else np.float32
        self.logger = logging.getLogger(__name__)
        self._datasets: Dict[Tuple, Tuple[PatchDataset, PatchDataset]] = {}
        self._datasets_lock = threading.Lock()

    def _datasets_for(self, data_cfg: DataConfig) -> Tuple[PatchDataset, PatchDataset]:
        key = tuple(sorted(asdict(data_cfg).items()))
        with self._datasets_lock:
            if key not in self._datasets:
                self._datasets[key] = prepare_datasets(data_cfg, self.file_manager)
            return self._datasets[key]

    def run_entry(self, entry: BenchmarkEntry) -> BenchmarkRow:
        """
        1エントリを学習・評価

        Returns:
            結果表の行
        """
        train_set, test_set = self._datasets_for(entry.data)
        model_config = model_config_for(entry.model, train_set, entry.overrides)
        model, stats = distributed_train(
            model_config, train_set, entry.pool_config(), entry.training, seed=entry.seed, dtype=self.dtype,
        )
        report = evaluate(model, test_set, tau=entry.training.threshold)
        summary = report.summary()
        row = BenchmarkRow(
            model=entry.display_name,
            family=model_config.family,
            accuracy=summary["accuracy"],
            precision=summary["precision"],
            recall=summary["recall"],
            f_score=summary["f_score"],
            training_seconds=stats.train.wall_time,
            inference_rate=report.inference_rate or 0.0,
            model_size=count_params(model),
            metrics=summary,
        )
        if self.zoo is not None:
            self.zoo.export(model, name=entry.display_name, metrics=summary)
        return row

    def run_benchmark(self, entries: Sequence[BenchmarkEntry]) -> BenchmarkResult:
        """
        全エントリを実行

        失敗したエントリはエラーとして記録し、残りのエントリを続行する。

        Args:
            entries: マニフェストのエントリ

        Returns:
            ベンチマーク結果
        """
        result = BenchmarkResult()
        result.total_entries = len(entries)
        self.logger.info(f"ベンチマークを開始します: {len(entries)}エントリ")

        tracker = EpochProgress(total=len(entries), label="ベンチマーク", min_interval=0.0)
        outcomes = self.pool.map(
            self.run_entry,
            list(entries),
            key=lambda entry: entry.display_name,
            on_progress=tracker.advance,
        )
        for entry, outcome in zip(entries, outcomes):
            if outcome.ok:
                result.rows.append(outcome.value)
                if result.rows[-1].metrics.get("f_score", 0.0) == 0.0:
                    result.add_warning(f"{entry.display_name}: Fスコアが0です")
            else:
                result.failed_entries.append(entry.display_name)
                result.add_error(f"{entry.display_name}: {outcome.error}")
        if entries:
            tracker.finish()
        result.complete()
        self.logger.info(
            f"ベンチマーク完了: 成功{len(result.rows)}件, 失敗{len(result.failed_entries)}件, "
            f"{result.duration:.2f}秒"
        )
        return result

    def write_reports(self, result: BenchmarkResult, name: Optional[str] = None,
                      mask_timing: bool = False) -> Tuple[Path, Path]:
        """
        MarkdownとCSVのレポートを書き出し

        Returns:
            (Markdownのパス, CSVのパス)
        """
        name = name or self.config.output.report_name
        markdown_path = self.file_manager.atomic_write(f"{name}.md", create_benchmark_report(result, mask_timing))
        csv_path = self.file_manager.write_csv(
            f"{name}.csv", results_csv_rows(result.rows, mask_timing), fieldnames=REPORT_COLUMNS + ("Family",),
        )
        self.logger.info(f"レポートを書き出しました: {markdown_path}, {csv_path}")
        return markdown_path, csv_path


def create_benchmark_report(result: BenchmarkResult, mask_timing: bool = False) -> str:
    """
    ベンチマークレポートを作成

    mask_timingを指定した場合は時刻・時間に依存する項目を出力しない。

    Args:
        result: ベンチマーク結果
        mask_timing: 時間に依存する列を伏せるかどうか

    Returns:
        レポート文字列
    """
    report_lines = ["# ベンチマークレポート\n"]

    summary = result.get_summary()
    report_lines.append("## サマリー")
    if not mask_timing:
        report_lines.append(f"- 開始時刻: {summary['start_time']}")
        report_lines.append(f"- 終了時刻: {summary['end_time']}")
        report_lines.append(f"- 処理時間: {summary['duration_seconds']:.2f}秒")
    report_lines.append(f"- 対象エントリ数: {summary['total_entries']}")
    report_lines.append(f"- 成功: {summary['successful_entries']}")
    report_lines.append(f"- 失敗: {summary['failed_entries']}")
    report_lines.append(f"- 成功率: {summary['success_rate']:.1f}%")
    report_lines.append("")

    report_lines.append("## 結果")
    report_lines.append(results_table_markdown(result.rows, mask_timing))
    report_lines.append(f"時間に依存する列: {', '.join(TIMING_COLUMNS)}")
    report_lines.append("")

    if result.errors:
        report_lines.append("## エラー")
        for i, error in enumerate(result.errors, 1):
            report_lines.append(f"{i}. {error}")
        report_lines.append("")

    if result.warnings:
        report_lines.append("## 警告")
        for i, warning in enumerate(result.warnings, 1):
            report_lines.append(f"{i}. {warning}")
        report_lines.append("")

    report_lines.append("## 推奨アクション")
    if summary["failed_entries"] > 0:
        report_lines.append("- 失敗したエントリのモデル名・データ設定を確認してください")
    if summary["warning_count"] > 0:
        report_lines.append("- Fスコアが0のエントリはエポック数や学習率を見直してください")
    if summary["failed_entries"] == 0 and summary["warning_count"] == 0:
        report_lines.append("- 問題は見つかりませんでした")

    return "\n".join(report_lines) + "\n"
