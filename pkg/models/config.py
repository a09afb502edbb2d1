"""
設定データモデル
モデルスケーリング・学習・分散学習システムの設定を管理するためのデータクラス
"""

from dataclasses import dataclass, field, asdict
from typing import Dict, Any, Optional
import os
from pathlib import Path

from models.dataset import CHANNEL_MODES


PRECISIONS = ("f32", "f64")
TOPOLOGIES = ("ring", "tree")

# 実験で使われた値の範囲（範囲外は警告）
TUNED_LR_RANGE = (1e-5, 1e-3)
TUNED_BATCH_RANGE = (32, 256)
TUNED_DECAY_EPOCHS = (24, 27)


@dataclass
class EngineConfig:
    """テンソルエンジン設定"""
    precision: str = "f32"
    batchnorm_eps: float = 1e-3
    batchnorm_momentum: float = 0.99

    def __post_init__(self):
        """設定値の検証"""
        if self.precision not in PRECISIONS:
            raise ValueError(f"無効な精度: {self.precision}. 有効な値: {list(PRECISIONS)}")
        if self.batchnorm_eps <= 0:
            raise ValueError("batchnorm_epsは正の値である必要があります")
        if not 0 <= self.batchnorm_momentum < 1:
            raise ValueError("batchnorm_momentumは0以上1未満である必要があります")


@dataclass
class TrainConfig:
    """学習設定"""
    epochs: int = 30
    base_lr: float = 1e-3
    decay_epoch: Optional[int] = 24
    decay_factor: float = 0.1
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-7
    seed: int = 0
    threshold: float = 0.5
    prefetch: int = 2

    def __post_init__(self):
        """設定値の検証"""
        if self.epochs < 0:
            raise ValueError("epochsは0以上である必要があります")
        if self.base_lr <= 0:
            raise ValueError("base_lrは正の値である必要があります")
        if self.decay_epoch is not None:
            if self.decay_epoch < 0:
                raise ValueError("decay_epochは0以上である必要があります")
            if self.epochs > 0 and self.decay_epoch >= self.epochs:
                raise ValueError(f"decay_epoch({self.decay_epoch})はepochs({self.epochs})より小さい必要があります")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factorは0より大きく1以下である必要があります")
        if self.batch_size < 1:
            raise ValueError("batch_sizeは1以上である必要があります")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adamのβは0以上1未満である必要があります")
        if self.adam_eps <= 0:
            raise ValueError("adam_epsは正の値である必要があります")
        if not 0 < self.threshold < 1:
            raise ValueError("thresholdは0より大きく1未満である必要があります")
        if self.prefetch < 0:
            raise ValueError("prefetchは0以上である必要があります")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class WorkerPoolConfig:
    """分散学習（ワーカープール）設定"""
    workers: int = 1
    per_worker_batch: int = 32
    reduction_topology: str = "ring"
    base_lr: Optional[float] = None
    check_linearity: bool = False
    linearity_tolerance: float = 1e-6

    def __post_init__(self):
        """設定値の検証"""
        if self.workers < 1:
            raise ValueError("workersは1以上である必要があります")
        if self.per_worker_batch < 1:
            raise ValueError("per_worker_batchは1以上である必要があります")
        if self.reduction_topology not in TOPOLOGIES:
            raise ValueError(f"無効なreduction_topology: {self.reduction_topology}. 有効な値: {list(TOPOLOGIES)}")
        if self.base_lr is not None and self.base_lr <= 0:
            raise ValueError("base_lrは正の値である必要があります")
        if self.linearity_tolerance <= 0:
            raise ValueError("linearity_toleranceは正の値である必要があります")

    @property
    def global_batch(self) -> int:
        return self.workers * self.per_worker_batch

    def effective_lr(self, fallback_lr: float) -> float:
        """ワーカー数でスケーリングした学習率 base_lr·W"""
        base = self.base_lr if self.base_lr is not None else fallback_lr
        return base * self.workers


@dataclass
class DataConfig:
    """データ設定"""
    root: Optional[str] = None
    n_train: int = 2000
    n_test: int = 500
    resolution: int = 32
    channel_mode: str = "all"
    num_classes: int = 19
    noise: float = 0.05
    seed: int = 7

    def __post_init__(self):
        """設定値の検証"""
        if self.n_train < 1 or self.n_test < 0:
            raise ValueError("n_trainは1以上、n_testは0以上である必要があります")
        if self.resolution < 1:
            raise ValueError("resolutionは1以上である必要があります")
        if self.channel_mode not in CHANNEL_MODES:
            raise ValueError(f"無効なchannel_mode: {self.channel_mode}. 有効な値: {list(CHANNEL_MODES)}")
        if self.num_classes < 1:
            raise ValueError("num_classesは1以上である必要があります")
        if self.noise < 0:
            raise ValueError("noiseは0以上である必要があります")


@dataclass
class OutputConfig:
    """出力設定"""
    directory: str = "out"
    report_name: str = "benchmark"

    def __post_init__(self):
        """設定値の検証"""
        if not self.directory:
            raise ValueError("出力ディレクトリが必要です")
        if not self.report_name:
            raise ValueError("report_nameが必要です")


@dataclass
class LoggingConfig:
    """ログ設定"""
    level: str = "INFO"
    file: Optional[str] = None

    def __post_init__(self):
        """設定値の検証"""
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR"]
        if self.level not in valid_levels:
            raise ValueError(f"無効なログレベル: {self.level}. 有効な値: {valid_levels}")


@dataclass
class AppConfig:
    """アプリケーション全体の設定"""
    engine: EngineConfig = field(default_factory=EngineConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    distributed: WorkerPoolConfig = field(default_factory=WorkerPoolConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    @classmethod
    def from_dict(cls, config_dict: Optional[Dict[str, Any]]) -> 'AppConfig':
        """辞書から設定オブジェクトを作成"""
        config_dict = config_dict or {}
        return cls(
            engine=EngineConfig(**(config_dict.get('engine') or {})),
            training=TrainConfig(**(config_dict.get('training') or {})),
            distributed=WorkerPoolConfig(**(config_dict.get('distributed') or {})),
            data=DataConfig(**(config_dict.get('data') or {})),
            output=OutputConfig(**(config_dict.get('output') or {})),
            logging=LoggingConfig(**(config_dict.get('logging') or {})),
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def validate(self) -> None:
        """セクション間の整合性の検証"""
        if self.logging.file:
            log_path = Path(self.logging.file)
            if log_path.parent.exists() and not os.access(log_path.parent, os.W_OK):
                raise ValueError(f"ログファイルの親ディレクトリに書き込み権限がありません: {log_path.parent}")
        if self.data.root:
            root = Path(self.data.root)
            if root.exists() and not root.is_dir():
                raise ValueError(f"データセットのルートはディレクトリである必要があります: {root}")

    def validate_comprehensive(self) -> Dict[str, Any]:
        """包括的な設定検証"""
        validation_result = {
            "is_valid": True,
            "errors": [],
            "warnings": [],
            "info": [],
            "checks": {
                "engine_config": False,
                "training_config": False,
                "distributed_config": False,
                "data_config": False,
                "output_config": False,
                "logging_config": False,
            }
        }

        try:
            self.validate()

            for name, check in (
                ("engine_config", self._validate_engine_config),
                ("training_config", self._validate_training_config),
                ("distributed_config", self._validate_distributed_config),
                ("data_config", self._validate_data_config),
                ("output_config", self._validate_output_config),
                ("logging_config", self._validate_logging_config),
            ):
                result = check()
                validation_result["checks"][name] = result["is_valid"]
                validation_result["errors"].extend(result["errors"])
                validation_result["warnings"].extend(result["warnings"])
                validation_result["info"].extend(result.get("info", []))

            validation_result["is_valid"] = len(validation_result["errors"]) == 0
            return validation_result

        except Exception as e:
            validation_result["errors"].append(f"検証中にエラーが発生しました: {str(e)}")
            validation_result["is_valid"] = False
            return validation_result

    def _validate_engine_config(self) -> Dict[str, Any]:
        """エンジン設定の詳細検証"""
        result = {"is_valid": True, "errors": [], "warnings": [], "info": []}
        if self.engine.precision == "f64":
            result["info"].append("f64精度で実行します（勾配検証向け、学習は低速になります）")
        return result

    def _validate_training_config(self) -> Dict[str, Any]:
        """学習設定の詳細検証"""
        result = {"is_valid": True, "errors": [], "warnings": [], "info": []}
        training = self.training

        low, high = TUNED_LR_RANGE
        if not low <= training.base_lr <= high:
            result["warnings"].append(f"base_lrが実験で使われた範囲[{low}, {high}]の外です: {training.base_lr}")
        low, high = TUNED_BATCH_RANGE
        if not low <= training.batch_size <= high:
            result["warnings"].append(f"batch_sizeが実験で使われた範囲[{low}, {high}]の外です: {training.batch_size}")
        if training.decay_epoch is not None and training.decay_epoch not in TUNED_DECAY_EPOCHS:
            result["warnings"].append(f"decay_epochが実験で使われた値{list(TUNED_DECAY_EPOCHS)}と異なります")
        if training.epochs == 0:
            result["warnings"].append("epochsが0のため学習は行われません")
        return result

    def _validate_distributed_config(self) -> Dict[str, Any]:
        """分散学習設定の詳細検証"""
        result = {"is_valid": True, "errors": [], "warnings": [], "info": []}
        pool = self.distributed
        cpu_count = os.cpu_count() or 1
        if pool.workers > cpu_count:
            result["warnings"].append(f"ワーカー数({pool.workers})がCPU数({cpu_count})を超えています")
        result["info"].append(
            f"実効学習率: {pool.effective_lr(self.training.base_lr):g} (ワーカー{pool.workers}, "
            f"グローバルバッチ{pool.global_batch})"
        )
        return result

    def _validate_data_config(self) -> Dict[str, Any]:
        """データ設定の詳細検証"""
        result = {"is_valid": True, "errors": [], "warnings": [], "info": []}
        if self.data.root:
            for split in ("train", "test"):
                manifest = Path(self.data.root) / split / "manifest.json"
                if not manifest.exists():
                    result["errors"].append(f"データセットのマニフェストが見つかりません: {manifest}")
                    result["is_valid"] = False
        else:
            result["info"].append(
                f"合成データを使用します: 学習{self.data.n_train}件 / 評価{self.data.n_test}件, "
                f"{self.data.resolution}px, シード{self.data.seed}"
            )
        return result

    def _validate_output_config(self) -> Dict[str, Any]:
        """出力設定の詳細検証"""
        result = {"is_valid": True, "errors": [], "warnings": [], "info": []}
        directory = Path(self.output.directory)
        if directory.exists() and not os.access(directory, os.W_OK):
            result["errors"].append(f"出力ディレクトリに書き込み権限がありません: {directory}")
            result["is_valid"] = False
        elif not directory.exists():
            result["info"].append(f"出力ディレクトリは実行時に作成されます: {directory}")
        return result

    def _validate_logging_config(self) -> Dict[str, Any]:
        """ログ設定の詳細検証"""
        result = {"is_valid": True, "errors": [], "warnings": [], "info": []}

        if self.logging.file:
            log_path = Path(self.logging.file)

            if not log_path.parent.exists():
                try:
                    log_path.parent.mkdir(parents=True, exist_ok=True)
                    result["warnings"].append(f"ログディレクトリを作成しました: {log_path.parent}")
                except Exception as e:
                    result["errors"].append(f"ログディレクトリの作成に失敗しました: {str(e)}")
                    result["is_valid"] = False

            elif not os.access(log_path.parent, os.W_OK):
                result["errors"].append(f"ログディレクトリに書き込み権限がありません: {log_path.parent}")
                result["is_valid"] = False

        return result

    def get_validation_summary(self) -> str:
        """検証結果のサマリーを取得"""
        validation = self.validate_comprehensive()

        lines = ["# 設定検証レポート\n"]

        status = "✅ 正常" if validation["is_valid"] else "❌ エラーあり"
        lines.append(f"## 総合結果: {status}\n")

        lines.append("## チェック項目")
        for check_name, is_passed in validation["checks"].items():
            status_icon = "✅" if is_passed else "❌"
            check_name_jp = {
                "engine_config": "エンジン設定",
                "training_config": "学習設定",
                "distributed_config": "分散学習設定",
                "data_config": "データ設定",
                "output_config": "出力設定",
                "logging_config": "ログ設定",
            }.get(check_name, check_name)
            lines.append(f"- {status_icon} {check_name_jp}")
        lines.append("")

        for title, key in (("## ❌ エラー", "errors"), ("## ⚠️ 警告", "warnings"), ("## ℹ️ 情報", "info")):
            if validation[key]:
                lines.append(title)
                for i, message in enumerate(validation[key], 1):
                    lines.append(f"{i}. {message}")
                lines.append("")

        return "\n".join(lines)
