"""
モデルズー管理
名前規約によるモデル設定の解決と、学習済みチェックポイントのエクスポート・インポートを提供
"""

import difflib
import hashlib
import logging
import re
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from models.architecture import ATTENTION_SUFFIXES, AttentionSpec, ConfigurationError, ModelConfig
from models.scaling import FAMILY_COEFFICIENTS
from services.architectures import ClassifierModel, count_config_params, count_params
from services.scaling import BASE_RESOLUTION, apply_scaling
from utils.checkpoint_io import CheckpointError, load_checkpoint, save_checkpoint
from utils.file_manager import FileManager


TOKEN_RESOLUTION = 120
KERAS_SE_RATIO = 0.25
INDEX_NAME = "zoo.json"

MIXER_DEFAULTS = {"hidden": 128, "layers": 4, "token_dim": 64, "channel_dim": 200}
MIXER_TINY = {"patch": 6, "hidden": 30, "layers": 2, "token_dim": 12, "channel_dim": 50}
VIT_DEFAULTS = {"hidden": 192, "layers": 8, "heads": 4, "mlp_ratio": 4}
VITM = {"hidden": 240, "layers": 12, "heads": 10, "mlp_ratio": 4}

_SUFFIX_TO_KIND = {suffix: kind for kind, suffix in ATTENTION_SUFFIXES.items() if suffix}
_CONV_PATTERN = re.compile(r"^(WRNB|EfficientNetB)(\d+)(-SE|-ECA|-CBAM|-COORD)?(-GHOST)?$")
_MIXER_PATTERN = re.compile(r"^MLPMixer(?:/(\d+))?$")
_VIT_PATTERN = re.compile(r"^(ViT|ViTM)/(\d+)$")


def _zoo_names() -> List[str]:
    names = []
    for suffix in ("",) + tuple(_SUFFIX_TO_KIND):
        names.append(f"WRNB0{suffix}")
        names.append(f"WRNB0{suffix}-GHOST")
    for suffix in _SUFFIX_TO_KIND:
        names.append(f"EfficientNetB0{suffix}")
        names.append(f"EfficientNetB0{suffix}-GHOST")
    names.append("EfficientNetB0-Keras")
    names += ["MLPMixer", "MLPMixerTiny"] + [f"MLPMixer/{p}" for p in (6, 20, 30, 40)]
    names += [f"ViT/{p}" for p in (6, 12, 20, 30, 40)] + ["ViTM/20"]
    return names


MODEL_ZOO = tuple(_zoo_names())


class UnknownModelError(ConfigurationError):
    """名前からモデル設定を解決できないエラー"""

    def __init__(self, name: str, suggestion: Optional[str] = None):
        self.name = name
        self.suggestion = suggestion
        message = f"未知のモデル名: {name}"
        if suggestion:
            message += f" (もしかして: {suggestion})"
        super().__init__(message)


def suggest_name(name: str) -> Optional[str]:
    """最も近いズーのモデル名"""
    matches = difflib.get_close_matches(name, MODEL_ZOO, n=1, cutoff=0.5)
    if not matches:
        matches = difflib.get_close_matches(name.lower(), [n.lower() for n in MODEL_ZOO], n=1, cutoff=0.5)
        if matches:
            return next(n for n in MODEL_ZOO if n.lower() == matches[0])
        return None
    return matches[0]


def resolve_model(name: str, **overrides: Any) -> ModelConfig:
    """
    モデル名を設定に変換

    名前規約:
        WRNB<φ>[-SE|-ECA|-CBAM|-COORD][-GHOST], EfficientNetB<φ>[...][-GHOST], EfficientNetB0-Keras,
        MLPMixer, MLPMixer/<p>, MLPMixerTiny, ViT/<p>, ViTM/<p>

    Args:
        name: モデル名
        overrides: 設定の上書き（in_channels, num_classes, resolution など）

    Returns:
        モデル設定
    """
    config = _parse(name)
    if overrides:
        config = replace(config, **overrides)
    return config


def _parse(name: str) -> ModelConfig:
    if name == "EfficientNetB0-Keras":
        return ModelConfig(
            family="efficientnet", attention=AttentionSpec(kind="se"), se_squeeze_ratio=KERAS_SE_RATIO,
            resolution=BASE_RESOLUTION, name=name,
        )

    match = _CONV_PATTERN.match(name)
    if match:
        prefix, phi, suffix, ghost = match.groups()
        family = "wrn" if prefix == "WRNB" else "efficientnet"
        kind = _SUFFIX_TO_KIND[suffix] if suffix else "none"
        base = ModelConfig(
            family=family, attention=AttentionSpec(kind=kind), ghost=bool(ghost),
            resolution=BASE_RESOLUTION, name=name,
        )
        scaled = apply_scaling(base, FAMILY_COEFFICIENTS[family].with_phi(int(phi)))
        return replace(scaled, name=name)

    if name == "MLPMixerTiny":
        return ModelConfig(family="mlpmixer", resolution=TOKEN_RESOLUTION, name=name, **MIXER_TINY)

    match = _MIXER_PATTERN.match(name)
    if match:
        patch = int(match.group(1) or 12)
        return ModelConfig(family="mlpmixer", patch=patch, resolution=TOKEN_RESOLUTION, name=name, **MIXER_DEFAULTS)

    match = _VIT_PATTERN.match(name)
    if match:
        variant, patch = match.group(1), int(match.group(2))
        fields = VIT_DEFAULTS if variant == "ViT" else VITM
        return ModelConfig(family="vit", patch=patch, resolution=TOKEN_RESOLUTION, name=name, **fields)

    raise UnknownModelError(name, suggest_name(name))


@dataclass
class ZooEntry:
    """エクスポート済みモデルの索引エントリ"""
    name: str
    family: str
    checkpoint: str
    content_hash: str
    param_count: int
    exported_at: str
    metrics: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        """辞書形式に変換"""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ZooEntry":
        """辞書から作成"""
        return cls(**data)


class ZooRegistry:
    """モデルズーの索引とチェックポイントの管理"""

    def __init__(self, root: Union[str, Path], file_manager: Optional[FileManager] = None):
        """
        初期化

        Args:
            root: ズーのディレクトリ
            file_manager: ファイル入出力
        """
        self.root = Path(root).resolve()
        self.file_manager = file_manager or FileManager(self.root)
        self.index_file = self.root / INDEX_NAME
        self.logger = logging.getLogger(__name__)
        self.entries: Dict[str, ZooEntry] = {}
        self.load_index()

    def load_index(self) -> None:
        """索引ファイルを読み込み"""
        if not self.index_file.exists():
            self.logger.debug(f"ズーの索引がありません。新規作成します: {self.index_file}")
            return
        data = self.file_manager.read_json(self.index_file)
        self.entries = {name: ZooEntry.from_dict(entry) for name, entry in data.get("models", {}).items()}
        self.logger.info(f"ズーの索引を読み込みました: {len(self.entries)}モデル")

    def save_index(self) -> None:
        """索引ファイルに保存"""
        data = {"models": {name: entry.to_dict() for name, entry in sorted(self.entries.items())}}
        self.file_manager.write_json(self.index_file, data)

    @staticmethod
    def checkpoint_filename(name: str) -> str:
        return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".szoo"

    @staticmethod
    def _content_hash(data: bytes) -> str:
        return hashlib.sha256(data).hexdigest()

    def list_models(self) -> List[Dict[str, Any]]:
        """
        ズーの全モデル名と設定の要約

        Returns:
            名前・ファミリー・解像度・パラメータ数・エクスポート有無の辞書のリスト
        """
        rows = []
        for name in MODEL_ZOO:
            config = resolve_model(name)
            rows.append({
                "name": name,
                "family": config.family,
                "resolution": config.resolution,
                "param_count": count_config_params(config),
                "exported": name in self.entries,
            })
        return rows

    def manifest(self) -> Dict[str, Any]:
        """ズーの設定一覧（名前→ModelConfigのフィールド）"""
        return {name: resolve_model(name).to_dict() for name in MODEL_ZOO}

    def export(self, model: ClassifierModel, name: Optional[str] = None,
               metrics: Optional[Dict[str, Any]] = None) -> ZooEntry:
        """
        学習済みモデルをズーにエクスポート

        Args:
            model: モデル
            name: 登録名（省略時は設定の名前）
            metrics: 評価指標の要約

        Returns:
            索引エントリ
        """
        name = name or model.config.name
        if not name:
            raise ValueError("登録名が必要です")
        relative = f"checkpoints/{self.checkpoint_filename(name)}"
        path = save_checkpoint(model, self.root / relative, metadata={"zoo_name": name, "metrics": metrics or {}},
                               file_manager=self.file_manager)
        entry = ZooEntry(
            name=name,
            family=model.config.family,
            checkpoint=relative,
            content_hash=self._content_hash(self.file_manager.read_bytes(path)),
            param_count=count_params(model),
            exported_at=datetime.now().isoformat(),
            metrics=metrics or {},
        )
        self.entries[name] = entry
        self.save_index()
        self.logger.info(f"モデルをエクスポートしました: {name} → {path}")
        return entry

    def import_model(self, name: str, dtype: type = np.float32) -> ClassifierModel:
        """
        エクスポート済みモデルを読み込み

        Args:
            name: 登録名
            dtype: モデルの精度
        """
        entry = self.entries.get(name)
        if entry is None:
            matches = difflib.get_close_matches(name, list(self.entries), n=1, cutoff=0.5)
            raise UnknownModelError(name, matches[0] if matches else None)
        path = self.root / entry.checkpoint
        actual = self._content_hash(self.file_manager.read_bytes(path))
        if actual != entry.content_hash:
            raise CheckpointError(f"チェックポイントの内容が索引と一致しません: {name}")
        return load_checkpoint(path, dtype=dtype, file_manager=self.file_manager)

    def write_manifest(self, filename: str = "manifest.json") -> Path:
        """ズーの設定一覧をJSONで書き出し"""
        path = self.file_manager.write_json(self.root / filename, self.manifest())
        self.logger.info(f"ズーのマニフェストを書き出しました: {path} ({len(MODEL_ZOO)}モデル)")
        return path
