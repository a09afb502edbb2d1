"""
アーキテクチャ設定データモデル
注意機構・ブロック・モデル全体の宣言的な設定を管理するためのデータクラス
"""

import math
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, Optional, Tuple


ATTENTION_KINDS = ("none", "se", "eca", "cbam", "coord")
BLOCK_KINDS = ("wrn", "mbconv1", "mbconv6")
FAMILIES = ("wrn", "efficientnet", "mlpmixer", "vit")

ATTENTION_SUFFIXES = {
    "none": "",
    "se": "-SE",
    "eca": "-ECA",
    "cbam": "-CBAM",
    "coord": "-COORD",
}

WRN_BASE_WIDTHS = (16, 32, 64)
WRN_GROUP_STRIDES = (1, 2, 2)
WRN_STEM_WIDTH = 16

EFFICIENTNET_STEM_WIDTH = 32
EFFICIENTNET_HEAD_WIDTH = 1280
FILTER_DIVISOR = 8

# 浮動小数の丸め誤差を吸収する許容量
_ROUNDING_SLACK = 1e-9


class ConfigurationError(ValueError):
    """アーキテクチャ設定の不整合エラー"""
    pass


def round_half_up(value: float) -> int:
    """0.5を切り上げる四捨五入"""
    return int(math.floor(value + 0.5 + _ROUNDING_SLACK))


def round_filters(filters: int, width_multiplier: float, divisor: int = FILTER_DIVISOR) -> int:
    """フィルタ数を8の倍数に丸める（丸め前の90%を下回らない）"""
    scaled = filters * width_multiplier
    rounded = max(divisor, int(scaled + divisor / 2 + _ROUNDING_SLACK) // divisor * divisor)
    if rounded < 0.9 * scaled:
        rounded += divisor
    return int(rounded)


def round_repeats(repeats: int, depth_multiplier: float) -> int:
    """繰り返し回数を切り上げる"""
    return int(math.ceil(repeats * depth_multiplier - _ROUNDING_SLACK))


@dataclass(frozen=True)
class AttentionSpec:
    """注意機構の設定"""
    kind: str = "none"
    se_reduction: int = 16
    cbam_spatial_kernel: int = 7
    coord_reduction: int = 32
    eca_gamma: int = 2
    eca_b: int = 1

    def __post_init__(self):
        """設定値の検証"""
        if self.kind not in ATTENTION_KINDS:
            raise ConfigurationError(f"無効な注意機構: {self.kind}. 有効な値: {list(ATTENTION_KINDS)}")
        if self.se_reduction < 1:
            raise ConfigurationError("se_reductionは1以上である必要があります")
        if self.cbam_spatial_kernel < 1 or self.cbam_spatial_kernel % 2 == 0:
            raise ConfigurationError(f"cbam_spatial_kernelは正の奇数である必要があります: {self.cbam_spatial_kernel}")
        if self.coord_reduction < 1:
            raise ConfigurationError("coord_reductionは1以上である必要があります")
        if self.eca_gamma < 1:
            raise ConfigurationError("eca_gammaは1以上である必要があります")

    @property
    def suffix(self) -> str:
        """モデル名の接尾辞（例: -ECA）"""
        return ATTENTION_SUFFIXES[self.kind]

    def validate_site(self, channels: int) -> None:
        """取り付け位置のチャネル数に対する検証"""
        if self.kind in ("se", "cbam") and self.se_reduction > channels:
            raise ConfigurationError(
                f"縮小率r={self.se_reduction}がチャネル数{channels}を超えています"
            )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "AttentionSpec":
        return cls(**(data or {}))


@dataclass(frozen=True)
class BlockSpec:
    """構成ブロックの設定"""
    kind: str
    in_channels: int
    out_channels: int
    stride: int = 1
    attention: AttentionSpec = field(default_factory=AttentionSpec)
    ghost: bool = False
    ghost_ratio: int = 2
    ghost_dw_kernel: int = 3
    kernel_size: int = 3
    squeeze_channels: Optional[int] = None

    def __post_init__(self):
        """設定値の検証"""
        if self.kind not in BLOCK_KINDS:
            raise ConfigurationError(f"無効なブロック種別: {self.kind}. 有効な値: {list(BLOCK_KINDS)}")
        if self.stride not in (1, 2):
            raise ConfigurationError(f"strideは1または2である必要があります: {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("チャネル数は1以上である必要があります")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_sizeは正の奇数である必要があります: {self.kernel_size}")
        if self.ghost:
            if self.ghost_ratio < 1:
                raise ConfigurationError("ghost_ratioは1以上である必要があります")
            for channels in self.substituted_out_channels:
                if channels % self.ghost_ratio != 0:
                    raise ConfigurationError(
                        f"ghost_ratio={self.ghost_ratio}が出力チャネル数{channels}を割り切れません"
                    )

    @property
    def expand_ratio(self) -> int:
        return 6 if self.kind == "mbconv6" else 1

    @property
    def mid_channels(self) -> int:
        if self.kind == "wrn":
            return self.out_channels
        return self.in_channels * self.expand_ratio

    @property
    def substituted_out_channels(self) -> Tuple[int, ...]:
        """ゴースト置換される畳み込みの出力チャネル数"""
        if self.kind == "wrn":
            return (self.out_channels, self.out_channels)
        if self.expand_ratio != 1:
            return (self.mid_channels, self.out_channels)
        return (self.out_channels,)


@dataclass(frozen=True)
class StageSpec:
    """EfficientNetのステージ設定"""
    expand_ratio: int
    kernel_size: int
    stride: int
    in_channels: int
    out_channels: int
    repeats: int


# 参照実装のB0ステージ表 (expand, kernel, stride, in, out, repeats)
EFFICIENTNET_B0_STAGES: Tuple[StageSpec, ...] = tuple(
    StageSpec(*row) for row in (
        (1, 3, 1, 32, 16, 1),
        (6, 3, 2, 16, 24, 2),
        (6, 5, 2, 24, 40, 2),
        (6, 3, 2, 40, 80, 3),
        (6, 5, 1, 80, 112, 3),
        (6, 5, 2, 112, 192, 4),
        (6, 3, 1, 192, 320, 1),
    )
)


@dataclass(frozen=True)
class WRNLayout:
    """WRNの具体的な構成（丸め後）"""
    stem_width: int
    blocks_per_group: int
    group_widths: Tuple[int, int, int]
    group_strides: Tuple[int, int, int] = WRN_GROUP_STRIDES


@dataclass(frozen=True)
class EfficientNetLayout:
    """EfficientNetの具体的な構成（丸め後）"""
    stem_width: int
    head_width: int
    stages: Tuple[StageSpec, ...]


FAMILY_FIELDS = {
    "wrn": ("base_depth", "widen_factor"),
    "efficientnet": ("se_squeeze_ratio",),
    "mlpmixer": ("patch", "hidden", "layers", "token_dim", "channel_dim"),
    "vit": ("patch", "hidden", "layers", "heads", "mlp_ratio", "use_class_token"),
}

COMMON_FIELDS = ("family", "attention", "ghost", "depth_multiplier", "width_multiplier",
                 "resolution", "in_channels", "num_classes", "ghost_ratio", "ghost_dw_kernel")


@dataclass(frozen=True)
class ModelConfig:
    """
    モデル全体の宣言的な設定

    等価比較は丸め後の具体的な構成（layout）で行う。
    深さ・幅の乗数そのものは比較に含めないため、丸めの結果が同一になる設定同士は等しい。
    """
    family: str
    attention: AttentionSpec = field(default_factory=AttentionSpec)
    ghost: bool = False
    depth_multiplier: float = field(default=1.0, compare=False)
    width_multiplier: float = field(default=1.0, compare=False)
    resolution: int = 60
    in_channels: int = 10
    num_classes: int = 19
    ghost_ratio: int = 2
    ghost_dw_kernel: int = 3
    # wrn
    base_depth: int = 10
    widen_factor: int = 2
    # efficientnet（Noneの場合はSEのボトルネックをr基準で決める）
    se_squeeze_ratio: Optional[float] = None
    # mlpmixer / vit
    patch: int = 12
    hidden: int = 128
    layers: int = 4
    token_dim: int = 64
    channel_dim: int = 200
    heads: int = 4
    mlp_ratio: int = 4
    use_class_token: bool = True
    name: str = field(default="", compare=False)
    layout: Any = field(init=False, compare=True, repr=False, default=None)

    def __post_init__(self):
        """設定値の検証と構成の確定"""
        if self.family not in FAMILIES:
            raise ConfigurationError(f"無効なモデルファミリー: {self.family}. 有効な値: {list(FAMILIES)}")
        if self.depth_multiplier < 1 or self.width_multiplier < 1:
            raise ConfigurationError("深さ・幅の乗数は1以上である必要があります")
        if self.resolution < 1:
            raise ConfigurationError("resolutionは1以上である必要があります")
        if self.in_channels < 1 or self.num_classes < 1:
            raise ConfigurationError("in_channelsとnum_classesは1以上である必要があります")

        if self.family in ("mlpmixer", "vit"):
            if self.patch < 1 or self.resolution % self.patch != 0:
                label = "MLPMixer" if self.family == "mlpmixer" else "ViT"
                raise ConfigurationError(
                    f"{label}/{self.patch}: 解像度{self.resolution}がパッチサイズ{self.patch}で割り切れません"
                )
            if self.family == "vit" and self.hidden % self.heads != 0:
                raise ConfigurationError(f"hidden={self.hidden}がheads={self.heads}で割り切れません")

        object.__setattr__(self, "layout", self._resolve_layout())

    def _resolve_layout(self):
        if self.family == "wrn":
            if self.base_depth < 10 or (self.base_depth - 4) % 6 != 0:
                raise ConfigurationError(f"WRNの深さは6n+4 (n≥1) である必要があります: {self.base_depth}")
            base_blocks = (self.base_depth - 4) // 6
            blocks = max(1, round_half_up(base_blocks * self.depth_multiplier))
            widths = tuple(
                round_half_up(base * self.widen_factor * self.width_multiplier) for base in WRN_BASE_WIDTHS
            )
            return WRNLayout(WRN_STEM_WIDTH, blocks, widths)
        if self.family == "efficientnet":
            stages = tuple(
                StageSpec(
                    stage.expand_ratio,
                    stage.kernel_size,
                    stage.stride,
                    round_filters(stage.in_channels, self.width_multiplier),
                    round_filters(stage.out_channels, self.width_multiplier),
                    round_repeats(stage.repeats, self.depth_multiplier),
                )
                for stage in EFFICIENTNET_B0_STAGES
            )
            return EfficientNetLayout(
                round_filters(EFFICIENTNET_STEM_WIDTH, self.width_multiplier),
                round_filters(EFFICIENTNET_HEAD_WIDTH, self.width_multiplier),
                stages,
            )
        return None

    @property
    def is_convolutional(self) -> bool:
        return self.family in ("wrn", "efficientnet")

    @property
    def token_count(self) -> int:
        """パッチトークン数（mixer/vit）"""
        return (self.resolution // self.patch) ** 2

    def to_dict(self) -> Dict[str, Any]:
        """ファミリーに関係するフィールドのみを辞書化"""
        data: Dict[str, Any] = {"name": self.name} if self.name else {}
        for key in COMMON_FIELDS + FAMILY_FIELDS[self.family]:
            value = getattr(self, key)
            data[key] = value.to_dict() if isinstance(value, AttentionSpec) else value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        """辞書から設定オブジェクトを作成"""
        values = dict(data)
        values.pop("layout", None)
        values["attention"] = AttentionSpec.from_dict(values.get("attention"))
        return cls(**values)
