"""
注意機構サービス
SE・ECA・CBAM・座標注意（Coordinate Attention）のゲートとパラメータ数の計算を提供
"""

import logging
import math
from typing import Optional

from models.architecture import AttentionSpec, ConfigurationError
from nn import functional as F
from nn.layers import (
    Module, ParameterInitializer, Dense, Conv2d, ChannelConv1d, BatchNorm2d,
)
from nn.tensor import Tensor


logger = logging.getLogger(__name__)

COORD_MIN_MID = 8


def se_bottleneck(channels: int, reduction: int) -> int:
    """SEボトルネック幅 max(1, ⌈C/r⌉)"""
    return max(1, math.ceil(channels / reduction))


def eca_kernel_size(channels: int, gamma: int = 2, b: int = 1) -> int:
    """
    ECAの1次元カーネルサイズ

    k = floor(log2(C)/γ + b/γ)、偶数なら+1、最小3
    """
    if channels < 1:
        raise ConfigurationError(f"チャネル数は1以上である必要があります: {channels}")
    k = int(math.floor(math.log2(channels) / gamma + b / gamma))
    if k % 2 == 0:
        k += 1
    return max(3, k)


def coord_mid_channels(channels: int, reduction: int = 32) -> int:
    """座標注意の共有畳み込み幅 max(8, C // reduction)"""
    return max(COORD_MIN_MID, channels // reduction)


class SqueezeExcitation(Module):
    """Squeeze-and-Excitationゲート"""

    def __init__(self, channels: int, init: ParameterInitializer, reduction: int = 16,
                 squeeze_channels: Optional[int] = None, activation: str = "relu"):
        super().__init__()
        squeeze = squeeze_channels if squeeze_channels is not None else se_bottleneck(channels, reduction)
        self.activation = activation
        self.reduce = Dense(channels, squeeze, init)
        self.expand = Dense(squeeze, channels, init)

    def gate(self, x: Tensor) -> Tensor:
        """チャネル毎のゲート N×C"""
        s = F.global_avg_pool(x)
        s = F.activation(self.reduce(s), self.activation)
        return F.sigmoid(self.expand(s))

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        return x * self.gate(x).reshape(n, c, 1, 1)


class EfficientChannelAttention(Module):
    """ECAゲート（チャネル系列に沿った1次元畳み込み）"""

    def __init__(self, channels: int, init: ParameterInitializer, gamma: int = 2, b: int = 1):
        super().__init__()
        self.kernel_size = eca_kernel_size(channels, gamma, b)
        self.conv = ChannelConv1d(self.kernel_size, init, bias=True)

    def gate(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        s = F.global_avg_pool(x).reshape(n, 1, c)
        return F.sigmoid(self.conv(s)).reshape(n, c)

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        return x * self.gate(x).reshape(n, c, 1, 1)


class ChannelAttentionModule(Module):
    """CBAMのチャネル注意（GAP/GMPに共有MLPを適用）"""

    def __init__(self, channels: int, init: ParameterInitializer, reduction: int = 16):
        super().__init__()
        squeeze = se_bottleneck(channels, reduction)
        self.reduce = Dense(channels, squeeze, init)
        self.expand = Dense(squeeze, channels, init)

    def _mlp(self, s: Tensor) -> Tensor:
        return self.expand(F.relu(self.reduce(s)))

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        logits = self._mlp(F.global_avg_pool(x)) + self._mlp(F.global_max_pool(x))
        return x * F.sigmoid(logits).reshape(n, c, 1, 1)


class SpatialAttentionModule(Module):
    """CBAMの空間注意（チャネル方向のmax/meanを畳み込み）"""

    def __init__(self, init: ParameterInitializer, kernel_size: int = 7):
        super().__init__()
        self.conv = Conv2d(2, 1, kernel_size, init, bias=False)
        self.bn = BatchNorm2d(1, init)

    def gate(self, x: Tensor) -> Tensor:
        """空間ゲート N×1×H×W"""
        pooled = F.concat([F.reduce_max(x, axis=1, keepdims=True), x.mean(axis=1, keepdims=True)], axis=1)
        return F.sigmoid(self.bn(self.conv(pooled)))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class ConvolutionalBlockAttention(Module):
    """CBAM（チャネル注意→空間注意の逐次適用）"""

    def __init__(self, channels: int, init: ParameterInitializer, reduction: int = 16, spatial_kernel: int = 7):
        super().__init__()
        self.channel = ChannelAttentionModule(channels, init, reduction)
        self.spatial = SpatialAttentionModule(init, spatial_kernel)

    def forward(self, x: Tensor) -> Tensor:
        return self.spatial(self.channel(x))


class CoordinateAttention(Module):
    """座標注意（縦横方向の集約による位置情報付きゲート）"""

    def __init__(self, channels: int, init: ParameterInitializer, reduction: int = 32):
        super().__init__()
        mid = coord_mid_channels(channels, reduction)
        self.shared = Conv2d(channels, mid, 1, init, bias=True)
        self.bn = BatchNorm2d(mid, init)
        self.conv_h = Conv2d(mid, channels, 1, init, bias=True)
        self.conv_w = Conv2d(mid, channels, 1, init, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2], x.shape[3]
        pooled_h = x.mean(axis=3, keepdims=True)                        # N×C×H×1
        pooled_w = x.mean(axis=2, keepdims=True).transpose(0, 1, 3, 2)  # N×C×W×1
        y = F.swish(self.bn(self.shared(F.concat([pooled_h, pooled_w], axis=2))))
        y_h = y[:, :, :h, :]
        y_w = y[:, :, h:h + w, :].transpose(0, 1, 3, 2)
        g_h = F.sigmoid(self.conv_h(y_h))
        g_w = F.sigmoid(self.conv_w(y_w))
        return x * g_h * g_w


def build_attention(spec: AttentionSpec, channels: int, init: ParameterInitializer,
                    squeeze_channels: Optional[int] = None, activation: str = "relu") -> Optional[Module]:
    """
    注意機構モジュールを作成

    Args:
        spec: 注意機構の設定
        channels: 取り付け位置のチャネル数
        init: パラメータ初期化器
        squeeze_channels: SEボトルネック幅の明示指定（Keras版EfficientNet用）
        activation: SEの中間活性化

    Returns:
        モジュール（kind="none"の場合はNone）
    """
    if spec.kind == "none":
        return None
    if squeeze_channels is None:
        spec.validate_site(channels)
    if spec.kind == "se":
        return SqueezeExcitation(channels, init, spec.se_reduction, squeeze_channels, activation)
    if spec.kind == "eca":
        return EfficientChannelAttention(channels, init, spec.eca_gamma, spec.eca_b)
    if spec.kind == "cbam":
        return ConvolutionalBlockAttention(channels, init, spec.se_reduction, spec.cbam_spatial_kernel)
    if spec.kind == "coord":
        return CoordinateAttention(channels, init, spec.coord_reduction)
    raise ConfigurationError(f"無効な注意機構: {spec.kind}")


def attention_site_params(spec: AttentionSpec, channels: int, squeeze_channels: Optional[int] = None) -> int:
    """
    1取り付け位置あたりのパラメータ数（BNの移動統計を含む）

    SE: 2·C·m + m + C（m = ⌈C/r⌉）、ECA: k + 1
    """
    c = channels
    if spec.kind == "none":
        return 0
    if spec.kind == "se":
        m = squeeze_channels if squeeze_channels is not None else se_bottleneck(c, spec.se_reduction)
        return 2 * c * m + m + c
    if spec.kind == "eca":
        return eca_kernel_size(c, spec.eca_gamma, spec.eca_b) + 1
    if spec.kind == "cbam":
        m = se_bottleneck(c, spec.se_reduction)
        k = spec.cbam_spatial_kernel
        return 2 * c * m + m + c + 2 * k * k + 4
    if spec.kind == "coord":
        m = coord_mid_channels(c, spec.coord_reduction)
        return c * m + m + 4 * m + 2 * (m * c + c)
    raise ConfigurationError(f"無効な注意機構: {spec.kind}")
