"""
構成ブロックサービス
WRN残差ブロック・MBConv1/MBConv6・ゴースト畳み込みを提供
"""

import logging
from typing import Union

from models.architecture import BlockSpec, ConfigurationError
from nn import functional as F
from nn.layers import Module, ParameterInitializer, Conv2d, DepthwiseConv2d, BatchNorm2d
from nn.tensor import Tensor
from services.attention import build_attention


logger = logging.getLogger(__name__)


def conv_params(in_channels: int, out_channels: int, kernel_size: int) -> int:
    """バイアスなし標準畳み込みのパラメータ数"""
    return in_channels * out_channels * kernel_size * kernel_size


def ghost_conv_params(in_channels: int, out_channels: int, kernel_size: int,
                      ratio: int = 2, dw_kernel: int = 3) -> int:
    """ゴースト畳み込みのパラメータ数（主畳み込み＋安価な深さ方向畳み込み）"""
    if ratio < 1 or out_channels % ratio != 0:
        raise ConfigurationError(f"ghost_ratio={ratio}が出力チャネル数{out_channels}を割り切れません")
    intrinsic = out_channels // ratio
    return conv_params(in_channels, intrinsic, kernel_size) + intrinsic * (ratio - 1) * dw_kernel * dw_kernel


class GhostConv(Module):
    """
    ゴースト畳み込み

    主畳み込みで out/s 枚の固有特徴マップを作り、
    深さ方向畳み込み（乗数 s-1）で残りのゴーストマップを生成して連結する。
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, init: ParameterInitializer,
                 stride: int = 1, ratio: int = 2, dw_kernel: int = 3):
        super().__init__()
        if ratio < 1 or out_channels % ratio != 0:
            raise ConfigurationError(f"ghost_ratio={ratio}が出力チャネル数{out_channels}を割り切れません")
        intrinsic = out_channels // ratio
        self.out_channels = out_channels
        self.primary = Conv2d(in_channels, intrinsic, kernel_size, init, stride=stride)
        self.cheap = DepthwiseConv2d(intrinsic, dw_kernel, init, multiplier=ratio - 1) if ratio > 1 else None

    def forward(self, x: Tensor) -> Tensor:
        intrinsic = self.primary(x)
        if self.cheap is None:
            return intrinsic
        return F.concat([intrinsic, self.cheap(intrinsic)], axis=1)


def make_conv(in_channels: int, out_channels: int, kernel_size: int, init: ParameterInitializer,
              stride: int = 1, ghost: bool = False, ratio: int = 2, dw_kernel: int = 3) -> Union[Conv2d, GhostConv]:
    """ゴースト置換の有無に応じた畳み込みを作成"""
    if ghost:
        return GhostConv(in_channels, out_channels, kernel_size, init, stride, ratio, dw_kernel)
    return Conv2d(in_channels, out_channels, kernel_size, init, stride=stride)


class WRNBlock(Module):
    """
    WRNの前活性化残差ブロック

    BN → relu → conv3×3(stride) → BN → relu → conv3×3 → 注意 → ショートカット加算
    形状が変わる場合のみ1×1射影（BNなし）をショートカットに使う。
    """

    def __init__(self, spec: BlockSpec, init: ParameterInitializer):
        super().__init__()
        if spec.kind != "wrn":
            raise ConfigurationError(f"WRNBlockにはkind='wrn'が必要です: {spec.kind}")
        self.spec = spec
        cin, cout = spec.in_channels, spec.out_channels
        self.bn1 = BatchNorm2d(cin, init)
        self.conv1 = make_conv(cin, cout, spec.kernel_size, init, spec.stride,
                               spec.ghost, spec.ghost_ratio, spec.ghost_dw_kernel)
        self.bn2 = BatchNorm2d(cout, init)
        self.conv2 = make_conv(cout, cout, spec.kernel_size, init, 1,
                               spec.ghost, spec.ghost_ratio, spec.ghost_dw_kernel)
        self.attention = build_attention(spec.attention, cout, init)
        self.shortcut = None
        if cin != cout or spec.stride != 1:
            self.shortcut = Conv2d(cin, cout, 1, init, stride=spec.stride)

    def forward(self, x: Tensor) -> Tensor:
        activated = F.relu(self.bn1(x))
        out = self.conv1(activated)
        out = self.conv2(F.relu(self.bn2(out)))
        if self.attention is not None:
            out = self.attention(out)
        identity = x if self.shortcut is None else self.shortcut(activated)
        return out + identity


class MBConv(Module):
    """
    逆残差ブロック（MBConv1 / MBConv6）

    展開1×1 → 深さ方向k×k(stride) → 注意 → 射影1×1、各畳み込みの後にBN、活性化はswish。
    stride 1 かつ入出力チャネルが等しい場合のみ残差加算する。
    """

    def __init__(self, spec: BlockSpec, init: ParameterInitializer):
        super().__init__()
        if spec.kind not in ("mbconv1", "mbconv6"):
            raise ConfigurationError(f"MBConvにはkind='mbconv1'または'mbconv6'が必要です: {spec.kind}")
        self.spec = spec
        mid = spec.mid_channels
        self.expand = None
        if spec.expand_ratio != 1:
            self.expand = make_conv(spec.in_channels, mid, 1, init, 1,
                                    spec.ghost, spec.ghost_ratio, spec.ghost_dw_kernel)
            self.expand_bn = BatchNorm2d(mid, init)
        self.depthwise = DepthwiseConv2d(mid, spec.kernel_size, init, stride=spec.stride)
        self.depthwise_bn = BatchNorm2d(mid, init)
        if spec.squeeze_channels is not None:
            self.attention = build_attention(spec.attention, mid, init,
                                             squeeze_channels=spec.squeeze_channels, activation="swish")
        else:
            self.attention = build_attention(spec.attention, mid, init)
        self.project = make_conv(mid, spec.out_channels, 1, init, 1,
                                 spec.ghost, spec.ghost_ratio, spec.ghost_dw_kernel)
        self.project_bn = BatchNorm2d(spec.out_channels, init)
        self.use_residual = spec.stride == 1 and spec.in_channels == spec.out_channels

    def forward(self, x: Tensor) -> Tensor:
        out = x
        if self.expand is not None:
            out = F.swish(self.expand_bn(self.expand(out)))
        out = F.swish(self.depthwise_bn(self.depthwise(out)))
        if self.attention is not None:
            out = self.attention(out)
        out = self.project_bn(self.project(out))
        if self.use_residual:
            out = out + x
        return out


def build_block(spec: BlockSpec, init: ParameterInitializer) -> Module:
    """ブロック設定からモジュールを作成"""
    if spec.kind == "wrn":
        return WRNBlock(spec, init)
    return MBConv(spec, init)
