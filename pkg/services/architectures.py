"""
アーキテクチャ構築サービス
WRN・EfficientNet・MLPMixer・ViTの構築とパラメータ数の計算を提供
"""

import logging
from typing import List, Optional

import numpy as np

from models.architecture import (
    BlockSpec, ConfigurationError, EfficientNetLayout, ModelConfig, WRNLayout,
)
from nn import functional as F
from nn.layers import (
    Module, Parameter, ParameterInitializer, Sequential, Conv2d, Dense, BatchNorm2d, LayerNorm,
    count_tensor_elements,
)
from nn.tensor import Tensor, ShapeError
from services.blocks import WRNBlock, MBConv


logger = logging.getLogger(__name__)


class UnsupportedFamilyError(ConfigurationError):
    """操作が対象のモデルファミリーに対応していないエラー"""
    pass


class ClassifierModel(Module):
    """
    分類モデルの基底クラス

    features()で最終特徴（畳み込み系はN×C×H×Wの特徴マップ）を、
    classify()でその特徴からロジットN×num_classesを計算する。
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4:
            raise ShapeError(f"入力はN×C×H×Wである必要があります: shape={x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"入力チャネル数(axis 1)がモデル設定と一致しません: {x.shape[1]} != {self.config.in_channels}"
            )

    def features(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def classify(self, features: Tensor) -> Tensor:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        return self.classify(self.features(x))

    def replace_head(self, num_classes: int, init: ParameterInitializer) -> None:
        """分類ヘッドを新しい全結合層に置き換え"""
        self.head = Dense(self.head.weight.shape[0], num_classes, init)

    def backbone_parameter_names(self) -> List[str]:
        """ヘッド以外のパラメータ名"""
        return [name for name, _ in self.named_parameters() if not name.startswith("head.")]


class WideResNet(ClassifierModel):
    """WRN-10-2を基本とするワイド残差ネットワーク"""

    def __init__(self, config: ModelConfig, init: ParameterInitializer):
        super().__init__(config)
        layout: WRNLayout = config.layout
        self.stem = Conv2d(config.in_channels, layout.stem_width, 3, init)
        groups = []
        in_channels = layout.stem_width
        for width, stride in zip(layout.group_widths, layout.group_strides):
            blocks = []
            for index in range(layout.blocks_per_group):
                spec = BlockSpec(
                    kind="wrn",
                    in_channels=in_channels,
                    out_channels=width,
                    stride=stride if index == 0 else 1,
                    attention=config.attention,
                    ghost=config.ghost,
                    ghost_ratio=config.ghost_ratio,
                    ghost_dw_kernel=config.ghost_dw_kernel,
                )
                blocks.append(WRNBlock(spec, init))
                in_channels = width
            groups.append(Sequential(*blocks))
        self.groups = Sequential(*groups)
        self.final_bn = BatchNorm2d(in_channels, init)
        self.head = Dense(in_channels, config.num_classes, init)

    def features(self, x: Tensor) -> Tensor:
        self.check_input(x)
        return F.relu(self.final_bn(self.groups(self.stem(x))))

    def classify(self, features: Tensor) -> Tensor:
        return self.head(F.global_avg_pool(features))


class EfficientNet(ClassifierModel):
    """参照B0ステージ表に基づくEfficientNet"""

    def __init__(self, config: ModelConfig, init: ParameterInitializer):
        super().__init__(config)
        layout: EfficientNetLayout = config.layout
        self.stem = Conv2d(config.in_channels, layout.stem_width, 3, init, stride=2)
        self.stem_bn = BatchNorm2d(layout.stem_width, init)
        blocks = []
        for stage in layout.stages:
            for index in range(stage.repeats):
                in_channels = stage.in_channels if index == 0 else stage.out_channels
                squeeze = None
                if config.se_squeeze_ratio is not None and config.attention.kind == "se":
                    squeeze = max(1, int(in_channels * config.se_squeeze_ratio))
                spec = BlockSpec(
                    kind="mbconv1" if stage.expand_ratio == 1 else "mbconv6",
                    in_channels=in_channels,
                    out_channels=stage.out_channels,
                    stride=stage.stride if index == 0 else 1,
                    attention=config.attention,
                    ghost=config.ghost,
                    ghost_ratio=config.ghost_ratio,
                    ghost_dw_kernel=config.ghost_dw_kernel,
                    kernel_size=stage.kernel_size,
                    squeeze_channels=squeeze,
                )
                blocks.append(MBConv(spec, init))
        self.blocks = Sequential(*blocks)
        last = layout.stages[-1].out_channels
        self.head_conv = Conv2d(last, layout.head_width, 1, init)
        self.head_bn = BatchNorm2d(layout.head_width, init)
        self.head = Dense(layout.head_width, config.num_classes, init)

    def features(self, x: Tensor) -> Tensor:
        self.check_input(x)
        out = F.swish(self.stem_bn(self.stem(x)))
        out = self.blocks(out)
        return F.swish(self.head_bn(self.head_conv(out)))

    def classify(self, features: Tensor) -> Tensor:
        return self.head(F.global_avg_pool(features))


class PatchEmbedding(Module):
    """重ならないパッチの全結合埋め込み"""

    def __init__(self, patch: int, in_channels: int, hidden: int, init: ParameterInitializer):
        super().__init__()
        self.patch = patch
        self.proj = Dense(patch * patch * in_channels, hidden, init)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(F.extract_patches(x, self.patch))


class MixerLayer(Module):
    """トークン混合MLPとチャネル混合MLP（それぞれ前正規化＋残差）"""

    def __init__(self, tokens: int, hidden: int, token_dim: int, channel_dim: int, init: ParameterInitializer):
        super().__init__()
        self.token_norm = LayerNorm(hidden, init)
        self.token_fc1 = Dense(tokens, token_dim, init)
        self.token_fc2 = Dense(token_dim, tokens, init)
        self.channel_norm = LayerNorm(hidden, init)
        self.channel_fc1 = Dense(hidden, channel_dim, init)
        self.channel_fc2 = Dense(channel_dim, hidden, init)

    def token_mixing(self, x: Tensor) -> Tensor:
        y = self.token_norm(x).transpose(0, 2, 1)           # N×hidden×T
        y = self.token_fc2(F.gelu(self.token_fc1(y)))
        return y.transpose(0, 2, 1)

    def channel_mixing(self, x: Tensor) -> Tensor:
        return self.channel_fc2(F.gelu(self.channel_fc1(self.channel_norm(x))))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.token_mixing(x)
        return x + self.channel_mixing(x)


class TokenModel(ClassifierModel):
    """パッチトークンを扱うモデル（入力解像度は設定と一致する必要がある）"""

    def check_input(self, x: Tensor) -> None:
        super().check_input(x)
        if x.shape[2] != self.config.resolution or x.shape[3] != self.config.resolution:
            label = "MLPMixer" if self.config.family == "mlpmixer" else "ViT"
            raise ShapeError(
                f"{label}/{self.config.patch}: 入力解像度{x.shape[2]}×{x.shape[3]}が"
                f"設定{self.config.resolution}と一致しません"
            )


class MLPMixer(TokenModel):
    """MLP-Mixer（位置埋め込みなし、トークンGAPヘッド）"""

    def __init__(self, config: ModelConfig, init: ParameterInitializer):
        super().__init__(config)
        tokens = config.token_count
        self.embed = PatchEmbedding(config.patch, config.in_channels, config.hidden, init)
        self.layers = Sequential(*[
            MixerLayer(tokens, config.hidden, config.token_dim, config.channel_dim, init)
            for _ in range(config.layers)
        ])
        self.norm = LayerNorm(config.hidden, init)
        self.head = Dense(config.hidden, config.num_classes, init)

    def features(self, x: Tensor) -> Tensor:
        self.check_input(x)
        return self.norm(self.layers(self.embed(x)))

    def classify(self, features: Tensor) -> Tensor:
        return self.head(features.mean(axis=1))


class MultiHeadSelfAttention(Module):
    """マルチヘッド自己注意"""

    def __init__(self, hidden: int, heads: int, init: ParameterInitializer):
        super().__init__()
        self.heads = heads
        self.qkv = Dense(hidden, 3 * hidden, init)
        self.proj = Dense(hidden, hidden, init)
        self.last_weights: Optional[np.ndarray] = None

    def forward(self, x: Tensor) -> Tensor:
        n, t, hidden = x.shape
        head_dim = hidden // self.heads
        qkv = self.qkv(x).reshape(n, t, 3, self.heads, head_dim).transpose(2, 0, 3, 1, 4)
        out, weights = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2], return_weights=True)
        self.last_weights = weights
        return self.proj(out.transpose(0, 2, 1, 3).reshape(n, t, hidden))


class TransformerLayer(Module):
    """前正規化Transformerエンコーダ層（MHSA＋MLP、各残差）"""

    def __init__(self, hidden: int, heads: int, mlp_ratio: int, init: ParameterInitializer):
        super().__init__()
        self.attn_norm = LayerNorm(hidden, init)
        self.attn = MultiHeadSelfAttention(hidden, heads, init)
        self.mlp_norm = LayerNorm(hidden, init)
        self.mlp_fc1 = Dense(hidden, hidden * mlp_ratio, init)
        self.mlp_fc2 = Dense(hidden * mlp_ratio, hidden, init)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.attn_norm(x))
        return x + self.mlp_fc2(F.gelu(self.mlp_fc1(self.mlp_norm(x))))


class VisionTransformer(TokenModel):
    """ViT（全結合パッチ埋め込み、学習可能な1次元位置埋め込み）"""

    def __init__(self, config: ModelConfig, init: ParameterInitializer):
        super().__init__(config)
        tokens = config.token_count + (1 if config.use_class_token else 0)
        self.embed = PatchEmbedding(config.patch, config.in_channels, config.hidden, init)
        self.class_token = Parameter(init.normal((1, 1, config.hidden))) if config.use_class_token else None
        self.position = Parameter(init.normal((1, tokens, config.hidden)))
        self.layers = Sequential(*[
            TransformerLayer(config.hidden, config.heads, config.mlp_ratio, init) for _ in range(config.layers)
        ])
        self.norm = LayerNorm(config.hidden, init)
        self.head = Dense(config.hidden, config.num_classes, init)

    def features(self, x: Tensor) -> Tensor:
        self.check_input(x)
        tokens = self.embed(x)
        if self.class_token is not None:
            n = x.shape[0]
            expanded = self.class_token * np.ones((n, 1, 1), dtype=tokens.dtype)
            tokens = F.concat([expanded, tokens], axis=1)
        return self.norm(self.layers(tokens + self.position))

    def classify(self, features: Tensor) -> Tensor:
        if self.class_token is not None:
            return self.head(features[:, 0, :])
        return self.head(features.mean(axis=1))

    def attention_maps(self) -> List[np.ndarray]:
        """直前のforwardで計算された各層の注意行列"""
        return [layer.attn.last_weights for layer in self.layers]


MODEL_BUILDERS = {
    "wrn": WideResNet,
    "efficientnet": EfficientNet,
    "mlpmixer": MLPMixer,
    "vit": VisionTransformer,
}


def build_model(config: ModelConfig, seed: int = 0, materialize: bool = True,
                dtype: type = np.float32) -> ClassifierModel:
    """
    設定からモデルを構築

    Args:
        config: モデル設定
        seed: 初期化の乱数シード
        materialize: Falseの場合は形状のみ（パラメータ数計算用）
        dtype: パラメータの精度

    Returns:
        構築されたモデル
    """
    builder = MODEL_BUILDERS.get(config.family)
    if builder is None:
        raise UnsupportedFamilyError(f"未対応のモデルファミリー: {config.family}")
    init = ParameterInitializer(seed=seed, dtype=dtype, materialize=materialize)
    model = builder(config, init)
    logger.debug(f"モデルを構築しました: {config.name or config.family} ({count_params(model):,} パラメータ)")
    return model


def count_params(model: Module) -> int:
    """パラメータ数（BNの移動統計を含む全名前付きテンソルの要素数）"""
    return count_tensor_elements(model)


def count_config_params(config: ModelConfig) -> int:
    """重みを実体化せずに設定のパラメータ数を計算"""
    return count_params(build_model(config, materialize=False))


def forward(model: ClassifierModel, batch: Tensor) -> Tensor:
    """モデルの順伝播（ロジット N×num_classes）"""
    return model(batch)
