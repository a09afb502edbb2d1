"""
モジュールシステムと基本レイヤー
名前付きパラメータ・バッファの管理、初期化、同期BatchNormのコンテキストを提供
"""

import threading
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from nn import functional as F
from nn.tensor import Tensor, ShapeError


BN_EPS = 1e-3
BN_MOMENTUM = 0.99
LN_EPS = 1e-6

_sync_state = threading.local()


@contextmanager
def batchnorm_sync(reducer: Optional[F.StatsReducer]):
    """
    現在のスレッドでBatchNorm統計の合算関数を有効化

    Args:
        reducer: ワーカー間でベクトルを合算する関数（Noneで無効）
    """
    previous = getattr(_sync_state, "reducer", None)
    _sync_state.reducer = reducer
    try:
        yield
    finally:
        _sync_state.reducer = previous


def _active_reducer() -> Optional[F.StatsReducer]:
    return getattr(_sync_state, "reducer", None)


class Parameter(Tensor):
    """学習可能パラメータ"""

    def __init__(self, data: np.ndarray):
        super().__init__(data, requires_grad=True)


@dataclass
class ParameterInitializer:
    """
    パラメータ初期化器

    構築順に1つの乱数列からパラメータを生成する。
    materialize=Falseの場合は形状だけを持つゼロビューを返す（パラメータ数計算用）。
    """
    seed: int = 0
    dtype: type = np.float32
    materialize: bool = True
    bn_eps: float = BN_EPS
    bn_momentum: float = BN_MOMENTUM
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def _placeholder(self, shape: Tuple[int, ...]) -> np.ndarray:
        return np.broadcast_to(np.zeros((), dtype=self.dtype), shape)

    def he_uniform(self, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
        """ファンイン基準の一様分布（He方式）"""
        if not self.materialize:
            return self._placeholder(shape)
        limit = np.sqrt(6.0 / max(fan_in, 1))
        return self.rng.uniform(-limit, limit, size=shape).astype(self.dtype)

    def normal(self, shape: Tuple[int, ...], std: float = 0.02) -> np.ndarray:
        if not self.materialize:
            return self._placeholder(shape)
        return (self.rng.standard_normal(size=shape) * std).astype(self.dtype)

    def zeros(self, shape: Tuple[int, ...]) -> np.ndarray:
        if not self.materialize:
            return self._placeholder(shape)
        return np.zeros(shape, dtype=self.dtype)

    def ones(self, shape: Tuple[int, ...]) -> np.ndarray:
        if not self.materialize:
            return self._placeholder(shape)
        return np.ones(shape, dtype=self.dtype)


class Module:
    """パラメータ・バッファ・子モジュールを登録順に保持する基底クラス"""

    def __init__(self):
        object.__setattr__(self, "_parameters", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name: str, value) -> None:
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif name in self._parameters and value is None:
            del self._parameters[name]
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        """勾配を持たない状態（移動統計など）を登録"""
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # 走査

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            child_prefix = f"{prefix}.{name}" if prefix else name
            yield from child.named_modules(child_prefix)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for module_name, module in self.named_modules(prefix):
            for name, param in module._parameters.items():
                yield (f"{module_name}.{name}" if module_name else name), param

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for module_name, module in self.named_modules(prefix):
            for name, buf in module._buffers.items():
                yield (f"{module_name}.{name}" if module_name else name), buf

    def named_tensors(self) -> Iterator[Tuple[str, np.ndarray]]:
        """パラメータとバッファを名前付き配列として列挙"""
        for name, param in self.named_parameters():
            yield name, param.data
        yield from self.named_buffers()

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    # モード切替

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    # 状態

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """全テンソルのコピーを名前順（登録順）で返す"""
        return OrderedDict((name, np.array(arr, copy=True)) for name, arr in self.named_tensors())

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> List[str]:
        """
        状態を読み込み

        Args:
            state: 名前→配列の辞書
            strict: Trueの場合は名前・形状の不一致をエラーにする

        Returns:
            読み込めなかった（形状不一致または欠落した）テンソル名のリスト
        """
        skipped = []
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name in list(params) + list(buffers):
            if name not in state:
                if strict:
                    raise KeyError(f"状態にテンソルがありません: {name}")
                skipped.append(name)
                continue
            source = np.asarray(state[name])
            if name in params:
                target = params[name]
                if target.data.shape != source.shape:
                    if strict:
                        raise ShapeError(f"テンソル形状が一致しません: {name} {target.data.shape} != {source.shape}")
                    skipped.append(name)
                    continue
                target.data = source.astype(target.data.dtype, copy=True)
            else:
                target_buf = buffers[name]
                if target_buf.shape != source.shape:
                    if strict:
                        raise ShapeError(f"テンソル形状が一致しません: {name} {target_buf.shape} != {source.shape}")
                    skipped.append(name)
                    continue
                target_buf[...] = source
        if strict:
            unknown = set(state) - set(params) - set(buffers)
            if unknown:
                raise KeyError(f"未知のテンソル名: {sorted(unknown)}")
        return skipped

    def to(self, dtype: type) -> "Module":
        """全パラメータ・バッファの精度を変換"""
        for param in self.parameters():
            param.data = param.data.astype(dtype)
        for _, module in self.named_modules():
            for name, buf in list(module._buffers.items()):
                module.register_buffer(name, buf.astype(dtype))
        return self


class Sequential(Module):
    """順番に適用するモジュール列"""

    def __init__(self, *modules: Module):
        super().__init__()
        for index, module in enumerate(modules):
            setattr(self, str(index), module)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self) -> int:
        return len(self._modules)

    def forward(self, x):
        for module in self._modules.values():
            x = module(x)
        return x


class Conv2d(Module):
    """2次元畳み込み層"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, init: ParameterInitializer,
                 stride: int = 1, padding: str = "same", bias: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(init.he_uniform((out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(init.zeros((out_channels,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv2d(Module):
    """深さ方向畳み込み層（チャネル乗数対応）"""

    def __init__(self, channels: int, kernel_size: int, init: ParameterInitializer,
                 stride: int = 1, padding: str = "same", multiplier: int = 1, bias: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = kernel_size * kernel_size
        self.weight = Parameter(init.he_uniform((channels * multiplier, 1, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(init.zeros((channels * multiplier,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.depthwise_conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ChannelConv1d(Module):
    """チャネル系列に沿った1次元畳み込み（ECA用）"""

    def __init__(self, kernel_size: int, init: ParameterInitializer, bias: bool = True):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError(f"カーネルサイズは奇数である必要があります: {kernel_size}")
        self.weight = Parameter(init.he_uniform((1, 1, kernel_size), kernel_size))
        self.bias = Parameter(init.zeros((1,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias)


class Dense(Module):
    """全結合層"""

    def __init__(self, in_features: int, out_features: int, init: ParameterInitializer, bias: bool = True):
        super().__init__()
        self.weight = Parameter(init.he_uniform((in_features, out_features), in_features))
        self.bias = Parameter(init.zeros((out_features,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.dense(x, self.weight, self.bias)


class BatchNorm2d(Module):
    """バッチ正規化層（移動平均・移動分散をバッファとして保持）"""

    def __init__(self, channels: int, init: ParameterInitializer):
        super().__init__()
        self.eps = init.bn_eps
        self.momentum = init.bn_momentum
        self.gamma = Parameter(init.ones((channels,)))
        self.beta = Parameter(init.zeros((channels,)))
        self.register_buffer("running_mean", init.zeros((channels,)))
        self.register_buffer("running_var", init.ones((channels,)))

    def forward(self, x: Tensor) -> Tensor:
        reducer = _active_reducer() if self.training else None
        return F.batch_norm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, eps=self.eps, momentum=self.momentum, reducer=reducer,
        )


class LayerNorm(Module):
    """最終軸のレイヤー正規化層"""

    def __init__(self, features: int, init: ParameterInitializer, eps: float = LN_EPS):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(init.ones((features,)))
        self.beta = Parameter(init.zeros((features,)))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class Activation(Module):
    """活性化関数をモジュールとして扱うラッパー"""

    def __init__(self, kind: str):
        super().__init__()
        if kind not in F.ACTIVATIONS:
            raise ValueError(f"無効な活性化関数: {kind}. 有効な値: {list(F.ACTIVATIONS)}")
        self.kind = kind

    def forward(self, x: Tensor) -> Tensor:
        return F.activation(x, self.kind)


def count_tensor_elements(module: Module) -> int:
    """名前付きテンソル（パラメータ＋バッファ）の要素数合計"""
    return int(sum(arr.size for _, arr in module.named_tensors()))
