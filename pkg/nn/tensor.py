"""
テンソルと自動微分テープ
NCHW配置の密テンソルと逆モード自動微分を提供
"""

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np


class ShapeError(ValueError):
    """テンソル形状の不一致エラー"""
    pass


_uid_counter = itertools.count()
_tape_state = threading.local()

DEFAULT_DTYPE = np.float32
SUPPORTED_DTYPES = (np.float32, np.float64)

ArrayLike = Union[np.ndarray, float, int, Sequence]
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def resolve_dtype(precision: str) -> type:
    """精度名("f32" / "f64")をnumpyのdtypeに変換"""
    if precision == "f32":
        return np.float32
    if precision == "f64":
        return np.float64
    raise ValueError(f"無効な精度: {precision}. 有効な値: ['f32', 'f64']")


class Tensor:
    """自動微分テープに接続可能な密テンソル"""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype: Optional[type] = None):
        """
        初期化

        Args:
            data: 値（numpy配列またはスカラー/リスト）
            requires_grad: 勾配を必要とするかどうか
            dtype: 値の精度（Noneの場合は入力の浮動小数精度、それ以外はf32）
        """
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in SUPPORTED_DTYPES:
                dtype = data.dtype.type
            else:
                dtype = DEFAULT_DTYPE
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.uid = next(_uid_counter)

    # 基本属性

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        """テープから切り離したコピーを返す"""
        return Tensor(self.data.copy(), requires_grad=False)

    def astype(self, dtype: type) -> "Tensor":
        """精度変換（微分可能）"""
        source_dtype = self.data.dtype
        return _result(
            self.data.astype(dtype),
            (self,),
            lambda g: (g.astype(source_dtype),),
        )

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # 算術演算

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other, like=self)
        a_shape, b_shape = self.shape, other.shape
        return _result(
            self.data + other.data,
            (self, other),
            lambda g: (unbroadcast(g, a_shape), unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other, like=self)
        a_shape, b_shape = self.shape, other.shape
        return _result(
            self.data - other.data,
            (self, other),
            lambda g: (unbroadcast(g, a_shape), unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other, like=self) - self

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other, like=self)
        a, b = self.data, other.data
        return _result(
            a * b,
            (self, other),
            lambda g: (unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other, like=self)
        a, b = self.data, other.data
        return _result(
            a / b,
            (self, other),
            lambda g: (unbroadcast(g / b, a.shape), unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other, like=self) / self

    def __neg__(self) -> "Tensor":
        return _result(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        a = self.data
        return _result(
            a ** exponent,
            (self,),
            lambda g: (g * exponent * a ** (exponent - 1),),
        )

    def __matmul__(self, other: "Tensor") -> "Tensor":
        other = as_tensor(other, like=self)
        a, b = self.data, other.data
        if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ShapeError(f"行列積の内側次元(axis -1)が一致しません: {a.shape} @ {b.shape}")

        def vjp(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

        return _result(a @ b, (self, other), vjp)

    # 形状操作

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        source_shape = self.shape
        return _result(
            self.data.reshape(shape),
            (self,),
            lambda g: (g.reshape(source_shape),),
        )

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return _result(
            np.transpose(self.data, axes),
            (self,),
            lambda g: (np.transpose(g, inverse),),
        )

    def __getitem__(self, index) -> "Tensor":
        source = self.data

        def vjp(g):
            full = np.zeros_like(source)
            np.add.at(full, index, g)
            return (full,)

        return _result(source[index], (self,), vjp)

    # 集約

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        source_shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, source_shape).copy(),)

        return _result(self.data.sum(axis=axis, keepdims=keepdims), (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def current_tape() -> Optional["Tape"]:
    """現在のスレッドでアクティブなテープを取得"""
    stack = getattr(_tape_state, "stack", None)
    return stack[-1] if stack else None


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    """値をTensorに変換（likeが指定された場合はその精度に合わせる）"""
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype.type if like is not None else None
    return Tensor(value, requires_grad=False, dtype=dtype)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """ブロードキャストされた勾配を元の形状に縮約"""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], vjp: VJP) -> Tensor:
    """演算結果のTensorを作成し、必要ならテープに記録"""
    requires_grad = any(p.requires_grad for p in parents)
    data = np.asarray(data)
    dtype = data.dtype.type if data.dtype in SUPPORTED_DTYPES else parents[0].data.dtype.type
    out = Tensor(data, requires_grad=requires_grad, dtype=dtype)
    if requires_grad:
        tape = current_tape()
        if tape is not None:
            tape.record(out, parents, vjp)
    return out


def make_result(data: np.ndarray, parents: Tuple[Tensor, ...], vjp: VJP) -> Tensor:
    """カスタム演算用の公開エントリポイント"""
    return _result(data, parents, vjp)


@dataclass
class TapeRecord:
    """テープに記録された1演算"""
    output_uid: int
    inputs: Tuple[Tensor, ...]
    vjp: VJP


class Tape:
    """
    逆モード自動微分テープ

    with文で有効化したスレッドでのみ演算を記録する。
    勾配は明示的なreset()まで累積される。
    """

    def __init__(self):
        self.records: List[TapeRecord] = []
        self.grads: Dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_tape_state, "stack", None)
        if stack is None:
            stack = []
            _tape_state.stack = stack
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_state.stack.pop()

    def record(self, output: Tensor, inputs: Tuple[Tensor, ...], vjp: VJP) -> None:
        self.records.append(TapeRecord(output.uid, inputs, vjp))

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """
        記録の逆順に勾配を伝播

        Args:
            loss: スカラーの損失テンソル

        Returns:
            uidをキーとする勾配ストア（到達したリーフのみ）
        """
        if loss.size != 1:
            raise ShapeError(f"backwardはスカラー損失のみ対応しています: shape={loss.shape}")

        pending: Dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        if loss.requires_grad:
            leaves[loss.uid] = loss

        for record in reversed(self.records):
            grad_out = pending.pop(record.output_uid, None)
            leaves.pop(record.output_uid, None)
            if grad_out is None:
                continue
            input_grads = record.vjp(grad_out)
            for tensor, grad in zip(record.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                existing = pending.get(tensor.uid)
                pending[tensor.uid] = grad if existing is None else existing + grad
                leaves[tensor.uid] = tensor

        for uid, grad in pending.items():
            if uid not in leaves:
                continue
            existing = self.grads.get(uid)
            self.grads[uid] = grad.copy() if existing is None else existing + grad
        return self.grads

    def grad(self, tensor: Tensor) -> Optional[np.ndarray]:
        """テンソルの累積勾配を取得（未到達の場合None）"""
        return self.grads.get(tensor.uid)

    def reset(self) -> None:
        """記録と勾配ストアをクリア"""
        self.records.clear()
        self.grads.clear()

    def clear_records(self) -> None:
        """勾配を残したまま記録のみクリア"""
        self.records.clear()


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Dict[int, np.ndarray]:
    """アクティブな（または指定された）テープでbackwardを実行"""
    tape = tape or current_tape()
    if tape is None:
        raise RuntimeError("アクティブなテープがありません")
    return tape.backward(loss)

