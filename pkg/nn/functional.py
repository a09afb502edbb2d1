"""
微分可能なレイヤー演算
畳み込み・正規化・プーリング・活性化・注意機構・リサイズ・損失を提供
"""

import math
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

from nn.tensor import Tensor, ShapeError, make_result


PADDING_MODES = ("same", "valid")
ACTIVATIONS = ("relu", "sigmoid", "swish", "gelu", "softmax")
POOL_KINDS = ("gap", "gmp", "avg2d", "max2d")

# バッチ統計を全ワーカーで合算する関数（同期BatchNorm用）
StatsReducer = Callable[[np.ndarray], np.ndarray]


def _check_rank(x: Tensor, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{name}は{rank}次元である必要があります: shape={x.shape}")


def _padding_amounts(size: int, kernel: int, stride: int, padding: str, axis: int) -> Tuple[int, int, int]:
    """出力サイズと前後のパディング量を計算"""
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + kernel - size, 0)
        before = total // 2
        return out, before, total - before
    if padding == "valid":
        if size < kernel:
            raise ShapeError(f"カーネル({kernel})が入力(axis {axis}, size={size})より大きいです")
        return (size - kernel) // stride + 1, 0, 0
    raise ValueError(f"無効なpadding: {padding}. 有効な値: {list(PADDING_MODES)}")


def output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    """畳み込み後の空間サイズ"""
    return _padding_amounts(size, kernel, stride, padding, axis=2)[0]


def _pad_spatial(data: np.ndarray, pads: Tuple[int, int, int, int]) -> np.ndarray:
    top, bottom, left, right = pads
    if not any(pads):
        return data
    return np.pad(data, ((0, 0), (0, 0), (top, bottom), (left, right)))


def _windows(xp: np.ndarray, kh: int, kw: int, oh: int, ow: int, stride: int) -> np.ndarray:
    """(N, C, kh, kw, oh, ow) のスライディングウィンドウビュー"""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def _strided_slice(i: int, j: int, oh: int, ow: int, stride: int):
    return (
        slice(None),
        slice(None),
        slice(i, i + stride * (oh - 1) + 1, stride),
        slice(j, j + stride * (ow - 1) + 1, stride),
    )


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    """
    2次元畳み込み（相互相関）

    Args:
        x: 入力 N×C×H×W
        weight: 重み O×I×kh×kw
        bias: バイアス O（オプション）
        stride: ストライド
        padding: "same" または "valid"

    Returns:
        出力 N×O×oh×ow
    """
    _check_rank(x, 4, "x")
    _check_rank(weight, 4, "weight")
    if stride < 1:
        raise ValueError(f"strideは1以上である必要があります: {stride}")
    n, c, h, w = x.shape
    o, i_ch, kh, kw = weight.shape
    if c != i_ch:
        raise ShapeError(f"入力チャネル数(axis 1)が一致しません: x={c}, weight={i_ch}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"バイアスの形状(axis 0)が出力チャネル数と一致しません: bias={bias.shape}, out={o}")

    oh, top, bottom = _padding_amounts(h, kh, stride, padding, axis=2)
    ow, left, right = _padding_amounts(w, kw, stride, padding, axis=3)
    xp = _pad_spatial(x.data, (top, bottom, left, right))
    cols = _windows(xp, kh, kw, oh, ow, stride)
    wd = weight.data

    out = np.tensordot(cols, wd, axes=([1, 2, 3], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def vjp(g: np.ndarray):
        gt = g.transpose(0, 2, 3, 1)
        dw = np.tensordot(gt, cols, axes=([0, 1, 2], [0, 4, 5]))
        dx = None
        if x.requires_grad:
            dcols = np.tensordot(gt, wd, axes=([3], [0]))
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[_strided_slice(i, j, oh, ow, stride)] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, top:top + h, left:left + w]
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, vjp)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: str = "same") -> Tensor:
    """
    深さ方向畳み込み（チャネル毎のフィルタ）

    重みは (C·m)×1×kh×kw。m はチャネル乗数で、チャネルcの出力は c·m..c·m+m-1 に並ぶ。
    """
    _check_rank(x, 4, "x")
    _check_rank(weight, 4, "weight")
    n, c, h, w = x.shape
    cm, one, kh, kw = weight.shape
    if one != 1 or cm % c != 0:
        raise ShapeError(f"深さ方向畳み込みの重み(axis 0/1)が入力チャネル{c}と整合しません: weight={weight.shape}")
    if bias is not None and bias.shape != (cm,):
        raise ShapeError(f"バイアスの形状(axis 0)が出力チャネル数と一致しません: bias={bias.shape}, out={cm}")
    m = cm // c

    oh, top, bottom = _padding_amounts(h, kh, stride, padding, axis=2)
    ow, left, right = _padding_amounts(w, kw, stride, padding, axis=3)
    xp = _pad_spatial(x.data, (top, bottom, left, right))
    wr = weight.data.reshape(c, m, kh, kw)

    out = np.zeros((n, c, m, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[_strided_slice(i, j, oh, ow, stride)]
            out += xs[:, :, None] * wr[None, :, :, i, j, None, None]
    out = out.reshape(n, cm, oh, ow)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def vjp(g: np.ndarray):
        g5 = g.reshape(n, c, m, oh, ow)
        dw = np.zeros((c, m, kh, kw), dtype=xp.dtype)
        dxp = np.zeros(xp.shape, dtype=xp.dtype) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                sl = _strided_slice(i, j, oh, ow, stride)
                xs = xp[sl]
                dw[:, :, i, j] = (g5 * xs[:, :, None]).sum(axis=(0, 3, 4))
                if dxp is not None:
                    dxp[sl] += (g5 * wr[None, :, :, i, j, None, None]).sum(axis=2)
        dx = dxp[:, :, top:top + h, left:left + w] if dxp is not None else None
        dw = dw.reshape(cm, 1, kh, kw)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, vjp)


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: str = "same") -> Tensor:
    """
    単一チャネルの1次元畳み込み（ゼロ埋めsame）

    Args:
        x: 入力 N×1×L
        weight: 重み 1×1×k（kは奇数）
        bias: スカラーバイアス（形状 (1,)、オプション）
    """
    _check_rank(x, 3, "x")
    _check_rank(weight, 3, "weight")
    if padding != "same":
        raise ValueError(f"conv1dはsameパディングのみ対応しています: {padding}")
    if x.shape[1] != 1 or weight.shape[:2] != (1, 1):
        raise ShapeError(f"conv1dは単一チャネル(axis 1)のみ対応しています: x={x.shape}, weight={weight.shape}")
    k = weight.shape[2]
    if k % 2 == 0:
        raise ValueError(f"カーネルサイズは奇数である必要があります: {k}")
    length = x.shape[2]
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    wv = weight.data.reshape(k)

    out = np.zeros(x.shape, dtype=xp.dtype)
    for j in range(k):
        out += wv[j] * xp[:, :, j:j + length]
    if bias is not None:
        out += bias.data.reshape(())

    def vjp(g: np.ndarray):
        dw = np.zeros(k, dtype=xp.dtype)
        dxp = np.zeros(xp.shape, dtype=xp.dtype)
        for j in range(k):
            dw[j] = (g * xp[:, :, j:j + length]).sum()
            dxp[:, :, j:j + length] += wv[j] * g
        dx = dxp[:, :, pad:pad + length]
        if bias is None:
            return dx, dw.reshape(1, 1, k)
        return dx, dw.reshape(1, 1, k), np.asarray(g.sum(), dtype=xp.dtype).reshape(bias.shape)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, vjp)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """全結合層（先頭の任意次元はバッチとして扱う）"""
    _check_rank(weight, 2, "weight")
    features, units = weight.shape
    if x.shape[-1] != features:
        raise ShapeError(f"特徴次元(axis -1)が一致しません: x={x.shape[-1]}, weight={features}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def vjp(g: np.ndarray):
        g2 = g.reshape(-1, units)
        dw = xd.reshape(-1, features).T @ g2
        dx = g @ wd.T if x.requires_grad else None
        if bias is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, vjp)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, eps: float = 1e-3, momentum: float = 0.99,
                 reducer: Optional[StatsReducer] = None) -> Tensor:
    """
    バッチ正規化

    学習モードではバッチ統計で正規化し移動統計を更新する。
    reducerが指定された場合は全ワーカーの統計を合算する（同期BatchNorm）。

    Args:
        x: 入力 N×C×H×W
        gamma: スケール C
        beta: シフト C
        running_mean: 移動平均（インプレース更新）
        running_var: 移動分散（インプレース更新）
        training: 学習モードかどうか
        eps: 分散に加える微小値
        momentum: 移動統計のモーメンタム
        reducer: ワーカー間合算関数
    """
    _check_rank(x, 4, "x")
    n, c, h, w = x.shape
    for name, arr in (("gamma", gamma.shape), ("beta", beta.shape),
                      ("running_mean", running_mean.shape), ("running_var", running_var.shape)):
        if arr != (c,):
            raise ShapeError(f"{name}の長さがチャネル数(axis 1)と一致しません: {arr} != ({c},)")

    xd = x.data
    dtype = xd.dtype
    if training:
        sums = np.concatenate([xd.sum(axis=(0, 2, 3)), np.asarray([n * h * w], dtype=dtype)])
        if reducer is not None:
            sums = reducer(sums)
        count = sums[c]
        mean = sums[:c] / count
        centered = xd - mean[None, :, None, None]
        sq = (centered * centered).sum(axis=(0, 2, 3))
        if reducer is not None:
            sq = reducer(sq)
        var = sq / count
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        count = None
        mean = running_mean.astype(dtype, copy=False)
        var = running_var.astype(dtype, copy=False)
        centered = xd - mean[None, :, None, None]

    inv = (1.0 / np.sqrt(var + eps)).astype(dtype, copy=False)
    xhat = centered * inv[None, :, None, None]
    gd = gamma.data
    out = xhat * gd[None, :, None, None] + beta.data[None, :, None, None]

    def vjp(g: np.ndarray):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd[None, :, None, None]
        if training:
            sums_back = np.concatenate([dxhat.sum(axis=(0, 2, 3)), (dxhat * xhat).sum(axis=(0, 2, 3))])
            if reducer is not None:
                sums_back = reducer(sums_back)
            mean_dxhat = (sums_back[:c] / count)[None, :, None, None]
            mean_dxhat_xhat = (sums_back[c:] / count)[None, :, None, None]
            dx = inv[None, :, None, None] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
        else:
            dx = dxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """最終軸に沿ったレイヤー正規化"""
    features = x.shape[-1]
    if gamma.shape != (features,) or beta.shape != (features,):
        raise ShapeError(f"スケール/シフトの長さが特徴次元(axis -1)と一致しません: {gamma.shape}, {beta.shape}, {features}")
    xd = x.data
    centered = xd - xd.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def vjp(g: np.ndarray):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgamma = (g * xhat).reshape(-1, features).sum(axis=0)
        dbeta = g.reshape(-1, features).sum(axis=0)
        return dx, dgamma, dbeta

    return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), vjp)


# プーリング

def reduce_max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """指定軸の最大値（勾配は最初の最大位置へ）"""
    xd = x.data
    idx = np.expand_dims(np.argmax(xd, axis=axis), axis)
    out = np.take_along_axis(xd, idx, axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g: np.ndarray):
        gk = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros_like(xd)
        np.put_along_axis(full, idx, gk, axis)
        return (full,)

    return make_result(out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """空間方向の全体平均 N×C×H×W → N×C"""
    _check_rank(x, 4, "x")
    return x.mean(axis=(2, 3))


def global_max_pool(x: Tensor) -> Tensor:
    """空間方向の全体最大 N×C×H×W → N×C"""
    _check_rank(x, 4, "x")
    n, c, h, w = x.shape
    return reduce_max(x.reshape(n, c, h * w), axis=2)


def avg_pool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """窓平均プーリング（validパディング）"""
    _check_rank(x, 4, "x")
    stride = stride or window
    n, c, h, w = x.shape
    oh, _, _ = _padding_amounts(h, window, stride, "valid", axis=2)
    ow, _, _ = _padding_amounts(w, window, stride, "valid", axis=3)
    xd = x.data
    scale = 1.0 / (window * window)
    out = np.zeros((n, c, oh, ow), dtype=xd.dtype)
    for i in range(window):
        for j in range(window):
            out += xd[_strided_slice(i, j, oh, ow, stride)]
    out *= scale

    def vjp(g: np.ndarray):
        dx = np.zeros_like(xd)
        for i in range(window):
            for j in range(window):
                dx[_strided_slice(i, j, oh, ow, stride)] += g * scale
        return (dx,)

    return make_result(out, (x,), vjp)


def max_pool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """窓最大プーリング（validパディング）"""
    _check_rank(x, 4, "x")
    stride = stride or window
    n, c, h, w = x.shape
    oh, _, _ = _padding_amounts(h, window, stride, "valid", axis=2)
    ow, _, _ = _padding_amounts(w, window, stride, "valid", axis=3)
    xd = x.data
    stacked = np.stack([xd[_strided_slice(i, j, oh, ow, stride)]
                        for i in range(window) for j in range(window)])
    argmax = np.argmax(stacked, axis=0)
    out = np.take_along_axis(stacked, argmax[None], axis=0)[0]

    def vjp(g: np.ndarray):
        dx = np.zeros_like(xd)
        for k in range(window * window):
            i, j = divmod(k, window)
            dx[_strided_slice(i, j, oh, ow, stride)] += g * (argmax == k)
        return (dx,)

    return make_result(out, (x,), vjp)


def pool(x: Tensor, kind: str, window: int = 2, stride: Optional[int] = None) -> Tensor:
    """プーリングのディスパッチャ"""
    if kind == "gap":
        return global_avg_pool(x)
    if kind == "gmp":
        return global_max_pool(x)
    if kind == "avg2d":
        return avg_pool2d(x, window, stride)
    if kind == "max2d":
        return max_pool2d(x, window, stride)
    raise ValueError(f"無効なプーリング種別: {kind}. 有効な値: {list(POOL_KINDS)}")


# 活性化関数

def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """オーバーフローしないシグモイド"""
    out = np.empty_like(z)
    positive = z >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-z[positive]))
    e = np.exp(z[~positive])
    out[~positive] = e / (1.0 + e)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),))


def swish(x: Tensor) -> Tensor:
    xd = x.data
    s = stable_sigmoid(xd)
    return make_result(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU（tanh近似）"""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def vjp(g: np.ndarray):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner),)

    return make_result(out, (x,), vjp)


def softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = softmax_array(x.data, axis)
    return make_result(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def activation(x: Tensor, kind: str) -> Tensor:
    """活性化関数のディスパッチャ"""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "swish":
        return swish(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "softmax":
        return softmax(x)
    raise ValueError(f"無効な活性化関数: {kind}. 有効な値: {list(ACTIVATIONS)}")


# 注意機構

def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor,
                                 return_weights: bool = False) -> Union[Tensor, Tuple[Tensor, np.ndarray]]:
    """
    softmax(q·kᵀ/√d)·v をヘッド毎に計算

    Args:
        q, k, v: N×h×T×d

    Returns:
        出力テンソル（return_weights=Trueの場合は注意行列も返す）
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        _check_rank(t, 4, name)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"qとkのヘッド次元(axis 3)が一致しません: {q.shape} / {k.shape}")
    if k.shape[2] != v.shape[2]:
        raise ShapeError(f"kとvのトークン数(axis 2)が一致しません: {k.shape} / {v.shape}")
    qd, kd, vd = q.data, k.data, v.data
    scale = 1.0 / math.sqrt(q.shape[-1])
    weights = softmax_array((qd @ np.swapaxes(kd, -1, -2)) * scale)
    out = weights @ vd

    def vjp(g: np.ndarray):
        dv = np.swapaxes(weights, -1, -2) @ g
        da = g @ np.swapaxes(vd, -1, -2)
        ds = weights * (da - (da * weights).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ kd
        dk = np.swapaxes(ds, -1, -2) @ qd
        return dq, dk, dv

    result = make_result(out, (q, k, v), vjp)
    if return_weights:
        return result, weights
    return result


# リサイズ

def bilinear_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """align_corners=False の1次元線形補間行列 (dst×src)"""
    matrix = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        pos = min(max((i + 0.5) * scale - 0.5, 0.0), src - 1.0)
        i0 = int(math.floor(pos))
        i1 = min(i0 + 1, src - 1)
        frac = pos - i0
        matrix[i, i0] += 1.0 - frac
        matrix[i, i1] += frac
    return matrix.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """双線形リサイズ（同一サイズの場合は入力をそのまま返す）"""
    _check_rank(x, 4, "x")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"出力サイズは1以上である必要があります: {out_h}×{out_w}")
    dtype = x.dtype
    rh = bilinear_matrix(h, out_h, dtype)
    rw = bilinear_matrix(w, out_w, dtype)
    out = rh @ x.data @ rw.T
    return make_result(out, (x,), lambda g: (rh.T @ g @ rw,))


# 形状ユーティリティ

def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """指定軸で連結"""
    arrays = [t.data for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def vjp(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tuple(tensors), vjp)


def extract_patches(x: Tensor, patch: int) -> Tensor:
    """重ならないパッチに分割 N×C×H×W → N×T×(p·p·C)"""
    _check_rank(x, 4, "x")
    n, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"解像度({h}×{w})がパッチサイズ{patch}で割り切れません")
    gh, gw = h // patch, w // patch
    patches = x.reshape(n, c, gh, patch, gw, patch).transpose(0, 2, 4, 3, 5, 1)
    return patches.reshape(n, gh * gw, patch * patch * c)


# 損失

def bce_with_logits(logits: Tensor, targets: Union[Tensor, np.ndarray]) -> Tensor:
    """
    数値安定なバイナリ交差エントロピー（全要素平均）

    Args:
        logits: N×K
        targets: 0/1 の N×K
    """
    z = logits.data
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    t = t.astype(z.dtype, copy=False)
    if t.shape != z.shape:
        raise ShapeError(f"ターゲット形状がロジットと一致しません: {t.shape} != {z.shape}")
    count = z.size
    losses = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    value = np.asarray(losses.sum() / count, dtype=z.dtype)

    def vjp(g: np.ndarray):
        return ((stable_sigmoid(z) - t) * (g / count),)

    return make_result(value, (logits,), vjp)
