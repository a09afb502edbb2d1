"""
有限差分による勾配検証
f64の中心差分と自動微分の勾配を比較する
"""

from typing import Callable, Optional, Sequence

import numpy as np

from nn.tensor import Tensor, Tape


def numeric_gradient(fn: Callable[[], Tensor], tensor: Tensor, eps: float = 1e-6,
                     indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    中心差分で数値勾配を計算

    Args:
        fn: スカラー損失を返す関数（tensorの値をその場で読む）
        tensor: 摂動対象のテンソル
        eps: 差分幅
        indices: 検査する平坦インデックス（Noneの場合は全要素）

    Returns:
        tensorと同形状の数値勾配（未検査要素はnan）
    """
    if not tensor.data.flags.c_contiguous:
        tensor.data = np.ascontiguousarray(tensor.data)
    flat = tensor.data.reshape(-1)
    grad = np.full(flat.shape, np.nan, dtype=np.float64)
    targets = range(flat.size) if indices is None else indices
    for index in targets:
        original = flat[index]
        flat[index] = original + eps
        plus = float(fn().data)
        flat[index] = original - eps
        minus = float(fn().data)
        flat[index] = original
        grad[index] = (plus - minus) / (2.0 * eps)
    return grad.reshape(tensor.shape)


def gradient_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
                   max_checks: Optional[int] = None, seed: int = 0, atol: float = 1e-6) -> float:
    """
    自動微分と数値勾配の最大相対誤差を返す

    相対誤差は入力毎に ||a - n|| / max(||a||, ||n||, 1e-12) で計算する。
    ||a - n|| がatol以下の入力は誤差0とみなす。

    Args:
        fn: スカラー損失を返す関数
        inputs: 検査対象のテンソル（f64, requires_grad=True）
        eps: 差分幅
        max_checks: 入力毎に検査する要素数の上限（Noneで全要素）
        seed: 要素サンプリングのシード
        atol: 絶対誤差の下限
    """
    for tensor in inputs:
        if tensor.dtype != np.float64:
            raise ValueError("勾配検証はf64テンソルでのみ実行できます")

    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    analytic = [tape.grad(t) for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for tensor, grad in zip(inputs, analytic):
        if grad is None:
            grad = np.zeros(tensor.shape)
        if max_checks is not None and tensor.size > max_checks:
            indices = np.sort(rng.choice(tensor.size, size=max_checks, replace=False))
        else:
            indices = np.arange(tensor.size)
        numeric = numeric_gradient(fn, tensor, eps, indices).reshape(-1)[indices]
        picked = grad.reshape(-1)[indices]
        denom = max(np.linalg.norm(picked), np.linalg.norm(numeric), 1e-12)
        error = float(np.linalg.norm(picked - numeric))
        if error <= atol:
            continue
        worst = max(worst, error / denom)
    return worst
