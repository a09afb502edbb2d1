"""
テンソルエンジンのユニットテスト
"""

import numpy as np
import pytest

from nn import functional as F
from nn.gradcheck import gradient_check, numeric_gradient
from nn.layers import (
    BatchNorm2d, Conv2d, Dense, Module, ParameterInitializer, Sequential,
    batchnorm_sync, count_tensor_elements
)
from nn.tensor import ShapeError, Tape, Tensor, backward, resolve_dtype


TOLERANCE = 1e-6


def _rand(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """出力に固定の重みを掛けてスカラー化"""
    return (out * Tensor(weights, dtype=np.float64)).sum()


class TestTensor:
    """Tensor のテスト"""

    def test_dtype_inference(self):
        """精度推論のテスト"""
        assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float64
        assert Tensor([1, 2, 3]).dtype == np.float32
        assert Tensor([1.0], dtype=np.float64).dtype == np.float64

    def test_full_reduction_keeps_f64(self):
        """全要素の集約でもf64が保たれることのテスト"""
        x = Tensor(np.linspace(-1.0, 1.0, 6), requires_grad=True, dtype=np.float64)
        assert (x * x).sum().dtype == np.float64
        assert x.mean().dtype == np.float64
        assert Tensor(np.float64(0.1)).dtype == np.float64
        assert Tensor(np.ones(3, dtype=np.float32)).sum().dtype == np.float32
        assert gradient_check(lambda: (x * x * x).sum() * (x.sum() + 2.0), [x]) < TOLERANCE

    def test_resolve_dtype(self):
        """精度名変換のテスト"""
        assert resolve_dtype("f32") is np.float32
        assert resolve_dtype("f64") is np.float64
        with pytest.raises(ValueError, match="無効な精度"):
            resolve_dtype("f16")

    def test_matmul_shape_mismatch(self):
        """行列積の形状不一致のテスト"""
        with pytest.raises(ShapeError, match="axis -1"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))

    def test_backward_requires_scalar(self):
        """非スカラー損失のbackwardのテスト"""
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
            with pytest.raises(ShapeError, match="スカラー"):
                tape.backward(y)

    def test_backward_without_tape(self):
        """テープなしのbackwardのテスト"""
        with pytest.raises(RuntimeError, match="テープ"):
            backward(Tensor(1.0))

    def test_gradients_accumulate_until_reset(self):
        """勾配がリセットまで累積されることのテスト"""
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            tape.backward((x * 3.0).sum())
            tape.clear_records()
            tape.backward((x * x).sum())
            np.testing.assert_allclose(tape.grad(x), [3.0 + 2.0, 3.0 + 4.0])
            tape.reset()
            assert tape.grad(x) is None

    def test_operations_outside_tape_are_not_recorded(self):
        """テープ外の演算は記録されないことのテスト"""
        x = Tensor(np.ones(2), requires_grad=True)
        y = x * 2.0
        with Tape() as tape:
            z = (x + 1.0).sum()
            tape.backward(z)
        assert len(tape.records) == 2
        assert tape.grad(y) is None

    def test_detach_breaks_graph(self):
        """detachで勾配が止まることのテスト"""
        x = Tensor(np.ones(2), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = (x.detach() * x).sum()
            tape.backward(loss)
        np.testing.assert_allclose(tape.grad(x), [1.0, 1.0])

    def test_elementwise_and_reduction_gradients(self):
        """算術・集約演算の勾配検証"""
        rng = np.random.default_rng(0)
        a = _rand(rng, 3, 4)
        b = _rand(rng, 4)
        c = Tensor(rng.uniform(1.0, 2.0, size=(3, 1)), requires_grad=True, dtype=np.float64)

        def fn():
            out = (a * b - a / c + (a ** 2.0) * 0.5).mean(axis=1)
            weights = Tensor(np.arange(1.0, 4.0).reshape(3, 1), dtype=np.float64)
            return (out.reshape(1, 3) @ weights).sum() - (-a).sum()

        assert gradient_check(fn, [a, b, c]) < TOLERANCE

    def test_shape_operation_gradients(self):
        """形状操作の勾配検証"""
        rng = np.random.default_rng(1)
        a = _rand(rng, 2, 3, 4)
        weights = rng.standard_normal((4, 3))

        def fn():
            out = a.transpose(2, 1, 0).reshape(4, 6)[:, 1:4] + a[0].transpose()
            return _weighted_sum(out, weights)

        assert gradient_check(fn, [a]) < TOLERANCE

    def test_numeric_gradient_subset(self):
        """指定インデックスのみ数値勾配を計算するテスト"""
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True, dtype=np.float64)
        grad = numeric_gradient(lambda: (x * x).sum(), x, indices=[1])
        assert np.isnan(grad[0])
        assert grad[1] == pytest.approx(4.0, rel=1e-6)

    def test_gradient_check_absolute_floor(self):
        """真の勾配が0の入力は絶対誤差の下限で通ることのテスト"""
        rng = np.random.default_rng(3)
        x = _rand(rng, 3, 2, 2, 2)
        bias = Tensor(np.array([0.5, -0.5]).reshape(1, 2, 1, 1), requires_grad=True, dtype=np.float64)
        weights = rng.standard_normal(x.shape)

        def fn():
            out = F.batch_norm2d(x + bias, Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2),
                                 training=True)
            return _weighted_sum(out, weights)

        assert gradient_check(fn, [x, bias]) < TOLERANCE

    def test_gradient_check_rejects_f32(self):
        """f32入力での勾配検証のテスト"""
        x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError, match="f64"):
            gradient_check(lambda: x.sum(), [x])


class TestFunctional:
    """微分可能レイヤー演算のテスト"""

    def setup_method(self):
        """テストセットアップ"""
        self.rng = np.random.default_rng(42)

    @pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (2, "valid")])
    def test_conv2d_gradients(self, stride, padding):
        """畳み込みの勾配検証"""
        x = _rand(self.rng, 2, 3, 6, 5)
        w = _rand(self.rng, 4, 3, 3, 3)
        b = _rand(self.rng, 4)
        out_shape = F.conv2d(x, w, b, stride, padding).shape
        weights = self.rng.standard_normal(out_shape)

        assert gradient_check(lambda: _weighted_sum(F.conv2d(x, w, b, stride, padding), weights), [x, w, b]) < TOLERANCE

    def test_conv2d_matches_direct_sum(self):
        """畳み込みが直接計算と一致することのテスト"""
        x = self.rng.standard_normal((1, 2, 4, 4))
        w = self.rng.standard_normal((1, 2, 3, 3))
        out = F.conv2d(Tensor(x), Tensor(w), padding="valid").numpy()
        expected = np.array([[np.sum(x[0, :, i:i + 3, j:j + 3] * w[0]) for j in range(2)] for i in range(2)])
        np.testing.assert_allclose(out[0, 0], expected, rtol=1e-10)

    def test_conv2d_same_output_size(self):
        """sameパディングの出力サイズのテスト"""
        assert F.output_size(60, 3, 2, "same") == 30
        assert F.output_size(7, 3, 2, "same") == 4
        assert F.output_size(7, 3, 2, "valid") == 3

    def test_conv2d_channel_mismatch(self):
        """入力チャネル不一致のテスト"""
        with pytest.raises(ShapeError, match="axis 1"):
            F.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 3, 3))))

    def test_valid_kernel_larger_than_input(self):
        """validパディングでカーネルが入力より大きい場合のテスト"""
        with pytest.raises(ShapeError, match="カーネル"):
            F.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), padding="valid")

    @pytest.mark.parametrize("multiplier,stride", [(1, 1), (2, 2)])
    def test_depthwise_conv2d_gradients(self, multiplier, stride):
        """深さ方向畳み込みの勾配検証"""
        x = _rand(self.rng, 2, 3, 5, 5)
        w = _rand(self.rng, 3 * multiplier, 1, 3, 3)
        b = _rand(self.rng, 3 * multiplier)
        weights = self.rng.standard_normal(F.depthwise_conv2d(x, w, b, stride).shape)

        assert gradient_check(lambda: _weighted_sum(F.depthwise_conv2d(x, w, b, stride), weights), [x, w, b]) < TOLERANCE

    def test_conv1d_gradients(self):
        """1次元畳み込みの勾配検証"""
        x = _rand(self.rng, 2, 1, 7)
        w = _rand(self.rng, 1, 1, 3)
        b = _rand(self.rng, 1)
        weights = self.rng.standard_normal((2, 1, 7))

        assert gradient_check(lambda: _weighted_sum(F.conv1d(x, w, b), weights), [x, w, b]) < TOLERANCE

    def test_conv1d_even_kernel(self):
        """偶数カーネルの1次元畳み込みのテスト"""
        with pytest.raises(ValueError, match="奇数"):
            F.conv1d(Tensor(np.ones((1, 1, 4))), Tensor(np.ones((1, 1, 2))))

    def test_dense_gradients(self):
        """全結合層の勾配検証"""
        x = _rand(self.rng, 2, 3, 5)
        w = _rand(self.rng, 5, 4)
        b = _rand(self.rng, 4)
        weights = self.rng.standard_normal((2, 3, 4))

        assert gradient_check(lambda: _weighted_sum(F.dense(x, w, b), weights), [x, w, b]) < TOLERANCE

    def test_batch_norm_training_gradients(self):
        """学習モードのバッチ正規化の勾配検証"""
        x = _rand(self.rng, 3, 2, 4, 4)
        gamma = _rand(self.rng, 2)
        beta = _rand(self.rng, 2)
        weights = self.rng.standard_normal(x.shape)

        def fn():
            out = F.batch_norm2d(x, gamma, beta, np.zeros(2), np.ones(2), training=True)
            return _weighted_sum(out, weights)

        assert gradient_check(fn, [x, gamma, beta]) < TOLERANCE

    def test_batch_norm_updates_running_statistics(self):
        """移動統計の更新テスト"""
        x = Tensor(self.rng.standard_normal((4, 2, 3, 3)) + 5.0, dtype=np.float64)
        running_mean, running_var = np.zeros(2), np.ones(2)
        F.batch_norm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), running_mean, running_var,
                       training=True, momentum=0.9)

        batch_mean = x.numpy().mean(axis=(0, 2, 3))
        batch_var = x.numpy().var(axis=(0, 2, 3))
        np.testing.assert_allclose(running_mean, 0.1 * batch_mean)
        np.testing.assert_allclose(running_var, 0.9 + 0.1 * batch_var)

    def test_batch_norm_inference_uses_running_statistics(self):
        """推論モードで移動統計を使うことのテスト"""
        x = Tensor(np.full((1, 1, 2, 2), 3.0), dtype=np.float64)
        out = F.batch_norm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)),
                             np.array([1.0]), np.array([4.0]), training=False, eps=0.0)
        np.testing.assert_allclose(out.numpy(), np.full((1, 1, 2, 2), 1.0))

    def test_batch_norm_reducer_sums_statistics(self):
        """合算関数がバッチ統計に使われることのテスト"""
        x = Tensor(self.rng.standard_normal((2, 1, 2, 2)), dtype=np.float64)
        seen = []

        def doubling(vector):
            seen.append(vector.copy())
            return vector * 2.0

        F.batch_norm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), np.zeros(1), np.ones(1),
                       training=True, reducer=doubling)
        assert seen[0][-1] == 8.0

    def test_layer_norm_gradients(self):
        """レイヤー正規化の勾配検証"""
        x = _rand(self.rng, 2, 3, 6)
        gamma = _rand(self.rng, 6)
        beta = _rand(self.rng, 6)
        weights = self.rng.standard_normal(x.shape)

        assert gradient_check(lambda: _weighted_sum(F.layer_norm(x, gamma, beta), weights), [x, gamma, beta]) < TOLERANCE

    @pytest.mark.parametrize("kind", ["gap", "gmp", "avg2d", "max2d"])
    def test_pool_gradients(self, kind):
        """プーリングの勾配検証"""
        x = _rand(self.rng, 2, 3, 4, 4)
        weights = self.rng.standard_normal(F.pool(x, kind).shape)

        assert gradient_check(lambda: _weighted_sum(F.pool(x, kind), weights), [x]) < TOLERANCE

    def test_invalid_pool_kind(self):
        """無効なプーリング種別のテスト"""
        with pytest.raises(ValueError, match="無効なプーリング種別"):
            F.pool(Tensor(np.ones((1, 1, 2, 2))), "median")

    @pytest.mark.parametrize("kind", ["relu", "sigmoid", "swish", "gelu", "softmax"])
    def test_activation_gradients(self, kind):
        """活性化関数の勾配検証"""
        x = _rand(self.rng, 3, 5)
        weights = self.rng.standard_normal((3, 5))

        assert gradient_check(lambda: _weighted_sum(F.activation(x, kind), weights), [x]) < TOLERANCE

    def test_stable_sigmoid_extremes(self):
        """極端な入力でもシグモイドが有限であることのテスト"""
        values = F.stable_sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        np.testing.assert_allclose(values, [0.0, 0.5, 1.0])

    def test_invalid_activation(self):
        """無効な活性化関数のテスト"""
        with pytest.raises(ValueError, match="無効な活性化関数"):
            F.activation(Tensor(np.ones(2)), "tanh")

    def test_attention_gradients(self):
        """スケール付き内積注意の勾配検証"""
        q = _rand(self.rng, 2, 2, 3, 4)
        k = _rand(self.rng, 2, 2, 5, 4)
        v = _rand(self.rng, 2, 2, 5, 3)
        weights = self.rng.standard_normal((2, 2, 3, 3))

        assert gradient_check(lambda: _weighted_sum(F.scaled_dot_product_attention(q, k, v), weights), [q, k, v]) < TOLERANCE

    def test_attention_weights_sum_to_one(self):
        """注意行列の行和が1であることのテスト"""
        q = Tensor(self.rng.standard_normal((1, 1, 3, 4)))
        _, weights = F.scaled_dot_product_attention(q, q, q, return_weights=True)
        np.testing.assert_allclose(weights.sum(axis=-1), np.ones((1, 1, 3)), rtol=1e-5)

    def test_resize_bilinear_gradients(self):
        """双線形リサイズの勾配検証"""
        x = _rand(self.rng, 1, 2, 4, 5)
        weights = self.rng.standard_normal((1, 2, 7, 3))

        assert gradient_check(lambda: _weighted_sum(F.resize_bilinear(x, 7, 3), weights), [x]) < TOLERANCE

    def test_resize_same_size_is_identity(self):
        """同一サイズのリサイズは入力を返すことのテスト"""
        x = Tensor(np.ones((1, 1, 3, 3)))
        assert F.resize_bilinear(x, 3, 3) is x

    def test_bilinear_matrix_rows_sum_to_one(self):
        """補間行列の行和が1であることのテスト"""
        matrix = F.bilinear_matrix(4, 9)
        np.testing.assert_allclose(matrix.sum(axis=1), np.ones(9))

    def test_concat_and_patches_gradients(self):
        """連結とパッチ抽出の勾配検証"""
        a = _rand(self.rng, 1, 2, 4, 4)
        b = _rand(self.rng, 1, 1, 4, 4)
        weights = self.rng.standard_normal((1, 4, 12))

        assert gradient_check(lambda: _weighted_sum(F.extract_patches(F.concat([a, b], 1), 2), weights), [a, b]) < TOLERANCE

    def test_extract_patches_layout(self):
        """パッチの並びのテスト"""
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        patches = F.extract_patches(x, 2).numpy()
        assert patches.shape == (1, 4, 4)
        np.testing.assert_array_equal(patches[0, 1], [2.0, 3.0, 6.0, 7.0])

    def test_extract_patches_indivisible(self):
        """パッチサイズで割り切れない場合のテスト"""
        with pytest.raises(ShapeError, match="割り切れません"):
            F.extract_patches(Tensor(np.ones((1, 1, 5, 5))), 2)

    def test_bce_with_logits(self):
        """バイナリ交差エントロピーの値と勾配のテスト"""
        logits = _rand(self.rng, 4, 3)
        targets = (self.rng.uniform(size=(4, 3)) > 0.5).astype(np.float64)

        value = F.bce_with_logits(logits, targets).item()
        p = 1.0 / (1.0 + np.exp(-logits.numpy()))
        expected = -np.mean(targets * np.log(p) + (1 - targets) * np.log(1 - p))
        assert value == pytest.approx(expected, rel=1e-10)
        assert gradient_check(lambda: F.bce_with_logits(logits, targets), [logits]) < TOLERANCE

    def test_bce_large_logits_are_finite(self):
        """大きなロジットでも損失が有限であることのテスト"""
        value = F.bce_with_logits(Tensor(np.array([[1000.0, -1000.0]])), np.array([[0.0, 1.0]])).item()
        assert np.isfinite(value)
        assert value == pytest.approx(1000.0)

    def test_bce_shape_mismatch(self):
        """ターゲット形状不一致のテスト"""
        with pytest.raises(ShapeError):
            F.bce_with_logits(Tensor(np.ones((2, 3))), np.ones((3, 2)))


SHAPE_SEEDS = list(range(20))
MAX_CHECKS = 24


def _draw(seed: int):
    """シード毎の乱数生成器（形状と値の両方に使う）"""
    return np.random.default_rng(1000 + seed)


def _check(fn, inputs) -> float:
    return gradient_check(fn, inputs, max_checks=MAX_CHECKS)


@pytest.mark.parametrize("seed", SHAPE_SEEDS)
class TestGradientsAcrossShapes:
    """シード付きのランダムな形状での勾配検証"""

    def test_conv2d(self, seed):
        """畳み込み"""
        rng = _draw(seed)
        n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        h, w = rng.integers(3, 8, size=2)
        k = int(rng.choice([1, 3]))
        stride = int(rng.integers(1, 3))
        padding = str(rng.choice(["same", "valid"]))
        x, wt, b = _rand(rng, n, cin, h, w), _rand(rng, cout, cin, k, k), _rand(rng, cout)
        weights = rng.standard_normal(F.conv2d(x, wt, b, stride, padding).shape)

        assert _check(lambda: _weighted_sum(F.conv2d(x, wt, b, stride, padding), weights), [x, wt, b]) < TOLERANCE

    def test_depthwise_conv2d(self, seed):
        """深さ方向畳み込み"""
        rng = _draw(seed)
        n, c, m = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 3)
        h, w = rng.integers(3, 7, size=2)
        k = int(rng.choice([1, 3]))
        stride = int(rng.integers(1, 3))
        padding = str(rng.choice(["same", "valid"]))
        x, wt, b = _rand(rng, n, c, h, w), _rand(rng, c * m, 1, k, k), _rand(rng, c * m)
        weights = rng.standard_normal(F.depthwise_conv2d(x, wt, b, stride, padding).shape)

        assert _check(lambda: _weighted_sum(F.depthwise_conv2d(x, wt, b, stride, padding), weights), [x, wt, b]) < TOLERANCE

    def test_conv1d(self, seed):
        """1次元畳み込み"""
        rng = _draw(seed)
        n, length = rng.integers(1, 4), rng.integers(1, 10)
        k = int(rng.choice([1, 3, 5]))
        x, wt, b = _rand(rng, n, 1, length), _rand(rng, 1, 1, k), _rand(rng, 1)
        weights = rng.standard_normal((n, 1, length))

        assert _check(lambda: _weighted_sum(F.conv1d(x, wt, b), weights), [x, wt, b]) < TOLERANCE

    def test_dense(self, seed):
        """全結合層"""
        rng = _draw(seed)
        lead = tuple(rng.integers(1, 4, size=rng.integers(1, 3)))
        d_in, d_out = rng.integers(1, 7), rng.integers(1, 7)
        x, wt, b = _rand(rng, *lead, d_in), _rand(rng, d_in, d_out), _rand(rng, d_out)
        weights = rng.standard_normal(lead + (d_out,))

        assert _check(lambda: _weighted_sum(F.dense(x, wt, b), weights), [x, wt, b]) < TOLERANCE

    def test_batch_norm_training(self, seed):
        """学習モードのバッチ正規化"""
        rng = _draw(seed)
        n, c = rng.integers(2, 4), rng.integers(1, 4)
        h, w = rng.integers(1, 4, size=2)
        x, gamma, beta = _rand(rng, n, c, h, w), _rand(rng, c), _rand(rng, c)
        weights = rng.standard_normal(x.shape)

        def fn():
            out = F.batch_norm2d(x, gamma, beta, np.zeros(c), np.ones(c), training=True)
            return _weighted_sum(out, weights)

        assert _check(fn, [x, gamma, beta]) < TOLERANCE

    def test_layer_norm(self, seed):
        """レイヤー正規化"""
        rng = _draw(seed)
        n, t, d = rng.integers(1, 3), rng.integers(1, 4), rng.integers(3, 8)
        x, gamma, beta = _rand(rng, n, t, d), _rand(rng, d), _rand(rng, d)
        weights = rng.standard_normal(x.shape)

        assert _check(lambda: _weighted_sum(F.layer_norm(x, gamma, beta), weights), [x, gamma, beta]) < TOLERANCE

    @pytest.mark.parametrize("kind", ["gap", "gmp", "avg2d", "max2d"])
    def test_pool(self, seed, kind):
        """プーリング"""
        rng = _draw(seed)
        n, c = rng.integers(1, 3), rng.integers(1, 4)
        h, w = rng.integers(2, 7, size=2)
        x = _rand(rng, n, c, h, w)
        weights = rng.standard_normal(F.pool(x, kind).shape)

        assert _check(lambda: _weighted_sum(F.pool(x, kind), weights), [x]) < TOLERANCE

    @pytest.mark.parametrize("kind", ["relu", "sigmoid", "swish", "gelu", "softmax"])
    def test_activation(self, seed, kind):
        """活性化関数"""
        rng = _draw(seed)
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        x = _rand(rng, *shape, scale=2.0)
        weights = rng.standard_normal(shape)

        assert _check(lambda: _weighted_sum(F.activation(x, kind), weights), [x]) < TOLERANCE

    def test_attention(self, seed):
        """スケール付き内積注意"""
        rng = _draw(seed)
        n, heads = rng.integers(1, 3), rng.integers(1, 3)
        tq, tk, d, dv = rng.integers(1, 5, size=4)
        q, k, v = _rand(rng, n, heads, tq, d), _rand(rng, n, heads, tk, d), _rand(rng, n, heads, tk, dv)
        weights = rng.standard_normal((n, heads, tq, dv))

        assert _check(lambda: _weighted_sum(F.scaled_dot_product_attention(q, k, v), weights), [q, k, v]) < TOLERANCE

    def test_resize_bilinear(self, seed):
        """双線形リサイズ"""
        rng = _draw(seed)
        n, c = rng.integers(1, 3), rng.integers(1, 3)
        h, w, out_h, out_w = rng.integers(1, 8, size=4)
        x = _rand(rng, n, c, h, w)
        weights = rng.standard_normal((n, c, out_h, out_w))

        assert _check(lambda: _weighted_sum(F.resize_bilinear(x, out_h, out_w), weights), [x]) < TOLERANCE

    def test_concat_and_patches(self, seed):
        """連結とパッチ抽出"""
        rng = _draw(seed)
        patch = int(rng.integers(1, 4))
        gh, gw = rng.integers(1, 4, size=2)
        n, ca, cb = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
        a, b = _rand(rng, n, ca, gh * patch, gw * patch), _rand(rng, n, cb, gh * patch, gw * patch)
        weights = rng.standard_normal((n, gh * gw, patch * patch * (ca + cb)))

        assert _check(lambda: _weighted_sum(F.extract_patches(F.concat([a, b], 1), patch), weights), [a, b]) < TOLERANCE

    def test_bce_with_logits(self, seed):
        """バイナリ交差エントロピー"""
        rng = _draw(seed)
        n, k = rng.integers(1, 6), rng.integers(1, 6)
        logits = _rand(rng, n, k, scale=3.0)
        targets = (rng.uniform(size=(n, k)) > 0.5).astype(np.float64)

        assert _check(lambda: F.bce_with_logits(logits, targets), [logits]) < TOLERANCE

    def test_tensor_arithmetic(self, seed):
        """算術・集約・形状操作"""
        rng = _draw(seed)
        rows, cols = rng.integers(1, 5), rng.integers(1, 5)
        a, b = _rand(rng, rows, cols), _rand(rng, cols)
        c = Tensor(rng.uniform(1.0, 2.0, size=(rows, 1)), requires_grad=True, dtype=np.float64)
        axis = int(rng.integers(0, 2))
        weights = rng.standard_normal(cols if axis == 0 else rows)

        def fn():
            out = (a * b - a / c + (a ** 2.0) * 0.5).transpose().transpose().mean(axis=axis)
            return _weighted_sum(out, weights) + (-a).sum() * 0.1

        assert _check(fn, [a, b, c]) < TOLERANCE


class _TinyNet(Module):
    def __init__(self, init: ParameterInitializer):
        super().__init__()
        self.conv = Conv2d(2, 3, 3, init)
        self.bn = BatchNorm2d(3, init)
        self.head = Dense(3, 2, init)

    def forward(self, x):
        return self.head(F.global_avg_pool(self.bn(self.conv(x))))


class TestModule:
    """Module のテスト"""

    def test_named_tensors_in_registration_order(self):
        """テンソル名が登録順に並ぶことのテスト"""
        net = _TinyNet(ParameterInitializer(seed=0))
        names = [name for name, _ in net.named_tensors()]
        assert names == [
            "conv.weight", "bn.gamma", "bn.beta", "head.weight", "head.bias",
            "bn.running_mean", "bn.running_var",
        ]

    def test_count_tensor_elements(self):
        """テンソル要素数のテスト"""
        net = _TinyNet(ParameterInitializer(seed=0))
        assert count_tensor_elements(net) == 3 * 2 * 9 + 3 * 4 + 3 * 2 + 2

    def test_placeholder_initializer_matches_counts(self):
        """形状のみの初期化でも要素数が一致することのテスト"""
        real = _TinyNet(ParameterInitializer(seed=0))
        lazy = _TinyNet(ParameterInitializer(seed=0, materialize=False))
        assert count_tensor_elements(real) == count_tensor_elements(lazy)

    def test_same_seed_same_parameters(self):
        """同じシードで同じパラメータになることのテスト"""
        a = _TinyNet(ParameterInitializer(seed=3)).state_dict()
        b = _TinyNet(ParameterInitializer(seed=3)).state_dict()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_state_dict_round_trip(self):
        """状態の保存と読み込みのテスト"""
        source = _TinyNet(ParameterInitializer(seed=1))
        target = _TinyNet(ParameterInitializer(seed=2))
        assert target.load_state_dict(source.state_dict()) == []
        for name, arr in target.state_dict().items():
            np.testing.assert_array_equal(arr, source.state_dict()[name])

    def test_state_dict_is_a_copy(self):
        """state_dictがコピーであることのテスト"""
        net = _TinyNet(ParameterInitializer(seed=1))
        state = net.state_dict()
        state["conv.weight"][...] = 0.0
        assert np.any(net.conv.weight.numpy() != 0.0)

    def test_load_state_dict_strict_errors(self):
        """厳密読み込みのエラーテスト"""
        net = _TinyNet(ParameterInitializer(seed=1))
        state = net.state_dict()
        del state["head.bias"]
        with pytest.raises(KeyError, match="head.bias"):
            net.load_state_dict(state)

        state = net.state_dict()
        state["head.weight"] = np.zeros((3, 5))
        with pytest.raises(ShapeError, match="head.weight"):
            net.load_state_dict(state)

        state = net.state_dict()
        state["extra"] = np.zeros(1)
        with pytest.raises(KeyError, match="未知のテンソル名"):
            net.load_state_dict(state)

    def test_load_state_dict_non_strict_skips(self):
        """非厳密読み込みで不一致をスキップするテスト"""
        net = _TinyNet(ParameterInitializer(seed=1))
        state = net.state_dict()
        state["head.weight"] = np.zeros((3, 5))
        del state["head.bias"]
        assert sorted(net.load_state_dict(state, strict=False)) == ["head.bias", "head.weight"]

    def test_train_eval_mode(self):
        """学習・推論モード切替のテスト"""
        net = _TinyNet(ParameterInitializer(seed=0))
        net.eval()
        assert all(not m.training for _, m in net.named_modules())
        net.train()
        assert net.bn.training

    def test_to_changes_precision(self):
        """精度変換のテスト"""
        net = _TinyNet(ParameterInitializer(seed=0)).to(np.float64)
        assert all(arr.dtype == np.float64 for _, arr in net.named_tensors())

    def test_sequential(self):
        """Sequentialのテスト"""
        init = ParameterInitializer(seed=0, dtype=np.float64)
        seq = Sequential(Dense(4, 3, init), Dense(3, 2, init))
        assert len(seq) == 2
        assert seq(Tensor(np.ones((5, 4)))).shape == (5, 2)
        assert [name for name, _ in seq.named_parameters()] == ["0.weight", "0.bias", "1.weight", "1.bias"]

    def test_batchnorm_sync_context(self):
        """同期BatchNormコンテキストのテスト"""
        init = ParameterInitializer(seed=0, dtype=np.float64)
        bn = BatchNorm2d(1, init)
        calls = []

        def identity(vector):
            calls.append(len(vector))
            return vector

        with batchnorm_sync(identity):
            bn(Tensor(np.ones((2, 1, 2, 2))))
        bn(Tensor(np.ones((2, 1, 2, 2))))
        assert calls == [2, 1]

    def test_module_gradients(self):
        """モジュール全体の勾配検証"""
        net = _TinyNet(ParameterInitializer(seed=0, dtype=np.float64))
        x = _rand(np.random.default_rng(5), 3, 2, 4, 4)

        def fn():
            return F.bce_with_logits(net(x), np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))

        assert gradient_check(fn, [x] + net.parameters()) < 1e-5
