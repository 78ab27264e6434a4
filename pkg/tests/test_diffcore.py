"""可微数值内核测试"""
import math

import pytest
import torch

from app.component.diffcore import (
    AffineFunction,
    ParamBlock,
    adam_step,
    affine,
    attention,
    attention_weights,
    gated_ff,
    grad_check,
    masked_log_softmax,
    mha,
    rmsnorm,
    swiglu_ff,
)
from app.utils.errors import ConfigurationError, NumericalError
from app.utils.helpers import torch_generator

GRAD_TOL = 1e-4


@pytest.fixture
def rand():
    """固定种子的 float64 随机张量工厂"""
    gen = torch_generator(0)

    def make(*shape, grad=True):
        return torch.randn(*shape, generator=gen, dtype=torch.float64, requires_grad=grad)
    return make


class _BrokenAffine(AffineFunction):
    """反向规则被篡改的仿射变换：∂W 放大 1.5 倍"""

    @staticmethod
    def backward(ctx, gy):
        gx, gW, gb = AffineFunction.backward(ctx, gy)
        return gx, gW * 1.5, gb


class TestKernelGradients:
    """各算子反向规则与中心差分一致"""

    def test_affine(self, rand):
        """测试仿射变换"""
        x, W, b = rand(2, 3, 4), rand(4, 5), rand(5)
        assert grad_check(lambda: (affine(x, W, b) ** 2).sum(), [x, W, b]) < GRAD_TOL

    def test_affine_without_bias(self, rand):
        """测试无偏置的仿射变换"""
        x, W = rand(3, 4), rand(4, 2)
        assert grad_check(lambda: torch.sin(affine(x, W)).sum(), [x, W]) < GRAD_TOL

    def test_rmsnorm(self, rand):
        """测试 RMS 归一化"""
        x, g = rand(3, 6), rand(6)
        weights = torch.linspace(-1, 1, 6, dtype=torch.float64)
        assert grad_check(lambda: (rmsnorm(x, g) * weights).sum(), [x, g]) < GRAD_TOL

    def test_attention_with_mask(self, rand):
        """测试带掩码的注意力"""
        q, k, v = rand(2, 3, 4), rand(2, 5, 4), rand(2, 5, 4)
        mask = torch.ones(2, 3, 5, dtype=torch.bool)
        mask[0, :, 1] = False
        mask[1, 2, :4] = False
        assert grad_check(lambda: (attention(q, k, v, mask) ** 2).sum(), [q, k, v]) < GRAD_TOL

    def test_masked_log_softmax(self, rand):
        """测试带掩码的 log-softmax（屏蔽位置不参与损失）"""
        logits = rand(4, 7)
        mask = torch.rand(4, 7, generator=torch_generator(1)) > 0.3
        mask[:, 0] = True
        weights = torch.randn(4, 7, generator=torch_generator(2), dtype=torch.float64)

        def loss():
            return (masked_log_softmax(logits, mask).masked_fill(~mask, 0.0) * weights).sum()
        assert grad_check(loss, [logits]) < GRAD_TOL

    def test_multi_head_attention(self, rand):
        """测试多头注意力组合"""
        x = rand(3, 4)
        W = [rand(4, 4) for _ in range(4)]
        assert grad_check(lambda: mha(x, x, x, *W, heads=2).pow(2).sum(), [x] + W) < GRAD_TOL

    def test_gated_ff(self, rand):
        """测试门控前馈层"""
        x, W1, b1, W2, b2 = rand(2, 3), rand(3, 3), rand(3), rand(3, 9), rand(9)
        assert grad_check(lambda: gated_ff(x, W1, b1, W2, b2).sum(), [x, W1, b1, W2, b2]) < GRAD_TOL

    def test_swiglu_ff(self, rand):
        """测试 SwiGLU 前馈层"""
        x = rand(2, 4)
        params = [rand(4, 6), rand(6), rand(4, 6), rand(6), rand(6, 4), rand(4)]
        assert grad_check(lambda: swiglu_ff(x, *params).pow(2).sum(), [x] + params) < GRAD_TOL

    def test_detects_broken_backward(self, rand):
        """测试梯度检查能发现被篡改的反向规则"""
        x, W = rand(3, 4), rand(4, 2)
        err = grad_check(lambda: (_BrokenAffine.apply(x, W, None) ** 2).sum(), [x, W])
        assert err > 1e-2


class TestMasking:
    """掩码语义测试"""

    def test_masked_probability_is_zero(self):
        """测试屏蔽位置概率恰为 0"""
        logits = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
        mask = torch.tensor([[True, False, True]])
        probs = masked_log_softmax(logits, mask).exp()
        assert probs[0, 1].item() == 0.0
        assert probs.sum().item() == pytest.approx(1.0)

    def test_masked_attention_weight_is_zero(self, rand):
        """测试被屏蔽的键注意力权重恰为 0"""
        q, k = rand(1, 2, 4, grad=False), rand(1, 3, 4, grad=False)
        mask = torch.tensor([[[True, False, True], [False, True, True]]])
        weights = attention_weights(q, k, mask)
        assert weights[0, 0, 1].item() == 0.0
        assert weights[0, 1, 0].item() == 0.0
        assert torch.allclose(weights.sum(dim=-1), torch.ones(1, 2, dtype=torch.float64))

    def test_fully_masked_row(self, rand):
        """测试全屏蔽的行报错"""
        logits = rand(2, 3)
        mask = torch.tensor([[True, True, True], [False, False, False]])
        with pytest.raises(ConfigurationError):
            masked_log_softmax(logits, mask)
        q, k, v = rand(1, 2, 4), rand(1, 3, 4), rand(1, 3, 4)
        with pytest.raises(ConfigurationError):
            attention(q, k, v, mask.unsqueeze(0))

    def test_shape_mismatch(self, rand):
        """测试维度不匹配"""
        with pytest.raises(ConfigurationError):
            affine(rand(2, 3), rand(4, 5))
        with pytest.raises(ConfigurationError):
            rmsnorm(rand(2, 3), rand(4))

    def test_non_finite_output(self, rand):
        """测试非有限输出抛出 NumericalError"""
        x = torch.tensor([[math.inf, 1.0]], dtype=torch.float64)
        with pytest.raises(NumericalError):
            affine(x, rand(2, 2))


class TestParamBlock:
    """参数块与优化器测试"""

    def test_register_and_shapes(self):
        """测试注册参数与形状统计"""
        block = ParamBlock(dtype=torch.float64, generator=torch_generator(0))
        block.add("W", (4, 3))
        block.add("g", (3,), init="ones")
        assert block.names() == ["W", "g"]
        assert block.shapes() == {"W": (4, 3), "g": (3,)}
        assert block.num_values() == 15
        assert torch.all(block["W"].abs() <= 0.5)
        with pytest.raises(ConfigurationError):
            block.add("W", (1,))

    def test_load_values(self):
        """测试按名称覆盖参数值"""
        block = ParamBlock(dtype=torch.float64)
        block.add("b", (2,), init="zeros")
        block.load_values({"b": torch.tensor([1.0, 2.0])})
        assert block["b"].tolist() == [1.0, 2.0]
        with pytest.raises(ConfigurationError):
            block.load_values({"b": torch.zeros(3)})
        with pytest.raises(ConfigurationError):
            block.load_values({"c": torch.zeros(2)})

    def test_adam_converges_on_quadratic(self):
        """测试 Adam 在二次函数上收敛，矩与步数被记录"""
        block = ParamBlock(dtype=torch.float64)
        w = block.add("w", (3,), init="zeros")
        target = torch.tensor([3.0, -1.0, 0.5], dtype=torch.float64)
        for _ in range(600):
            grad = 2.0 * (w.detach() - target)
            adam_step(block, {"w": grad}, lr=0.05, weight_decay=0.0)
        assert torch.allclose(w.detach(), target, atol=0.05)
        assert block.step_count == 600
        m, v = block.moments("w")
        assert m is not None and v is not None

    def test_first_step_size(self):
        """测试带偏差修正的首步更新幅度约等于学习率"""
        block = ParamBlock(dtype=torch.float64)
        w = block.add("w", (2,), init="zeros")
        adam_step(block, {"w": torch.tensor([4.0, -0.01], dtype=torch.float64)}, lr=0.1, weight_decay=0.0)
        assert w.detach().tolist() == pytest.approx([-0.1, 0.1], rel=1e-5)

    def test_gradient_shape_mismatch(self):
        """测试梯度形状不匹配"""
        block = ParamBlock(dtype=torch.float64)
        block.add("w", (2,), init="zeros")
        with pytest.raises(ConfigurationError):
            adam_step(block, {"w": torch.zeros(3)})
