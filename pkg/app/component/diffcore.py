"""
可微数值内核

每个算子都是带显式反向规则的 torch.autograd.Function：仿射变换、RMS 归一化、
带掩码的缩放点积注意力、带掩码的 log-softmax；多头注意力与前馈层由它们组合而成。
参数统一放在 ParamBlock 中，由 AdamW（解耦权重衰减）更新。
另提供中心差分梯度检查器 grad_check。
"""
import math
from collections import OrderedDict
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from loguru import logger

from app.config import settings
from app.utils.errors import ConfigurationError, NumericalError
from app.utils.helpers import default_dtype

RMS_EPS = 1e-8
MOMENT_PREFIX_M = "adam.m/"
MOMENT_PREFIX_V = "adam.v/"

diff_logger = logger.bind(component="diffcore")


def check_finite(t: torch.Tensor, op: str, where: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    数值检查：出现 NaN/Inf 时抛出 NumericalError

    Args:
        t: 待检查张量
        op: 算子名称（用于诊断信息）
        where: 只检查为 True 的位置
    """
    if not settings.runtime.check_finite:
        return t
    values = t if where is None else t[where.expand_as(t)]
    if not torch.isfinite(values).all():
        raise NumericalError(f"{op} 输出包含 NaN/Inf")
    return t


# ==================== 基础算子 ====================

class AffineFunction(torch.autograd.Function):
    """y = xW (+ b)，x 的最后一维与 W 的第一维相乘"""

    @staticmethod
    def forward(ctx, x, W, b=None):
        if x.shape[-1] != W.shape[0]:
            raise ConfigurationError(f"affine 维度不匹配: x{tuple(x.shape)} · W{tuple(W.shape)}")
        if b is not None and b.shape != (W.shape[1],):
            raise ConfigurationError(f"affine 偏置维度不匹配: b{tuple(b.shape)}，期望 ({W.shape[1]},)")
        ctx.save_for_backward(x, W)
        ctx.has_bias = b is not None
        y = x @ W
        if b is not None:
            y = y + b
        return check_finite(y, "affine")

    @staticmethod
    def backward(ctx, gy):
        x, W = ctx.saved_tensors
        gx = gy @ W.transpose(0, 1)
        gW = x.reshape(-1, x.shape[-1]).transpose(0, 1) @ gy.reshape(-1, gy.shape[-1])
        gb = gy.reshape(-1, gy.shape[-1]).sum(dim=0) if ctx.has_bias else None
        return gx, gW, gb


class RMSNormFunction(torch.autograd.Function):
    """y = gain ⊙ x / sqrt(mean(x²) + ε)，按最后一维归一化"""

    @staticmethod
    def forward(ctx, x, gain):
        if x.shape[-1] < 1 or gain.shape != (x.shape[-1],):
            raise ConfigurationError(f"rmsnorm 维度不匹配: x{tuple(x.shape)}, gain{tuple(gain.shape)}")
        rms = torch.sqrt((x * x).mean(dim=-1, keepdim=True) + RMS_EPS)
        xhat = x / rms
        ctx.save_for_backward(xhat, rms, gain)
        return check_finite(gain * xhat, "rmsnorm")

    @staticmethod
    def backward(ctx, gy):
        xhat, rms, gain = ctx.saved_tensors
        gxhat = gy * gain
        gx = (gxhat - xhat * (gxhat * xhat).mean(dim=-1, keepdim=True)) / rms
        ggain = (gy * xhat).reshape(-1, xhat.shape[-1]).sum(dim=0)
        return gx, ggain


def _attention_scores(q, k, mask):
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ k.transpose(-1, -2)) * scale
    if mask is not None:
        allowed = mask.expand_as(scores)
        if (~allowed).all(dim=-1).any():
            raise ConfigurationError("注意力掩码存在全屏蔽的行（没有可行的键）")
        scores = scores.masked_fill(~allowed, float("-inf"))
    return scores, scale


class AttentionFunction(torch.autograd.Function):
    """
    缩放点积注意力 Z = softmax(QKᵀ/√d_k + mask) V

    mask 为布尔张量（True 表示允许），可广播到 (..., Lq, Lk)；
    被屏蔽位置的注意力权重恰为 0，也不产生梯度。
    """

    @staticmethod
    def forward(ctx, q, k, v, mask=None):
        scores, scale = _attention_scores(q, k, mask)
        attn = torch.softmax(scores, dim=-1)
        ctx.save_for_backward(q, k, v, attn)
        ctx.scale = scale
        return check_finite(attn @ v, "attention")

    @staticmethod
    def backward(ctx, gz):
        q, k, v, attn = ctx.saved_tensors
        ga = gz @ v.transpose(-1, -2)
        gv = attn.transpose(-1, -2) @ gz
        gs = attn * (ga - (ga * attn).sum(dim=-1, keepdim=True))
        gq = (gs @ k) * ctx.scale
        gk = (gs.transpose(-1, -2) @ q) * ctx.scale
        return gq, gk, gv, None


class MaskedLogSoftmaxFunction(torch.autograd.Function):
    """带掩码的 log-softmax：屏蔽位置输出 -inf，概率恰为 0，梯度为 0"""

    @staticmethod
    def forward(ctx, logits, mask):
        mask = mask.expand_as(logits)
        if (~mask).all(dim=-1).any():
            raise ConfigurationError("masked_log_softmax: 所有位置都被屏蔽")
        masked = logits.masked_fill(~mask, float("-inf"))
        shifted = masked - masked.max(dim=-1, keepdim=True).values
        out = shifted - torch.log(torch.exp(shifted).sum(dim=-1, keepdim=True))
        check_finite(out, "masked_log_softmax", where=mask)
        ctx.save_for_backward(torch.exp(out), mask)
        return out

    @staticmethod
    def backward(ctx, g):
        probs, mask = ctx.saved_tensors
        g = torch.where(mask, g, torch.zeros_like(g))
        gx = g - probs * g.sum(dim=-1, keepdim=True)
        return torch.where(mask, gx, torch.zeros_like(gx)), None


def affine(x: torch.Tensor, W: torch.Tensor, b: Optional[torch.Tensor] = None) -> torch.Tensor:
    return AffineFunction.apply(x, W, b)


def rmsnorm(x: torch.Tensor, gain: torch.Tensor) -> torch.Tensor:
    return RMSNormFunction.apply(x, gain)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
              mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    return AttentionFunction.apply(q, k, v, mask)


def attention_weights(q: torch.Tensor, k: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """返回注意力权重矩阵（仅前向，用于诊断与测试）"""
    with torch.no_grad():
        scores, _ = _attention_scores(q, k, mask)
        return torch.softmax(scores, dim=-1)


def masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return MaskedLogSoftmaxFunction.apply(logits, mask)


def instance_norm(x: torch.Tensor) -> torch.Tensor:
    """按节点维做实例归一化（原始编码器的 post-norm 变体使用）"""
    mean = x.mean(dim=-2, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-2, keepdim=True)
    return (x - mean) / torch.sqrt(var + 1e-5)


# ==================== 组合算子 ====================

def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    """(..., L, d) -> (..., H, L, d/H)"""
    *lead, length, d = x.shape
    return x.reshape(*lead, length, heads, d // heads).transpose(-2, -3)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    """(..., H, L, d_k) -> (..., L, H·d_k)"""
    x = x.transpose(-2, -3)
    *lead, length, heads, dk = x.shape
    return x.reshape(*lead, length, heads * dk)


def mha(query: torch.Tensor, key: torch.Tensor, value: torch.Tensor,
        W_Q: torch.Tensor, W_K: torch.Tensor, W_V: torch.Tensor, W_O: torch.Tensor,
        heads: int, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    多头注意力

    Args:
        query: (..., Lq, d)
        key: (..., Lk, d)
        value: (..., Lk, d)
        W_Q, W_K, W_V, W_O: (d, d) 投影矩阵
        heads: 头数 H，要求 d 能被 H 整除
        mask: 布尔掩码，可广播到 (..., Lq, Lk)

    Returns:
        torch.Tensor: (..., Lq, d)
    """
    d = W_Q.shape[1]
    if d % heads != 0:
        raise ConfigurationError(f"模型维度 {d} 不能被头数 {heads} 整除")
    q = split_heads(affine(query, W_Q), heads)
    k = split_heads(affine(key, W_K), heads)
    v = split_heads(affine(value, W_V), heads)
    if mask is not None:
        mask = mask.unsqueeze(-3)
    z = attention(q, k, v, mask)
    return affine(merge_heads(z), W_O)


def gated_ff(x: torch.Tensor, W1: torch.Tensor, b1: torch.Tensor,
             W2: torch.Tensor, b2: torch.Tensor) -> torch.Tensor:
    """
    SiLU 门控前馈层（逐元素门控后与 SiLU 分支做矩阵乘）

    x′ ⊙ σ(x′W1 + b1) 得到 d 维行向量，SiLU(x′W2 + b2) 重排为 d×d 矩阵，两者相乘。

    Args:
        x: (..., d) 预归一化输入
        W1: (d, d)，b1: (d,)
        W2: (d, d²)，b2: (d²,)
    """
    d = x.shape[-1]
    if W2.shape != (d, d * d):
        raise ConfigurationError(f"gated_ff 的 W2 形状应为 ({d}, {d * d})，实际 {tuple(W2.shape)}")
    gate = x * torch.sigmoid(affine(x, W1, b1))
    matrix = F.silu(affine(x, W2, b2)).reshape(*x.shape[:-1], d, d)
    y = (gate.unsqueeze(-2) @ matrix).squeeze(-2)
    return check_finite(y, "gated_ff")


def swiglu_ff(x: torch.Tensor, W1: torch.Tensor, b1: torch.Tensor,
              W2: torch.Tensor, b2: torch.Tensor, W3: torch.Tensor, b3: torch.Tensor) -> torch.Tensor:
    """常规 SwiGLU：(SiLU(xW1+b1) ⊙ (xW2+b2)) W3 + b3"""
    return affine(F.silu(affine(x, W1, b1)) * affine(x, W2, b2), W3, b3)


def plain_ff(x: torch.Tensor, W1: torch.Tensor, b1: torch.Tensor,
             W2: torch.Tensor, b2: torch.Tensor) -> torch.Tensor:
    """ReLU 前馈层"""
    return affine(torch.relu(affine(x, W1, b1)), W2, b2)


# ==================== 参数块与优化器 ====================

class ParamBlock:
    """
    命名参数集合

    保存所有可学习权重（按注册顺序），并持有一个 AdamW 优化器；
    一阶/二阶矩和步数保存在优化器状态中。
    """

    def __init__(self, dtype: Optional[torch.dtype] = None, generator: Optional[torch.Generator] = None):
        self.dtype = dtype or default_dtype()
        self.generator = generator
        self.params: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        self.optimizer: Optional[torch.optim.AdamW] = None

    def add(self, name: str, shape: Sequence[int], fan_in: Optional[int] = None,
            init: str = "uniform") -> torch.Tensor:
        """
        注册参数

        Args:
            name: 参数名（唯一）
            shape: 形状
            fan_in: 均匀初始化 U(-1/√fan_in, 1/√fan_in) 使用的扇入，默认 shape[0]
            init: uniform / ones / zeros
        """
        if name in self.params:
            raise ConfigurationError(f"参数名重复: {name}")
        if init == "ones":
            tensor = torch.ones(*shape, dtype=self.dtype)
        elif init == "zeros":
            tensor = torch.zeros(*shape, dtype=self.dtype)
        else:
            bound = 1.0 / math.sqrt(fan_in or shape[0])
            tensor = torch.empty(*shape, dtype=self.dtype).uniform_(-bound, bound, generator=self.generator)
        tensor.requires_grad_(True)
        self.params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> List[str]:
        return list(self.params.keys())

    def tensors(self) -> List[torch.Tensor]:
        return list(self.params.values())

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: tuple(t.shape) for name, t in self.params.items()}

    def num_values(self) -> int:
        return sum(t.numel() for t in self.params.values())

    def configure_optimizer(self, lr: float, weight_decay: float = 1e-6,
                            betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> torch.optim.AdamW:
        """创建（或重建）AdamW 优化器"""
        self.optimizer = torch.optim.AdamW(self.tensors(), lr=lr, betas=betas, eps=eps,
                                           weight_decay=weight_decay)
        return self.optimizer

    @property
    def step_count(self) -> int:
        if self.optimizer is None:
            return 0
        steps = [int(s["step"]) for s in self.optimizer.state.values() if "step" in s]
        return max(steps) if steps else 0

    def moments(self, name: str) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
        """返回参数的 Adam 一阶/二阶矩，尚未更新时为 (None, None)"""
        if self.optimizer is None:
            return None, None
        state = self.optimizer.state.get(self.params[name], {})
        return state.get("exp_avg"), state.get("exp_avg_sq")

    def optimizer_state(self) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
        """
        导出优化器状态

        Returns:
            Tuple[Dict, Dict]: 超参数与步数；按 ``adam.m/<名称>``、``adam.v/<名称>`` 命名的矩张量。
            尚未更新过时两者都为空
        """
        if self.optimizer is None or self.step_count == 0:
            return {}, {}
        group = self.optimizer.param_groups[0]
        hyper = {
            "step": self.step_count,
            "lr": float(group["lr"]),
            "betas": [float(b) for b in group["betas"]],
            "eps": float(group["eps"]),
            "weight_decay": float(group["weight_decay"]),
        }
        moments = {}
        for name in self.params:
            m, v = self.moments(name)
            if m is not None:
                moments[f"{MOMENT_PREFIX_M}{name}"] = m.detach().clone()
                moments[f"{MOMENT_PREFIX_V}{name}"] = v.detach().clone()
        return hyper, moments

    def restore_optimizer_state(self, hyper: Dict[str, Any], moments: Dict[str, torch.Tensor]):
        """按 optimizer_state 的输出重建 AdamW 及其一阶/二阶矩与步数"""
        optimizer = self.configure_optimizer(
            lr=hyper["lr"], weight_decay=hyper["weight_decay"],
            betas=tuple(hyper["betas"]), eps=hyper["eps"])
        state_dict = optimizer.state_dict()
        state = {}
        for index, name in enumerate(self.params):
            m = moments.get(f"{MOMENT_PREFIX_M}{name}")
            v = moments.get(f"{MOMENT_PREFIX_V}{name}")
            if m is None or v is None:
                continue
            shape = tuple(self.params[name].shape)
            if tuple(m.shape) != shape or tuple(v.shape) != shape:
                raise ConfigurationError(f"参数 {name} 的矩形状不匹配: {tuple(m.shape)} != {shape}")
            state[index] = {
                "step": torch.tensor(float(hyper["step"])),
                "exp_avg": m.to(self.dtype).clone(),
                "exp_avg_sq": v.to(self.dtype).clone(),
            }
        state_dict["state"] = state
        optimizer.load_state_dict(state_dict)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def load_values(self, values: Dict[str, torch.Tensor]):
        """按名称覆盖参数值（形状必须一致）"""
        with torch.no_grad():
            for name, value in values.items():
                if name not in self.params:
                    raise ConfigurationError(f"未知参数: {name}")
                target = self.params[name]
                if tuple(value.shape) != tuple(target.shape):
                    raise ConfigurationError(
                        f"参数 {name} 形状不匹配: {tuple(value.shape)} != {tuple(target.shape)}")
                target.copy_(value.to(target.dtype))


def adam_step(params: ParamBlock, grads: Optional[Dict[str, torch.Tensor]] = None, lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 1e-6) -> ParamBlock:
    """
    执行一步带偏差修正、解耦权重衰减的 Adam 更新

    Args:
        params: 参数块
        grads: 名称 -> 梯度；为空时使用参数上已累积的 .grad
        lr, beta1, beta2, eps, weight_decay: 优化器超参数
    """
    if params.optimizer is None:
        params.configure_optimizer(lr, weight_decay, (beta1, beta2), eps)
    for group in params.optimizer.param_groups:
        group.update(lr=lr, betas=(beta1, beta2), eps=eps, weight_decay=weight_decay)
    if grads is not None:
        for name, g in grads.items():
            target = params[name]
            if tuple(g.shape) != tuple(target.shape):
                raise ConfigurationError(f"梯度 {name} 形状不匹配: {tuple(g.shape)} != {tuple(target.shape)}")
            target.grad = g.detach().to(target.dtype).clone()
    params.optimizer.step()
    return params


# ==================== 梯度检查 ====================

ParamsLike = Union[ParamBlock, Sequence[torch.Tensor]]


def _as_tensors(params: ParamsLike) -> List[torch.Tensor]:
    if isinstance(params, ParamBlock):
        return params.tensors()
    return list(params)


def grad_check(fn: Callable[[], torch.Tensor], params: ParamsLike, h: float = 1e-4,
               max_coords: int = 200, seed: int = 0) -> float:
    """
    中心差分梯度检查

    Args:
        fn: 无参可调用对象，返回标量张量（需为确定性计算）
        params: 参与检查的参数
        h: 差分步长
        max_coords: 坐标总数超过该值时随机抽取 max_coords 个坐标
        seed: 抽样种子

    Returns:
        float: 最大相对误差 |a−n| / max(1, |a|, |n|)

    Raises:
        NumericalError: 函数值或梯度出现非有限值
    """
    tensors = _as_tensors(params)
    loss = fn()
    if not torch.isfinite(loss):
        raise NumericalError(f"grad_check: 函数值非有限 ({loss.item()})")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]

    coords = [(pi, ci) for pi, t in enumerate(tensors) for ci in range(t.numel())]
    if len(coords) > max_coords:
        gen = torch.Generator().manual_seed(seed)
        picked = torch.randperm(len(coords), generator=gen)[:max_coords].sort().values.tolist()
        coords = [coords[i] for i in picked]

    worst = 0.0
    with torch.no_grad():
        for pi, ci in coords:
            flat = tensors[pi].view(-1)
            original = flat[ci].item()
            flat[ci] = original + h
            f_plus = fn().item()
            flat[ci] = original - h
            f_minus = fn().item()
            flat[ci] = original
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericalError(f"grad_check: 参数 {pi} 坐标 {ci} 处函数值非有限")
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = grads[pi].reshape(-1)[ci].item()
            rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, rel)
    diff_logger.debug(f"grad_check 完成: 坐标数={len(coords)}, 最大相对误差={worst:.3e}")
    return worst
