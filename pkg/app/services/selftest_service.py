"""
自检服务

梯度检查（各算子与 REINFORCE 替代损失）以及环境与几何/穷举基准的一致性检查。
"""
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
import torch
from loguru import logger

from app.component.diffcore import (
    affine,
    attention,
    grad_check,
    masked_log_softmax,
    rmsnorm,
)
from app.component.env import discretize, replay
from app.component.policy import CETSPPolicy
from app.component.trainer import reinforce_loss
from app.models.configs import DecodeMode, PolicyConfig
from app.models.instance import GenConfig
from app.services.geometry import apply_symmetry, tour_length
from app.services.heuristics import brute_force, cheapest_insertion, nearest_neighbor, refine_waypoints
from app.services.instance_service import generate_batch
from app.utils.helpers import torch_generator

selftest_logger = logger.bind(component="selftest")

GRAD_TOL = 1e-4
LENGTH_TOL = 1e-9

# 梯度检查用的微型策略
MICRO_POLICY = dict(layers=1, dim=16, heads=2, gamma=4, k_nn=3, seed=0)


@dataclass
class CheckResult:
    """单项检查结果"""
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def to_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name:<28} {self.detail} ({self.seconds:.2f}s)"


class SelftestService:
    """自检服务"""

    def __init__(self, seed: int = 0, oracle_count: int = 200):
        """
        初始化自检服务

        Args:
            seed: 随机种子
            oracle_count: 环境/穷举一致性检查的实例数
        """
        self.seed = seed
        self.oracle_count = oracle_count

    def _gen(self, n: int, count: int, offset: int = 0):
        return generate_batch(GenConfig(sizes=[n], seed=self.seed), n, count, start_index=offset)

    # ==================== 梯度检查 ====================

    def check_kernels(self) -> str:
        gen = torch_generator(self.seed)
        rand = lambda *shape: torch.randn(*shape, generator=gen, dtype=torch.float64, requires_grad=True)
        errors = {}

        x, W, b = rand(3, 4), rand(4, 5), rand(5)
        errors["affine"] = grad_check(lambda: (affine(x, W, b) ** 2).sum(), [x, W, b])

        g = rand(4)
        errors["rmsnorm"] = grad_check(lambda: (rmsnorm(x, g) * torch.arange(4.0, dtype=torch.float64)).sum(), [x, g])

        q, k, v = rand(2, 3, 4), rand(2, 5, 4), rand(2, 5, 4)
        mask = torch.ones(2, 3, 5, dtype=torch.bool)
        mask[:, :, -1] = False
        errors["attention"] = grad_check(lambda: (attention(q, k, v, mask) ** 2).sum(), [q, k, v])

        logits = rand(3, 6)
        lmask = torch.ones(3, 6, dtype=torch.bool)
        lmask[:, 0] = False
        weights = torch.rand(3, 6, generator=gen, dtype=torch.float64)
        errors["masked_log_softmax"] = grad_check(
            lambda: (masked_log_softmax(logits, lmask).masked_fill(~lmask, 0.0) * weights).sum(), [logits])

        worst = max(errors.values())
        if worst >= GRAD_TOL:
            bad = [name for name, err in errors.items() if err >= GRAD_TOL]
            raise AssertionError(f"算子梯度误差超限: {bad}, 最大 {worst:.3e}")
        return f"max rel err {worst:.3e}"

    def check_reinforce(self) -> str:
        """微型策略上 REINFORCE 替代损失的反向梯度与中心差分一致"""
        policy = CETSPPolicy(PolicyConfig(**MICRO_POLICY))
        dinsts = [discretize(inst, policy.config.gamma) for inst in self._gen(5, 2)]
        traj = policy.rollout(dinsts, DecodeMode.SAMPLE, generator=torch_generator(self.seed))
        actions = [traj.state(r).actions() for r in range(traj.env.rows)]
        rewards = traj.grouped_rewards().detach()

        def surrogate() -> torch.Tensor:
            forced = policy.rollout(dinsts, DecodeMode.GREEDY, actions=actions)
            return reinforce_loss(forced.grouped_log_probs(), rewards)

        err = grad_check(surrogate, policy.params, h=1e-4, max_coords=200, seed=self.seed)
        if err >= GRAD_TOL:
            raise AssertionError(f"REINFORCE 梯度误差 {err:.3e} >= {GRAD_TOL}")
        return f"max rel err {err:.3e}"

    # ==================== 基准一致性 ====================

    def check_env_oracle(self) -> str:
        """随机 (n=4, γ=4) 实例上：rollout 长度等于几何重算，穷举长度不超过任何 rollout"""
        policy = CETSPPolicy(PolicyConfig(**MICRO_POLICY))
        gen = torch_generator(self.seed)
        for offset in range(0, self.oracle_count, 25):
            count = min(25, self.oracle_count - offset)
            dinsts = [discretize(inst, 4) for inst in self._gen(4, count, offset)]
            with torch.no_grad():
                traj = policy.rollout(dinsts, DecodeMode.SAMPLE, generator=gen)
            lengths = traj.lengths()
            for r in range(traj.env.rows):
                state = traj.state(r)
                recomputed = tour_length(state.waypoints, closed=False)
                if abs(recomputed - lengths[r]) > LENGTH_TOL:
                    raise AssertionError(f"第 {offset + r // traj.n_starts} 个实例 rollout 长度与几何重算不符")
            for i, dinst in enumerate(dinsts):
                best = brute_force(dinst).length
                row_lengths = lengths[i * traj.n_starts:(i + 1) * traj.n_starts]
                if best > row_lengths.min() + LENGTH_TOL:
                    raise AssertionError(f"第 {offset + i} 个实例穷举长度 {best:.6f} 大于 rollout 长度")
        return f"{self.oracle_count} instances ok"

    def check_heuristic_replay(self) -> str:
        """基线路线在环境中重放得到相同长度与完整覆盖"""
        for inst in self._gen(8, 20):
            dinst = discretize(inst, 6)
            for route in (nearest_neighbor(dinst), cheapest_insertion(dinst)):
                state = replay(dinst, route.actions())
                if not state.done or not np.all(state.covered):
                    raise AssertionError(f"实例 {inst.id} 的基线路线重放未覆盖全部目标")
                if abs(state.length_so_far - route.length) > LENGTH_TOL:
                    raise AssertionError(f"实例 {inst.id} 的基线路线重放长度不一致")
        return "20 instances ok"

    def check_augmentation(self) -> str:
        """8 种对称变换保持路线长度"""
        for inst in self._gen(10, 100):
            route = nearest_neighbor(discretize(inst, 4))
            base = route.length
            for k in range(8):
                mapped = [apply_symmetry(p, k) for p in route.points]
                if abs(tour_length(mapped) - base) > LENGTH_TOL:
                    raise AssertionError(f"实例 {inst.id} 在变换 {k} 下长度改变")
        return "100 instances x 8 maps ok"

    def check_refinement(self) -> str:
        """航点优化不增加长度"""
        for inst in self._gen(8, 50):
            route = cheapest_insertion(discretize(inst, 8))
            refined = refine_waypoints(route, inst)
            if refined.length > route.length + LENGTH_TOL:
                raise AssertionError(f"实例 {inst.id} 航点优化后长度增加")
        return "50 routes ok"

    # ==================== 执行 ====================

    def checks(self) -> List[tuple]:
        return [
            ("grad.kernels", self.check_kernels),
            ("grad.reinforce", self.check_reinforce),
            ("oracle.env_vs_bruteforce", self.check_env_oracle),
            ("oracle.heuristic_replay", self.check_heuristic_replay),
            ("oracle.augmentation", self.check_augmentation),
            ("oracle.refinement", self.check_refinement),
        ]

    def run(self, only: Optional[List[str]] = None,
            on_result: Optional[Callable[[CheckResult], None]] = None) -> List[CheckResult]:
        """
        执行自检

        Args:
            only: 仅执行名称以这些前缀开头的检查
            on_result: 每项检查完成后的回调（用于即时输出）

        Returns:
            List[CheckResult]: 各项检查结果；异常被记录为失败而不是抛出
        """
        results = []
        for name, check in self.checks():
            if only and not any(name.startswith(prefix) for prefix in only):
                continue
            start = time.perf_counter()
            try:
                detail = check()
                passed = True
            except Exception as e:
                selftest_logger.error(f"自检 {name} 失败: {e}")
                detail, passed = str(e), False
            result = CheckResult(name=name, passed=passed, detail=detail,
                                 seconds=time.perf_counter() - start)
            results.append(result)
            if on_result is not None:
                on_result(result)
        selftest_logger.info(f"自检完成: {sum(r.passed for r in results)}/{len(results)} 通过")
        return results
