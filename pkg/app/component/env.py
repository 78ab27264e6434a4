"""
CETSP 马尔可夫决策环境

状态 = 当前部分解（节点序列、航点序列、已覆盖集合、累计长度）。
动作 = (节点, 航点下标)。每条边经过的圆盘都记为已覆盖（穿越覆盖）；
所有目标覆盖前仓库被屏蔽，选择仓库即闭合路径并结束。
"""
import math
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from app.models.geometry import Point
from app.models.instance import Instance
from app.services.geometry import (
    pds_array,
    rowwise_segments_disks_intersect,
    segments_disks_intersect,
)
from app.utils.errors import ConfigurationError, InfeasibleActionError

env_logger = logger.bind(component="env")


@dataclass(frozen=True, eq=False)
class DiscretizedInstance:
    """
    离散化实例

    waypoints[i, k] 为目标 i 圆周上的第 k 个候选航点，形状 (n+1, γ, 2)；
    第 0 行全部为仓库坐标 o_0。
    """
    base: Instance
    gamma: int
    waypoints: np.ndarray
    phase: float = 0.0
    centers: np.ndarray = field(default=None, repr=False)
    radii: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.centers is None:
            object.__setattr__(self, "centers", self.base.centers())
        if self.radii is None:
            object.__setattr__(self, "radii", self.base.radii())

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def depot(self) -> Point:
        return self.base.depot

    def point(self, node: int, waypoint_index: int) -> Point:
        """节点 node 的第 waypoint_index 个航点；仓库恒为 o_0"""
        if node == 0:
            return self.base.depot
        x, y = self.waypoints[node, waypoint_index]
        return Point(float(x), float(y))


def discretize(inst: Instance, gamma: int, phase: float = 0.0) -> DiscretizedInstance:
    """对实例做圆周离散化（PDS）"""
    if gamma < 1:
        raise ConfigurationError(f"gamma 必须 >= 1，当前为 {gamma}")
    centers = inst.centers()
    radii = inst.radii()
    waypoints = pds_array(centers, radii, gamma, phase)
    waypoints[0, :, :] = centers[0]
    return DiscretizedInstance(base=inst, gamma=gamma, waypoints=waypoints, phase=phase,
                               centers=centers, radii=radii)


class Action(NamedTuple):
    """动作：访问节点 node，停在其第 waypoint_index 个候选航点"""
    node: int
    waypoint_index: int


@dataclass(frozen=True, eq=False)
class EnvState:
    """单条轨迹的环境状态"""
    nodes: Tuple[int, ...]
    waypoints: Tuple[Point, ...]
    waypoint_indices: Tuple[int, ...]
    covered: np.ndarray
    length_so_far: float = 0.0
    done: bool = False
    forced_second: Optional[int] = None
    duplicate_start: bool = False

    @property
    def last_node(self) -> int:
        return self.nodes[-1]

    @property
    def last_point(self) -> Point:
        return self.waypoints[-1]

    def actions(self) -> List[Action]:
        """把状态还原为动作序列（不含起始仓库）"""
        return [Action(n, k) for n, k in zip(self.nodes[1:], self.waypoint_indices[1:])]


def _initial_coverage(dinst: DiscretizedInstance) -> np.ndarray:
    depot = dinst.centers[0:1]
    covered = segments_disks_intersect(depot, depot, dinst.centers, dinst.radii)[0].copy()
    covered[0] = True
    return covered


def reset(dinst: DiscretizedInstance, n_starts: int) -> List[EnvState]:
    """
    重置环境，返回 n_starts 条多起点轨迹的初始状态

    每条轨迹记录一个强制的第二节点；包含仓库的圆盘在重置时即视为覆盖。
    未覆盖目标少于 n_starts 时，多出的轨迹循环复用并标记 duplicate_start；
    没有未覆盖目标时强制节点为仓库。

    Raises:
        ConfigurationError: n_starts 不在 [1, n] 内
    """
    if n_starts < 1 or n_starts > dinst.n:
        raise ConfigurationError(f"n_starts 必须在 [1, {dinst.n}] 内，当前为 {n_starts}")

    covered = _initial_coverage(dinst)
    uncovered = [i for i in range(1, dinst.n + 1) if not covered[i]]
    states = []
    for j in range(n_starts):
        if uncovered:
            forced = uncovered[j % len(uncovered)]
            duplicate = j >= len(uncovered)
        else:
            forced = 0
            duplicate = j >= 1
        states.append(EnvState(
            nodes=(0,),
            waypoints=(dinst.depot,),
            waypoint_indices=(0,),
            covered=covered.copy(),
            forced_second=forced,
            duplicate_start=duplicate,
        ))
    return states


def feasible_mask(state: EnvState) -> np.ndarray:
    """
    可行节点掩码（长度 n+1）

    目标未覆盖即可行；仓库仅在全部目标覆盖后可行（此时是唯一可行节点）。

    Raises:
        InfeasibleActionError: 状态已结束
    """
    if state.done:
        raise InfeasibleActionError("轨迹已结束，无法计算可行掩码")
    mask = ~state.covered
    all_covered = bool(np.all(state.covered[1:]))
    mask[0] = all_covered
    return mask


def step(state: EnvState, action: Action, dinst: DiscretizedInstance) -> EnvState:
    """
    执行一步转移，返回新状态

    Raises:
        InfeasibleActionError: 节点不可行、航点下标越界或状态已结束
    """
    node, k = int(action[0]), int(action[1])
    if state.done:
        raise InfeasibleActionError("轨迹已结束，不能继续执行动作")
    if not 0 <= node <= dinst.n:
        raise InfeasibleActionError(f"节点下标越界: {node}")
    if not 0 <= k < dinst.gamma:
        raise InfeasibleActionError(f"航点下标越界: {k} (gamma={dinst.gamma})")
    mask = feasible_mask(state)
    if not mask[node]:
        raise InfeasibleActionError(f"节点 {node} 当前不可行")

    if node == 0:
        k = 0
    prev = state.last_point
    new = dinst.point(node, k)
    hits = segments_disks_intersect(
        np.array([[prev.x, prev.y]]), np.array([[new.x, new.y]]), dinst.centers, dinst.radii
    )[0]
    covered = state.covered | hits
    covered[node] = True

    return replace(
        state,
        nodes=state.nodes + (node,),
        waypoints=state.waypoints + (new,),
        waypoint_indices=state.waypoint_indices + (k,),
        covered=covered,
        length_so_far=state.length_so_far + math.hypot(new.x - prev.x, new.y - prev.y),
        done=node == 0,
    )


def reward(state: EnvState) -> float:
    """奖励 = 负的路径总长；状态未结束时报错"""
    if not state.done:
        raise InfeasibleActionError("轨迹尚未结束，奖励未定义")
    return -state.length_so_far


def replay(dinst: DiscretizedInstance, actions: Sequence[Tuple[int, int]]) -> EnvState:
    """从仓库开始重放动作序列，返回最终状态（用于校验外部构造的路线）"""
    state = reset(dinst, 1)[0]
    for action in actions:
        state = step(state, Action(*action), dinst)
    return state


class BatchEnv:
    """
    批量环境

    行 r = 实例 r // n_starts 的第 r % n_starts 条轨迹。已结束的轨迹以零长度的
    仓库自环补齐，使所有轨迹共享步数下标。
    """

    def __init__(self, dinsts: Sequence[DiscretizedInstance], n_starts: int):
        if not dinsts:
            raise ConfigurationError("BatchEnv 至少需要一个实例")
        n, gamma = dinsts[0].n, dinsts[0].gamma
        if any(d.n != n or d.gamma != gamma for d in dinsts):
            raise ConfigurationError("同一批次内实例规模与 gamma 必须一致")

        self.dinsts = list(dinsts)
        self.n = n
        self.gamma = gamma
        self.n_starts = n_starts
        self.rows = len(dinsts) * n_starts

        rep = lambda arr: np.repeat(np.stack(arr), n_starts, axis=0)
        self.waypoints = rep([d.waypoints for d in dinsts])        # (R, n+1, γ, 2)
        self.centers = rep([d.centers for d in dinsts])            # (R, n+1, 2)
        self.radii = rep([d.radii for d in dinsts])                # (R, n+1)

        initial = [s for d in dinsts for s in reset(d, n_starts)]
        self.covered = np.stack([s.covered for s in initial])     # (R, n+1)
        self.forced_second = np.array([s.forced_second for s in initial], dtype=np.int64)
        self.duplicate_start = np.array([s.duplicate_start for s in initial], dtype=bool)

        self.last_point = self.centers[:, 0, :].copy()
        self.length = np.zeros(self.rows, dtype=np.float64)
        self.done = np.zeros(self.rows, dtype=bool)
        self.nodes: List[List[int]] = [[0] for _ in range(self.rows)]
        self.point_indices: List[List[int]] = [[0] for _ in range(self.rows)]
        self.steps = 0

    @property
    def all_done(self) -> bool:
        return bool(self.done.all())

    def mask(self) -> np.ndarray:
        """(R, n+1) 可行掩码；已结束的行只允许仓库（补齐用）"""
        mask = ~self.covered
        all_covered = self.covered[:, 1:].all(axis=1)
        mask[:, 0] = all_covered | self.done
        mask[self.done, 1:] = False
        return mask

    def step(self, nodes: np.ndarray, waypoint_indices: np.ndarray) -> np.ndarray:
        """
        批量执行一步

        Args:
            nodes: (R,) 节点
            waypoint_indices: (R,) 航点下标

        Returns:
            np.ndarray: (R,) 本步之前仍在进行的行
        """
        nodes = np.asarray(nodes, dtype=np.int64)
        waypoint_indices = np.asarray(waypoint_indices, dtype=np.int64)
        active = ~self.done
        mask = self.mask()
        rows = np.arange(self.rows)
        if np.any(active & ~mask[rows, nodes]):
            bad = int(np.flatnonzero(active & ~mask[rows, nodes])[0])
            raise InfeasibleActionError(f"第 {bad} 行选择了不可行节点 {int(nodes[bad])}")
        if np.any(active & ((waypoint_indices < 0) | (waypoint_indices >= self.gamma))):
            raise InfeasibleActionError(f"航点下标越界 (gamma={self.gamma})")

        nodes = np.where(active, nodes, 0)
        waypoint_indices = np.where(nodes == 0, 0, waypoint_indices)
        new_points = self.waypoints[rows, nodes, waypoint_indices]
        new_points = np.where(nodes[:, None] == 0, self.centers[:, 0, :], new_points)

        hits = rowwise_segments_disks_intersect(self.last_point, new_points, self.centers, self.radii)
        self.covered |= hits & active[:, None]
        self.covered[rows[active], nodes[active]] = True

        edge = np.hypot(new_points[:, 0] - self.last_point[:, 0], new_points[:, 1] - self.last_point[:, 1])
        self.length = self.length + np.where(active, edge, 0.0)
        self.last_point = np.where(active[:, None], new_points, self.last_point)
        for r in np.flatnonzero(active):
            self.nodes[r].append(int(nodes[r]))
            self.point_indices[r].append(int(waypoint_indices[r]))
        self.done = self.done | (active & (nodes == 0))
        self.steps += 1
        return active

    def rewards(self) -> np.ndarray:
        """(R,) 奖励；存在未结束的行时报错"""
        if not self.all_done:
            raise InfeasibleActionError("存在未结束的轨迹，奖励未定义")
        return -self.length

    def second_nodes(self) -> np.ndarray:
        """(R,) 每行实际访问的第二个节点"""
        return np.array([nodes[1] if len(nodes) > 1 else 0 for nodes in self.nodes], dtype=np.int64)

    def to_state(self, r: int) -> EnvState:
        """把第 r 行转换为 EnvState"""
        dinst = self.dinsts[r // self.n_starts]
        return EnvState(
            nodes=tuple(self.nodes[r]),
            waypoints=tuple(dinst.point(n, k) for n, k in zip(self.nodes[r], self.point_indices[r])),
            waypoint_indices=tuple(self.point_indices[r]),
            covered=self.covered[r].copy(),
            length_so_far=float(self.length[r]),
            done=bool(self.done[r]),
            forced_second=int(self.forced_second[r]),
            duplicate_start=bool(self.duplicate_start[r]),
        )
