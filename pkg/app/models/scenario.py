"""动态场景与执行轨迹模型"""
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Tuple

import numpy as np

from app.models.geometry import Disk, Point
from app.models.instance import Instance


class DynamicPlanner(str, Enum):
    """动态重规划方式"""
    POLICY = "policy"
    CHEAPEST = "cheapest"
    REGRET2 = "regret2"
    GREEDY = "greedy"


@dataclass(frozen=True)
class DynamicTarget:
    """执行过程中出现的目标：在初始计划步数的 fraction 处揭示"""
    disk: Disk
    fraction: float

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"揭示进度必须在 [0, 1] 内: {self.fraction}")
        c = self.disk.center
        if not (0.0 <= c.x <= 1.0 and 0.0 <= c.y <= 1.0):
            raise ValueError(f"动态目标圆心必须在单位正方形内: ({c.x}, {c.y})")


@dataclass(frozen=True)
class DynamicScenario:
    """
    动态 CETSP 场景

    完整实例中静态目标为 1..n，动态目标依次编号 n+1..n+m。
    """
    instance: Instance
    dynamic: Tuple[DynamicTarget, ...] = ()
    name: str = field(default="scenario", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "dynamic", tuple(self.dynamic))

    @property
    def n(self) -> int:
        return self.instance.n

    @property
    def m(self) -> int:
        return len(self.dynamic)

    def dynamic_nodes(self) -> List[int]:
        return list(range(self.n + 1, self.n + self.m + 1))

    def full_instance(self) -> Instance:
        """静态目标 + 动态目标组成的完整实例"""
        return Instance(
            depot=self.instance.depot,
            targets=self.instance.targets + tuple(t.disk for t in self.dynamic),
            id=f"{self.instance.id}+{self.m}",
        )


@dataclass(frozen=True)
class ReplanEvent:
    """一次重规划：在第 step 个航点处揭示 revealed，新的后续计划为 plan"""
    step: int
    at: Point
    revealed: Tuple[int, ...]
    executed: Tuple[Tuple[int, int], ...]
    plan: Tuple[Point, ...]


@dataclass
class ExecutionTrace:
    """
    执行轨迹

    visited 以仓库开始、以仓库结束；nodes 与之逐一对应。
    """
    planner: DynamicPlanner
    visited: List[Point]
    nodes: List[int]
    length: float
    covered: np.ndarray
    events: List[ReplanEvent] = field(default_factory=list)
    initial_length: float = 0.0

    @property
    def replans(self) -> int:
        return len(self.events)

    def covers_all(self) -> bool:
        return bool(np.all(self.covered))
