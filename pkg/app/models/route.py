"""路线模型"""
from dataclasses import dataclass
from typing import List, Optional, Tuple

from app.models.geometry import Point
from app.services.geometry import tour_length


@dataclass(frozen=True)
class Route:
    """
    由航点序列唯一确定的路线

    nodes[0] 为仓库 0，points[0] 为仓库坐标；闭合路线不重复存储终点仓库。
    waypoint_indices 记录每个停靠点在 PDS 中的下标，连续优化后置为 None。
    frozen 为已执行、不可再修改的前缀长度（停靠点个数）。
    """
    nodes: Tuple[int, ...]
    points: Tuple[Point, ...]
    waypoint_indices: Optional[Tuple[int, ...]] = None
    closed: bool = True
    frozen: int = 1

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "points", tuple(self.points))
        if self.waypoint_indices is not None:
            object.__setattr__(self, "waypoint_indices", tuple(self.waypoint_indices))
            if len(self.waypoint_indices) != len(self.nodes):
                raise ValueError("waypoint_indices 与 nodes 长度不一致")
        if len(self.nodes) != len(self.points):
            raise ValueError(f"节点数 {len(self.nodes)} 与航点数 {len(self.points)} 不一致")
        if not self.nodes:
            raise ValueError("路线至少包含起点")

    @property
    def length(self) -> float:
        return tour_length(self.points, closed=self.closed)

    @property
    def stops(self) -> int:
        return len(self.nodes)

    def actions(self) -> List[Tuple[int, int]]:
        """转换为环境动作序列（闭合路线追加返回仓库动作）"""
        if self.waypoint_indices is None:
            raise ValueError("路线航点已连续优化，无法转换为离散动作")
        actions = list(zip(self.nodes[1:], self.waypoint_indices[1:]))
        if self.closed:
            actions.append((0, 0))
        return actions
