"""几何基础类型"""
import math
from dataclasses import dataclass
from typing import Tuple


@dataclass(frozen=True)
class Point:
    """平面点（归一化长度单位）"""
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"点坐标必须是有限值: ({self.x}, {self.y})")

    def as_tuple(self) -> Tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class Disk:
    """闭圆盘邻域，仓库的半径恰为 0"""
    center: Point
    radius: float

    def __post_init__(self):
        if not math.isfinite(self.radius) or self.radius < 0:
            raise ValueError(f"半径必须为非负有限值: {self.radius}")
