"""CETSP 实例与生成配置模型"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from app.models.geometry import Disk, Point


DEFAULT_CONSTANT_RADII: Dict[int, float] = {20: 0.1, 40: 0.05, 60: 0.05, 80: 0.01, 100: 0.01}


class RadiusKind(str, Enum):
    """半径类型枚举"""
    CONSTANT = "constant"
    RANDOM = "random"


class Distribution(str, Enum):
    """目标点空间分布枚举"""
    UNIFORM = "uniform"
    CLUSTERED = "clustered"
    MIXED = "mixed"


@dataclass(frozen=True)
class Instance:
    """
    CETSP 实例

    下标 0 为仓库（半径 0），1..n 为目标圆盘。
    """
    depot: Point
    targets: Tuple[Disk, ...]
    id: str = field(default="instance", compare=False)

    def __post_init__(self):
        if len(self.targets) < 1:
            raise ValueError("实例至少需要一个目标")
        object.__setattr__(self, "targets", tuple(self.targets))

    @property
    def n(self) -> int:
        return len(self.targets)

    @property
    def disks(self) -> Tuple[Disk, ...]:
        """仓库（零半径圆盘）+ 全部目标"""
        return (Disk(self.depot, 0.0),) + self.targets

    def centers(self) -> np.ndarray:
        """(n+1, 2) 中心坐标，第 0 行为仓库"""
        rows = [self.depot.as_tuple()] + [d.center.as_tuple() for d in self.targets]
        return np.asarray(rows, dtype=np.float64)

    def radii(self) -> np.ndarray:
        """(n+1,) 半径，第 0 项为 0"""
        return np.asarray([0.0] + [d.radius for d in self.targets], dtype=np.float64)

    @classmethod
    def from_arrays(cls, centers: np.ndarray, radii: np.ndarray, id: str = "instance") -> "Instance":
        """由 (n+1, 2) 中心和 (n+1,) 半径数组构造实例，第 0 行为仓库"""
        depot = Point(float(centers[0, 0]), float(centers[0, 1]))
        targets = tuple(
            Disk(Point(float(c[0]), float(c[1])), float(r))
            for c, r in zip(centers[1:], radii[1:])
        )
        return cls(depot=depot, targets=targets, id=id)


class RadiusConfig(BaseModel):
    """邻域半径配置"""
    kind: RadiusKind = Field(default=RadiusKind.RANDOM, description="半径类型")
    constant_map: Dict[int, float] = Field(default_factory=lambda: dict(DEFAULT_CONSTANT_RADII),
                                           description="规模 -> 固定半径")
    random_range: Tuple[float, float] = Field(default=(0.0, 0.1), description="随机半径区间 [lo, hi)")

    @field_validator("constant_map")
    @classmethod
    def validate_constant_map(cls, v):
        """固定半径必须为正"""
        if not v:
            raise ValueError("constant_map 不能为空")
        for size, radius in v.items():
            if size < 1 or radius <= 0:
                raise ValueError(f"非法的固定半径映射: {size} -> {radius}")
        return v

    @field_validator("random_range")
    @classmethod
    def validate_random_range(cls, v):
        """随机半径区间需满足 0 <= lo < hi"""
        lo, hi = v
        if not (0 <= lo < hi):
            raise ValueError(f"随机半径区间非法: [{lo}, {hi})")
        return v

    @classmethod
    def preset(cls, name: str) -> "RadiusConfig":
        """按名称构造预设：constant / random / small / large"""
        presets = {
            "constant": dict(kind=RadiusKind.CONSTANT),
            "random": dict(kind=RadiusKind.RANDOM, random_range=(0.0, 0.1)),
            "small": dict(kind=RadiusKind.RANDOM, random_range=(0.01, 0.05)),
            "large": dict(kind=RadiusKind.RANDOM, random_range=(0.05, 0.15)),
        }
        if name not in presets:
            raise ValueError(f"未知的半径预设: {name}")
        return cls(**presets[name])


class GenConfig(BaseModel):
    """实例生成配置"""
    sizes: List[int] = Field(default_factory=lambda: [20], description="问题规模集合 Λ")
    distribution: Distribution = Field(default=Distribution.UNIFORM, description="空间分布")
    radius: RadiusConfig = Field(default_factory=RadiusConfig, description="半径配置")
    seed: int = Field(default=1234, description="随机种子")

    @field_validator("sizes")
    @classmethod
    def validate_sizes(cls, v):
        """规模集合不能为空且均为正"""
        if not v:
            raise ValueError("sizes 不能为空")
        if any(s < 1 for s in v):
            raise ValueError(f"规模必须为正: {v}")
        return v

    @model_validator(mode="after")
    def dedupe_sizes(self):
        self.sizes = sorted(set(self.sizes))
        return self
