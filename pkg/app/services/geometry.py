"""
二维几何原语

包含：线段-圆盘相交判定、圆周离散化（PDS）、路径长度计算以及
单位正方形的 8 种旋转/翻转变换。其他模块的测试均以本模块为基准。
"""
import math
from typing import Callable, List, Sequence, Tuple, Union

import numpy as np

from app.models.geometry import Disk, Point
from app.utils.errors import ConfigurationError

# 相切判定容差（闭圆盘）
TANGENCY_TOL = 1e-9

PointLike = Union[Point, Tuple[float, float], Sequence[float]]


def _xy(p: PointLike) -> Tuple[float, float]:
    if isinstance(p, Point):
        return p.x, p.y
    return float(p[0]), float(p[1])


def segment_point_distance(a: PointLike, b: PointLike, c: PointLike) -> float:
    """点 c 到线段 ab 的最短距离；a == b 时退化为点距"""
    ax, ay = _xy(a)
    bx, by = _xy(b)
    cx, cy = _xy(c)
    dx, dy = bx - ax, by - ay
    seg_len2 = dx * dx + dy * dy
    if seg_len2 == 0.0:
        return math.hypot(cx - ax, cy - ay)
    t = ((cx - ax) * dx + (cy - ay) * dy) / seg_len2
    t = min(1.0, max(0.0, t))
    return math.hypot(ax + t * dx - cx, ay + t * dy - cy)


def closest_point_on_segment(a: PointLike, b: PointLike, c: PointLike) -> Tuple[float, float]:
    """线段 ab 上距离 c 最近的点"""
    ax, ay = _xy(a)
    bx, by = _xy(b)
    cx, cy = _xy(c)
    dx, dy = bx - ax, by - ay
    seg_len2 = dx * dx + dy * dy
    if seg_len2 == 0.0:
        return ax, ay
    t = min(1.0, max(0.0, ((cx - ax) * dx + (cy - ay) * dy) / seg_len2))
    return ax + t * dx, ay + t * dy


def segment_disk_intersects(a: PointLike, b: PointLike, d: Disk) -> bool:
    """
    判断线段 ab 是否与闭圆盘 d 相交（相切也算）

    Args:
        a: 线段起点
        b: 线段终点（允许与 a 相同）
        d: 圆盘

    Returns:
        bool: 线段到圆心的最短距离 <= 半径（容差 1e-9）
    """
    return segment_point_distance(a, b, d.center) <= d.radius + TANGENCY_TOL


def segments_disks_intersect(starts: np.ndarray, ends: np.ndarray,
                             centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """
    批量线段-圆盘相交判定

    Args:
        starts: (E, 2) 线段起点
        ends: (E, 2) 线段终点
        centers: (K, 2) 圆心
        radii: (K,) 半径

    Returns:
        np.ndarray: (E, K) 布尔矩阵
    """
    starts = np.asarray(starts, dtype=np.float64).reshape(-1, 2)
    ends = np.asarray(ends, dtype=np.float64).reshape(-1, 2)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    radii = np.asarray(radii, dtype=np.float64).reshape(-1)

    seg = ends - starts                                   # (E, 2)
    seg_len2 = np.einsum("ij,ij->i", seg, seg)            # (E,)
    rel = centers[None, :, :] - starts[:, None, :]        # (E, K, 2)
    proj = np.einsum("ekj,ej->ek", rel, seg)              # (E, K)
    safe_len2 = np.where(seg_len2 > 0.0, seg_len2, 1.0)
    t = np.clip(proj / safe_len2[:, None], 0.0, 1.0)
    t = np.where(seg_len2[:, None] > 0.0, t, 0.0)
    closest = starts[:, None, :] + t[..., None] * seg[:, None, :]
    dist = np.linalg.norm(closest - centers[None, :, :], axis=-1)
    return dist <= radii[None, :] + TANGENCY_TOL


def rowwise_segments_disks_intersect(starts: np.ndarray, ends: np.ndarray,
                                     centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """
    逐行线段-圆盘相交判定：第 r 条线段只与第 r 组圆盘比较

    Args:
        starts: (R, 2)
        ends: (R, 2)
        centers: (R, K, 2)
        radii: (R, K)

    Returns:
        np.ndarray: (R, K) 布尔矩阵
    """
    seg = ends - starts                                   # (R, 2)
    seg_len2 = np.einsum("rj,rj->r", seg, seg)
    rel = centers - starts[:, None, :]                    # (R, K, 2)
    proj = np.einsum("rkj,rj->rk", rel, seg)
    safe_len2 = np.where(seg_len2 > 0.0, seg_len2, 1.0)
    t = np.clip(proj / safe_len2[:, None], 0.0, 1.0)
    t = np.where(seg_len2[:, None] > 0.0, t, 0.0)
    closest = starts[:, None, :] + t[..., None] * seg[:, None, :]
    dist = np.linalg.norm(closest - centers, axis=-1)
    return dist <= radii + TANGENCY_TOL


def pds_points(d: Disk, gamma: int, phase: float = 0.0) -> List[Point]:
    """
    圆周离散化：在圆周上等间隔放置 gamma 个候选航点

    Args:
        d: 圆盘
        gamma: 离散点数量（>= 1）
        phase: 起始角（弧度）

    Returns:
        List[Point]: 第 k 个点位于角度 phase + 2πk/gamma
    """
    if gamma < 1:
        raise ConfigurationError(f"gamma 必须 >= 1，当前为 {gamma}")
    cx, cy, r = d.center.x, d.center.y, d.radius
    points = []
    for k in range(gamma):
        angle = phase + 2.0 * math.pi * k / gamma
        points.append(Point(cx + r * math.cos(angle), cy + r * math.sin(angle)))
    return points


def pds_array(centers: np.ndarray, radii: np.ndarray, gamma: int, phase: float = 0.0) -> np.ndarray:
    """向量化 PDS：返回 (K, gamma, 2)，与 pds_points 逐点一致"""
    if gamma < 1:
        raise ConfigurationError(f"gamma 必须 >= 1，当前为 {gamma}")
    angles = phase + 2.0 * np.pi * np.arange(gamma) / gamma
    offsets = np.stack([np.cos(angles), np.sin(angles)], axis=-1)          # (gamma, 2)
    return centers[:, None, :] + radii[:, None, None] * offsets[None, :, :]


def tour_length(waypoints: Sequence[PointLike], closed: bool = True) -> float:
    """
    计算航点序列的路径长度

    Args:
        waypoints: 有序航点（至少 1 个）
        closed: 是否计入末点回到首点的闭合边

    Returns:
        float: 边长之和；单个航点返回 0
    """
    if len(waypoints) < 1:
        raise ConfigurationError("路径至少需要一个航点")
    pts = [_xy(p) for p in waypoints]
    total = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        total += math.hypot(x1 - x0, y1 - y0)
    if closed and len(pts) > 1:
        (xl, yl), (xf, yf) = pts[-1], pts[0]
        total += math.hypot(xf - xl, yf - yl)
    return total


# 单位正方形的 8 种对称变换（二面体群 D4），第 0 个为恒等变换
SYMMETRY_MAPS: Tuple[Callable[[float, float], Tuple[float, float]], ...] = (
    lambda x, y: (x, y),
    lambda x, y: (y, x),
    lambda x, y: (x, 1.0 - y),
    lambda x, y: (y, 1.0 - x),
    lambda x, y: (1.0 - x, y),
    lambda x, y: (1.0 - y, x),
    lambda x, y: (1.0 - x, 1.0 - y),
    lambda x, y: (1.0 - y, 1.0 - x),
)

# 各变换的逆变换下标
SYMMETRY_INVERSE: Tuple[int, ...] = (0, 1, 2, 5, 4, 3, 6, 7)


def apply_symmetry(p: PointLike, k: int) -> Point:
    """对点施加第 k 个对称变换"""
    x, y = _xy(p)
    return Point(*SYMMETRY_MAPS[k](x, y))


def inverse_symmetry(k: int) -> int:
    """第 k 个变换的逆变换下标"""
    return SYMMETRY_INVERSE[k]
