"""
经典基线与校验基准

最近邻构造、最廉价/遗憾值/贪心插入、航点坐标下降优化以及小规模穷举。
插入类方法都在 PDS 航点上搜索，输出经 finalize_route 修整后可以在环境中逐步重放。
"""
import math
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from app.component.env import DiscretizedInstance, Action, reset, step
from app.models.geometry import Disk, Point
from app.models.instance import Instance
from app.models.route import Route
from app.services.geometry import (
    closest_point_on_segment,
    segment_point_distance,
    segments_disks_intersect,
    tour_length,
)
from app.utils.errors import ConfigurationError

heuristic_logger = logger.bind(component="heuristics")

# 穷举规模上限
BRUTE_FORCE_MAX_N = 6
BRUTE_FORCE_MAX_GAMMA = 5

GOLDEN_RATIO = (math.sqrt(5.0) - 1.0) / 2.0
REFINE_SEEDS = 8
REFINE_ANGLE_TOL = 1e-10
REFINE_SWEEP_TOL = 1e-9

Stop = Tuple[int, int]


class InsertionMode(str, Enum):
    """动态插入策略"""
    CHEAPEST = "cheapest"
    REGRET2 = "regret2"
    GREEDY = "greedy"


# ==================== 路线辅助 ====================

def route_from_stops(dinst: DiscretizedInstance, stops: Sequence[Stop], frozen: int = 1) -> Route:
    """由停靠点 (节点, 航点下标) 构造闭合路线，仓库在最前"""
    nodes = (0,) + tuple(node for node, _ in stops)
    points = (dinst.depot,) + tuple(dinst.point(node, k) for node, k in stops)
    indices = (0,) + tuple(k for _, k in stops)
    return Route(nodes=nodes, points=points, waypoint_indices=indices, closed=True, frozen=frozen)


def stops_of(route: Route) -> List[Stop]:
    if route.waypoint_indices is None:
        raise ConfigurationError("路线航点已连续优化，不能再做离散插入")
    return list(zip(route.nodes[1:], route.waypoint_indices[1:]))


def _stop_points(dinst: DiscretizedInstance, stops: Sequence[Stop]) -> np.ndarray:
    """(len+1, 2) 路径点：仓库 + 各停靠点"""
    pts = [dinst.centers[0]] + [dinst.waypoints[node, k] for node, k in stops]
    return np.asarray(pts, dtype=np.float64)


def path_coverage(dinst: DiscretizedInstance, stops: Sequence[Stop]) -> np.ndarray:
    """
    开放路径（仓库 → 各停靠点，不含返回仓库的闭合边）覆盖的节点

    与环境一致：仓库点所在圆盘在出发时即被覆盖。
    """
    pts = _stop_points(dinst, stops)
    depot = pts[0:1]
    covered = segments_disks_intersect(depot, depot, dinst.centers, dinst.radii)[0].copy()
    if len(pts) > 1:
        hits = segments_disks_intersect(pts[:-1], pts[1:], dinst.centers, dinst.radii)
        covered |= hits.any(axis=0)
    for node, _ in stops:
        covered[node] = True
    covered[0] = True
    return covered


def insertion_costs(dinst: DiscretizedInstance, stops: Sequence[Stop], target: int,
                    first_position: int = 0) -> np.ndarray:
    """
    目标 target 在每个位置、每个航点上的插入增量

    位置 p 表示插入后成为第 p 个停靠点（p = len(stops) 即插在返回仓库之前）。

    Returns:
        np.ndarray: (P, γ)，第 i 行对应位置 first_position + i
    """
    pts = _stop_points(dinst, stops)
    closed = np.vstack([pts, pts[0:1]])
    prev = closed[first_position:len(stops) + 1]                         # (P, 2)
    nxt = closed[first_position + 1:len(stops) + 2]                       # (P, 2)
    cand = dinst.waypoints[target]                                        # (γ, 2)
    d_prev = np.linalg.norm(cand[None, :, :] - prev[:, None, :], axis=-1)
    d_next = np.linalg.norm(nxt[:, None, :] - cand[None, :, :], axis=-1)
    d_skip = np.linalg.norm(nxt - prev, axis=-1)
    return d_prev + d_next - d_skip[:, None]


def best_insertion(dinst: DiscretizedInstance, stops: Sequence[Stop], target: int,
                   first_position: int = 0) -> Tuple[float, int, int]:
    """
    最小插入增量

    Returns:
        Tuple[float, int, int]: (增量, 位置, 航点下标)；并列时取较小位置、较小航点
    """
    costs = insertion_costs(dinst, stops, target, first_position)
    flat = int(np.argmin(costs))
    pos, k = divmod(flat, costs.shape[1])
    return float(costs[pos, k]), first_position + pos, k


def _regret(costs: np.ndarray) -> float:
    per_position = np.sort(costs.min(axis=1))
    if len(per_position) < 2:
        return math.inf
    return float(per_position[1] - per_position[0])


def finalize_route(dinst: DiscretizedInstance, stops: Sequence[Stop], frozen_stops: int = 0,
                   required: Optional[np.ndarray] = None) -> List[Stop]:
    """
    修整路线，使其满足环境语义

    删除到达前已被覆盖的停靠点（仅限冻结前缀之后），再把因此失去覆盖的
    必需目标以最廉价插入补回，直到稳定。

    Args:
        dinst: 离散化实例
        stops: 停靠点序列（不含仓库）
        frozen_stops: 不可修改的前缀停靠点个数
        required: (n+1,) 必需覆盖的节点，默认全部目标
    """
    stops = list(stops)
    if required is None:
        required = np.ones(dinst.n + 1, dtype=bool)
    required = required.copy()
    required[0] = False
    pts_depot = dinst.centers[0:1]
    start_cover = segments_disks_intersect(pts_depot, pts_depot, dinst.centers, dinst.radii)[0]

    guard = 4 * (dinst.n + 1) * (len(stops) + dinst.n + 1)
    for _ in range(guard):
        covered = start_cover.copy()
        prev = dinst.centers[0]
        redundant = None
        for i, (node, k) in enumerate(stops):
            if covered[node] and i >= frozen_stops:
                redundant = i
                break
            point = dinst.waypoints[node, k]
            covered |= segments_disks_intersect(prev[None, :], point[None, :], dinst.centers, dinst.radii)[0]
            covered[node] = True
            prev = point
        if redundant is not None:
            del stops[redundant]
            continue

        missing = [j for j in range(1, dinst.n + 1) if required[j] and not covered[j]]
        if not missing:
            return stops
        best = None
        for j in missing:
            cost, pos, k = best_insertion(dinst, stops, j, frozen_stops)
            if best is None or cost < best[0]:
                best = (cost, pos, k, j)
        _, pos, k, j = best
        stops.insert(pos, (j, k))
    raise ConfigurationError(f"路线修整未收敛（实例 {dinst.base.id}）")


# ==================== 构造与插入 ====================

def nearest_neighbor(dinst: DiscretizedInstance) -> Route:
    """
    最近邻构造

    每次前往圆心最近的未覆盖目标，停在其距当前位置最近的 PDS 航点；
    途经覆盖的目标直接跳过，最后返回仓库。
    """
    state = reset(dinst, 1)[0]
    while not np.all(state.covered[1:]):
        here = np.array(state.last_point.as_tuple())
        uncovered = np.flatnonzero(~state.covered[1:]) + 1
        dist = np.linalg.norm(dinst.centers[uncovered] - here, axis=1)
        target = int(uncovered[int(np.argmin(dist))])
        k = int(np.argmin(np.linalg.norm(dinst.waypoints[target] - here, axis=1)))
        state = step(state, Action(target, k), dinst)
    stops = list(zip(state.nodes[1:], state.waypoint_indices[1:]))
    return route_from_stops(dinst, stops)


def insert_targets(dinst: DiscretizedInstance, stops: List[Stop], targets: Sequence[int],
                    mode: InsertionMode, frozen_stops: int) -> List[Stop]:
    pending = list(targets)
    while pending:
        covered = path_coverage(dinst, stops)
        pending = [j for j in pending if not covered[j]]
        if not pending:
            break
        if mode == InsertionMode.GREEDY:
            chosen = pending[0]
            _, pos, k = best_insertion(dinst, stops, chosen, frozen_stops)
        elif mode == InsertionMode.REGRET2:
            best = None
            for j in sorted(pending):
                costs = insertion_costs(dinst, stops, j, frozen_stops)
                regret = _regret(costs)
                if best is None or regret > best[0]:
                    best = (regret, j)
            chosen = best[1]
            _, pos, k = best_insertion(dinst, stops, chosen, frozen_stops)
        else:
            best = None
            for j in sorted(pending):
                cost, p, kk = best_insertion(dinst, stops, j, frozen_stops)
                if best is None or cost < best[0]:
                    best = (cost, p, kk, j)
            _, pos, k, chosen = best
        stops.insert(pos, (chosen, k))
        pending.remove(chosen)
    return stops


def cheapest_insertion(dinst: DiscretizedInstance, partial: Optional[Route] = None) -> Route:
    """
    最廉价插入（CI）

    反复选择插入增量最小的未覆盖目标（并列取较小节点、较小位置、较小航点），
    已被路径穿越覆盖的目标直接跳过。
    """
    stops = stops_of(partial) if partial is not None else []
    frozen = (partial.frozen - 1) if partial is not None else 0
    stops = insert_targets(dinst, stops, list(range(1, dinst.n + 1)), InsertionMode.CHEAPEST, frozen)
    stops = finalize_route(dinst, stops, frozen)
    return route_from_stops(dinst, stops, frozen=frozen + 1)


def insert_dynamic(dinst: DiscretizedInstance, route: Route, new_targets: Sequence[int],
                   mode: InsertionMode = InsertionMode.CHEAPEST,
                   required: Optional[np.ndarray] = None) -> Route:
    """
    向已有路线插入新目标，冻结前缀保持不变

    cheapest: 每次插入增量最小的目标；regret2: 每次插入（次优位置代价 − 最优位置代价）
    最大的目标；greedy: 按到达顺序逐个插入到其最优位置。

    Args:
        dinst: 包含新目标的离散化实例
        route: 当前路线（route.frozen 为冻结前缀长度，含仓库）
        new_targets: 新目标节点下标
        mode: 插入策略
        required: 修整时必须覆盖的节点，默认全部目标

    Raises:
        ConfigurationError: 新目标已在路线中
    """
    mode = InsertionMode(mode)
    stops = stops_of(route)
    existing = set(route.nodes)
    clash = [j for j in new_targets if j in existing]
    if clash:
        raise ConfigurationError(f"新目标与路线已有节点冲突: {clash}")
    frozen = route.frozen - 1
    stops = insert_targets(dinst, stops, list(new_targets), mode, frozen)
    stops = finalize_route(dinst, stops, frozen, required)
    return route_from_stops(dinst, stops, frozen=route.frozen)


# ==================== 航点优化 ====================

def _detour(a: np.ndarray, y: np.ndarray, b: Optional[np.ndarray]) -> float:
    cost = math.hypot(y[0] - a[0], y[1] - a[1])
    if b is not None:
        cost += math.hypot(b[0] - y[0], b[1] - y[1])
    return cost


def _best_on_disk(a: np.ndarray, b: Optional[np.ndarray], disk: Disk) -> np.ndarray:
    """圆盘上使 ‖a−y‖+‖y−b‖ 最小的点"""
    c = np.array(disk.center.as_tuple())
    r = disk.radius
    if b is None:
        b = a
    if segment_point_distance(a, b, c) <= r:
        return np.array(closest_point_on_segment(a, b, c))
    if r == 0.0:
        return c

    def boundary(theta: float) -> np.ndarray:
        return c + r * np.array([math.cos(theta), math.sin(theta)])

    f = lambda theta: _detour(a, boundary(theta), b)
    seeds = [2.0 * math.pi * i / REFINE_SEEDS for i in range(REFINE_SEEDS)]
    center = min(seeds, key=f)
    lo, hi = center - math.pi / 4.0, center + math.pi / 4.0
    x1 = hi - GOLDEN_RATIO * (hi - lo)
    x2 = lo + GOLDEN_RATIO * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > REFINE_ANGLE_TOL:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - GOLDEN_RATIO * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + GOLDEN_RATIO * (hi - lo)
            f2 = f(x2)
    best = min((center, (lo + hi) / 2.0), key=f)
    return boundary(best)


def _closed_coverage(points: np.ndarray, centers: np.ndarray, radii: np.ndarray, closed: bool) -> np.ndarray:
    ends = np.vstack([points[1:], points[0:1]]) if closed else points[1:]
    starts = points if closed else points[:-1]
    if len(starts) == 0:
        starts = ends = points[0:1]
    return segments_disks_intersect(starts, ends, centers, radii).any(axis=0)


def refine_waypoints(route: Route, inst: Instance) -> Route:
    """
    坐标下降优化航点

    固定访问顺序，逐个把停靠点替换为圆盘内使相邻两段之和最小的点：
    线段与圆盘相交时取线段上离圆心最近的点，否则在圆周上用 8 个初值加
    黄金分割搜索角度。丢失覆盖的移动被拒绝；一轮改进小于 1e-9 时停止。
    路线长度单调不增。
    """
    points = np.asarray([p.as_tuple() for p in route.points], dtype=np.float64)
    centers, radii = inst.centers(), inst.radii()
    disks = inst.disks
    must_cover = _closed_coverage(points, centers, radii, route.closed)
    first = max(1, route.frozen)
    last = len(points) - 1

    length = tour_length(points.tolist(), closed=route.closed)
    for _ in range(10000):
        start_length = length
        for i in range(first, last + 1):
            a = points[i - 1]
            if i < last:
                b = points[i + 1]
            else:
                b = points[0] if route.closed else None
            old_cost = _detour(a, points[i], b)
            candidate = _best_on_disk(a, b, disks[route.nodes[i]])
            if not _detour(a, candidate, b) < old_cost:
                continue
            trial = points.copy()
            trial[i] = candidate
            coverage = _closed_coverage(trial, centers, radii, route.closed)
            if np.any(must_cover & ~coverage):
                continue
            trial_length = tour_length(trial.tolist(), closed=route.closed)
            if trial_length < length:
                points, length = trial, trial_length
        if start_length - length < REFINE_SWEEP_TOL:
            break

    return Route(
        nodes=route.nodes,
        points=tuple(Point(float(x), float(y)) for x, y in points),
        waypoint_indices=None,
        closed=route.closed,
        frozen=route.frozen,
    )


# ==================== 穷举 ====================

def brute_force(dinst: DiscretizedInstance) -> Route:
    """
    离散化实例上的穷举最优解（分支定界）

    按 (节点, 航点) 字典序深度优先搜索，只有严格更优（差值超过 1e-12）
    才替换当前最优，因此并列时返回字典序最小的解。

    Raises:
        ConfigurationError: n > 6 或 γ > 5
    """
    n, gamma = dinst.n, dinst.gamma
    if n > BRUTE_FORCE_MAX_N or gamma > BRUTE_FORCE_MAX_GAMMA:
        raise ConfigurationError(
            f"穷举规模超限: n={n} (<= {BRUTE_FORCE_MAX_N}), gamma={gamma} (<= {BRUTE_FORCE_MAX_GAMMA})")

    pts = np.vstack([dinst.centers[0:1], dinst.waypoints[1:].reshape(-1, 2)])
    m_total = len(pts)
    dist = [[math.hypot(pts[j][0] - pts[i][0], pts[j][1] - pts[i][1]) for j in range(m_total)]
            for i in range(m_total)]
    starts = np.repeat(pts, m_total, axis=0)
    ends = np.tile(pts, (m_total, 1))
    hits = segments_disks_intersect(starts, ends, dinst.centers, dinst.radii).reshape(m_total, m_total, n + 1)
    weights = 1 << np.arange(n + 1)
    hit_mask = [[int((hits[i, j] * weights).sum()) for j in range(m_total)] for i in range(m_total)]

    full = (1 << (n + 1)) - 2
    start_cover = hit_mask[0][0]
    best = {"length": math.inf, "path": None}

    def index(node: int, k: int) -> int:
        return 1 + (node - 1) * gamma + k

    def dfs(m: int, cover: int, length: float, path: List[Stop]):
        if cover & full == full:
            total = length + dist[m][0]
            if total < best["length"] - 1e-12:
                best["length"], best["path"] = total, list(path)
            return
        if length + dist[m][0] >= best["length"] - 1e-12:
            return
        for node in range(1, n + 1):
            if cover >> node & 1:
                continue
            for k in range(gamma):
                m2 = index(node, k)
                path.append((node, k))
                dfs(m2, cover | hit_mask[m][m2] | (1 << node), length + dist[m][m2], path)
                path.pop()

    dfs(0, start_cover, 0.0, [])
    heuristic_logger.debug(f"穷举完成: n={n}, gamma={gamma}, 最优长度={best['length']:.6f}")
    return route_from_stops(dinst, best["path"])
