"""
动态 CETSP 求解

沿计划逐个航点执行；到达航点时处理已到揭示时刻的动态目标，若已执行路径
未覆盖它们则从当前航点重规划。已执行前缀在任何重规划中保持不变。
"""
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger

from app.component.env import DiscretizedInstance, discretize
from app.component.policy import CETSPPolicy
from app.models.configs import DecodeMode, PolicyConfig
from app.models.geometry import Disk, Point
from app.models.instance import GenConfig, Instance, RadiusConfig
from app.models.scenario import DynamicPlanner, DynamicScenario, DynamicTarget, ExecutionTrace, ReplanEvent
from app.services.geometry import segments_disks_intersect, tour_length
from app.services.heuristics import (
    InsertionMode,
    Stop,
    finalize_route,
    insert_dynamic,
    insert_targets,
    path_coverage,
    route_from_stops,
    stops_of,
)
from app.services.instance_service import (
    DYNAMIC_SECTION,
    format_instance,
    generate,
    parse_instance,
    read_lines,
)
from app.utils.errors import ConfigurationError, InstanceFormatError

dynamic_logger = logger.bind(component="dynamic")

# 揭示进度区间
REVEAL_RANGE = (0.1, 0.8)


# ==================== 场景生成与文件 ====================

def generate_scenario(n: int, m: int, seed: int, index: int = 0) -> DynamicScenario:
    """
    生成 CETSP<n>-<m> 场景：均匀分布、随机半径，揭示进度服从 U[0.1, 0.8]

    Args:
        n: 静态目标数
        m: 动态目标数
        seed: 随机种子
        index: 场景序号
    """
    if n < 1 or m < 0:
        raise ConfigurationError(f"场景规模非法: n={n}, m={m}")
    cfg = GenConfig(sizes=[n], radius=RadiusConfig.preset("random"), seed=seed)
    static = generate(cfg, n, index=index)
    rng = np.random.default_rng([int(seed), int(n), int(m), int(index)])
    lo, hi = cfg.radius.random_range
    dynamic = []
    for _ in range(m):
        cx, cy = rng.uniform(0.0, 1.0, size=2)
        r = min(float(rng.uniform(lo, hi)), float(np.nextafter(hi, -np.inf)))
        fraction = float(rng.uniform(*REVEAL_RANGE))
        dynamic.append(DynamicTarget(Disk(Point(float(cx), float(cy)), r), fraction))
    return DynamicScenario(instance=static, dynamic=tuple(dynamic), name=f"CETSP{n}-{m}-s{seed}-{index}")


def format_scenario(scenario: DynamicScenario) -> str:
    """实例文件文本 + `DYNAMIC <m>` 段"""
    lines = [format_instance(scenario.instance).rstrip("\n"), f"{DYNAMIC_SECTION} {scenario.m}"]
    for t in scenario.dynamic:
        c = t.disk.center
        lines.append(f"{c.x!r} {c.y!r} {t.disk.radius!r} {t.fraction!r}")
    return "\n".join(lines) + "\n"


def parse_scenario(lines: List[Tuple[int, str]], name: str = "scenario") -> DynamicScenario:
    """
    解析场景文件

    Raises:
        InstanceFormatError: 实例段或 DYNAMIC 段格式错误
    """
    inst, rest = parse_instance(lines, inst_id=name)
    if not rest:
        return DynamicScenario(instance=inst, dynamic=(), name=name)

    lineno, header = rest[0]
    tokens = header.split()
    if len(tokens) != 2 or tokens[0] != DYNAMIC_SECTION:
        raise InstanceFormatError(f"malformed dynamic header at line {lineno}: expected 'DYNAMIC <m>'")
    try:
        m = int(tokens[1])
    except ValueError:
        raise InstanceFormatError(f"malformed dynamic header at line {lineno}: count '{tokens[1]}' is not an integer")
    body = rest[1:]
    if len(body) != m:
        raise InstanceFormatError(f"dynamic count mismatch: header says {m}, found {len(body)}")

    dynamic = []
    for k, text in body:
        fields = text.split()
        if len(fields) != 4:
            raise InstanceFormatError(f"dynamic line {k} must have 4 fields")
        try:
            cx, cy, r, fraction = (float(f) for f in fields)
        except ValueError:
            raise InstanceFormatError(f"non-numeric field at line {k}")
        if r < 0:
            raise InstanceFormatError(f"radius < 0 at line {k}")
        try:
            dynamic.append(DynamicTarget(Disk(Point(cx, cy), r), fraction))
        except ValueError as e:
            raise InstanceFormatError(f"invalid dynamic target at line {k}: {e}")
    return DynamicScenario(instance=inst, dynamic=tuple(dynamic), name=name)


def save_scenario(path, scenario: DynamicScenario) -> Path:
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    file_path.write_text(format_scenario(scenario), encoding="utf-8")
    dynamic_logger.info(f"保存场景文件: {file_path} (n={scenario.n}, m={scenario.m})")
    return file_path


def load_scenario(path) -> DynamicScenario:
    file_path = Path(path)
    return parse_scenario(read_lines(file_path), name=file_path.stem)


# ==================== 规划器 ====================

def _policy_candidates(policy: CETSPPolicy, dinst: DiscretizedInstance, executed: List[Stop],
                       remaining: Sequence[int], required: np.ndarray) -> List[Stop]:
    """
    以当前航点为零半径伪仓库构造子实例，贪心多起点解码；每条轨迹映射回完整实例、
    接上真实仓库并修整，保留最短的一条
    """
    here = dinst.point(*executed[-1]) if executed else dinst.depot
    full = dinst.base
    sub = Instance(depot=here, targets=tuple(full.targets[j - 1] for j in remaining), id=f"{full.id}@replan")
    sub_dinst = discretize(sub, dinst.gamma, dinst.phase)
    with torch.no_grad():
        traj = policy.rollout(sub_dinst, DecodeMode.GREEDY, n_starts=sub.n)

    best, best_length = None, math.inf
    for row in range(traj.env.rows):
        nodes, indices = traj.env.nodes[row], traj.env.point_indices[row]
        suffix = [(remaining[node - 1], k) for node, k in zip(nodes[1:], indices[1:]) if node != 0]
        stops = finalize_route(dinst, executed + suffix, len(executed), required)
        length = route_from_stops(dinst, stops).length
        if length < best_length:
            best, best_length = stops, length
    return best


def _initial_plan(dinst: DiscretizedInstance, scenario: DynamicScenario, planner: DynamicPlanner,
                  policy: Optional[CETSPPolicy], required: np.ndarray) -> List[Stop]:
    static = list(range(1, scenario.n + 1))
    if planner == DynamicPlanner.POLICY:
        return _policy_candidates(policy, dinst, [], static, required)
    stops = insert_targets(dinst, [], static, InsertionMode(planner.value), 0)
    return finalize_route(dinst, stops, 0, required)


def _replan(dinst: DiscretizedInstance, planner: DynamicPlanner, policy: Optional[CETSPPolicy],
            executed: List[Stop], plan: List[Stop], new_targets: Sequence[int],
            required: np.ndarray) -> List[Stop]:
    if planner == DynamicPlanner.POLICY:
        covered = path_coverage(dinst, executed)
        remaining = [j for j in range(1, dinst.n + 1) if required[j] and not covered[j]]
        return _policy_candidates(policy, dinst, executed, remaining, required)
    route = route_from_stops(dinst, executed + plan, frozen=len(executed) + 1)
    route = insert_dynamic(dinst, route, new_targets, InsertionMode(planner.value), required)
    return stops_of(route)


# ==================== 仿真 ====================

def simulate(scenario: DynamicScenario, planner=DynamicPlanner.CHEAPEST,
             policy: Optional[CETSPPolicy] = None, gamma: Optional[int] = None) -> ExecutionTrace:
    """
    执行动态场景

    揭示步 = ceil(fraction × 初始计划步数)（计划步数含返回仓库）；到达航点时处理到期的
    揭示，计划即将返回仓库时处理所有尚未揭示的目标。已执行路径覆盖的动态目标不触发重规划。

    Args:
        scenario: 动态场景
        planner: policy / cheapest / regret2 / greedy
        policy: policy 模式使用的策略网络
        gamma: 插入模式的离散化精度，默认与策略一致（无策略时取策略默认配置）

    Returns:
        ExecutionTrace: 执行轨迹

    Raises:
        ConfigurationError: policy 模式未提供策略网络，或重规划修改了已执行前缀
    """
    planner = DynamicPlanner(planner)
    if planner == DynamicPlanner.POLICY:
        if policy is None:
            raise ConfigurationError("policy 规划器需要已加载的策略网络")
        gamma = policy.config.gamma
    elif gamma is None:
        gamma = policy.config.gamma if policy is not None else PolicyConfig().gamma

    dinst = discretize(scenario.full_instance(), gamma)
    required = np.zeros(dinst.n + 1, dtype=bool)
    required[1:scenario.n + 1] = True

    plan = _initial_plan(dinst, scenario, planner, policy, required)
    initial_length = route_from_stops(dinst, plan).length
    total_steps = len(plan) + 1
    pending = {j: max(1, math.ceil(t.fraction * total_steps))
               for j, t in zip(scenario.dynamic_nodes(), scenario.dynamic)}

    executed: List[Stop] = []
    events: List[ReplanEvent] = []
    while True:
        steps = len(executed)
        due = sorted(j for j, s in pending.items() if s <= steps or not plan)
        if due:
            for j in due:
                del pending[j]
            required[due] = True
            covered = path_coverage(dinst, executed)
            uncovered = [j for j in due if not covered[j]]
            if uncovered:
                stops = _replan(dinst, planner, policy, executed, plan, uncovered, required)
                if stops[:len(executed)] != executed:
                    raise ConfigurationError(f"重规划修改了已执行前缀 (场景 {scenario.name}, 第 {steps} 步)")
                plan = stops[len(executed):]
                here = dinst.point(*executed[-1]) if executed else dinst.depot
                events.append(ReplanEvent(
                    step=steps,
                    at=here,
                    revealed=tuple(due),
                    executed=tuple(executed),
                    plan=tuple(dinst.point(node, k) for node, k in plan),
                ))
                dynamic_logger.debug(f"{scenario.name}: 第 {steps} 步揭示 {due}，重规划后剩余 {len(plan)} 个航点")
        if not plan:
            break
        executed.append(plan.pop(0))

    nodes = [0] + [node for node, _ in executed] + [0]
    visited = [dinst.depot] + [dinst.point(node, k) for node, k in executed] + [dinst.depot]
    covered = path_coverage(dinst, executed)
    if executed:
        last = np.asarray([visited[-2].as_tuple()])
        back = np.asarray([dinst.depot.as_tuple()])
        covered = covered | segments_disks_intersect(last, back, dinst.centers, dinst.radii)[0]
    trace = ExecutionTrace(
        planner=planner,
        visited=visited,
        nodes=nodes,
        length=tour_length(visited, closed=False),
        covered=covered[1:],
        events=events,
        initial_length=initial_length,
    )
    dynamic_logger.info(
        f"{scenario.name} [{planner.value}]: 长度 {trace.length:.4f} (初始计划 {initial_length:.4f}), "
        f"重规划 {trace.replans} 次")
    return trace
