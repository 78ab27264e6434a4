"""
评估与消融

策略网络以贪心多起点解码（可选 ×8 增强）求解，经典基线在同一离散化上求解；
按分组汇总 Obj. / Gap / Time。
"""
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

from loguru import logger

from app.component.env import DiscretizedInstance, discretize
from app.component.policy import CETSPPolicy
from app.models.instance import Instance
from app.models.report import EvalReport
from app.models.route import Route
from app.services.heuristics import cheapest_insertion, nearest_neighbor, refine_waypoints
from app.utils.errors import ConfigurationError
from app.utils.helpers import stopwatch

evaluator_logger = logger.bind(component="evaluator")

POLICY_METHOD = "policy"
POLICY_AUG_METHOD = "policy-Aug"
NO_KNN_METHOD = "policy w/o k-NN"

Dataset = Union[Sequence[Instance], Mapping[str, Sequence[Instance]]]


def _ci_refine(dinst: DiscretizedInstance) -> Route:
    return refine_waypoints(cheapest_insertion(dinst), dinst.base)


# 基线名称 -> 求解函数
BASELINES: Dict[str, Callable[[DiscretizedInstance], Route]] = {
    "NN": nearest_neighbor,
    "CI": cheapest_insertion,
    "CI+refine": _ci_refine,
}


def group_dataset(dataset: Dataset) -> Dict[str, List[Instance]]:
    """
    统一数据集形式：列表按规模分组为 n<规模>，字典原样保留

    Raises:
        ConfigurationError: 数据集为空
    """
    if isinstance(dataset, Mapping):
        groups = {str(name): list(items) for name, items in dataset.items() if len(items) > 0}
    else:
        groups = {}
        for inst in dataset:
            groups.setdefault(f"n{inst.n}", []).append(inst)
    if not groups:
        raise ConfigurationError("评估数据集为空")
    return groups


def _policy_lengths(policy: CETSPPolicy, instances: Sequence[Instance], aug: bool) -> List[float]:
    return [policy.solve(inst, aug=aug).length for inst in instances]


def evaluate(policy: Optional[CETSPPolicy], dataset: Dataset, use_aug: bool = False,
             baselines: Sequence[str] = ("NN", "CI"), gamma: Optional[int] = None,
             seed: int = 0) -> EvalReport:
    """
    在数据集上评估策略与基线

    Args:
        policy: 策略网络，为 None 时只评估基线
        dataset: 实例列表或 分组名 -> 实例列表
        use_aug: 额外报告 ×8 增强的结果（逐实例取最优）
        baselines: 基线名称，取自 BASELINES
        gamma: 基线使用的离散化精度，默认与策略一致
        seed: 写入报告的随机种子

    Returns:
        EvalReport: 各分组、各方法的 Obj. / Gap / Time

    Raises:
        ConfigurationError: 数据集为空、基线未知或未给出 gamma
    """
    groups = group_dataset(dataset)
    unknown = [name for name in baselines if name not in BASELINES]
    if unknown:
        raise ConfigurationError(f"未知基线: {unknown}，可选 {sorted(BASELINES)}")
    if gamma is None:
        if policy is None:
            raise ConfigurationError("只评估基线时必须指定 gamma")
        gamma = policy.config.gamma

    results: Dict[str, Dict[str, List[float]]] = {}
    times: Dict[str, Dict[str, float]] = {}
    for group, instances in groups.items():
        results[group], times[group] = {}, {}
        if policy is not None:
            methods = [(POLICY_METHOD, False)] + ([(POLICY_AUG_METHOD, True)] if use_aug else [])
            for method, aug in methods:
                with stopwatch() as elapsed:
                    results[group][method] = _policy_lengths(policy, instances, aug)
                times[group][method] = elapsed[0]

        dinsts = [discretize(inst, gamma) for inst in instances]
        for name in baselines:
            solver = BASELINES[name]
            with stopwatch() as elapsed:
                results[group][name] = [solver(d).length for d in dinsts]
            times[group][name] = elapsed[0]

        evaluator_logger.info(f"分组 {group} 评估完成: {len(instances)} 个实例, 方法 {list(results[group])}")

    return EvalReport.from_results(results, times, seed=seed)


def ablation(policy: CETSPPolicy, dataset: Dataset, seed: int = 0) -> EvalReport:
    """
    k 近邻交互消融：完整模型与关闭 k-NN 的同参数模型在同一数据集上对比

    两者共享同一组参数，只是 loc-decoder 的键值集合退化为选中节点本身。
    """
    variant = CETSPPolicy(policy.config.model_copy(update={"use_knn": False}), params=policy.params)
    groups = group_dataset(dataset)
    results: Dict[str, Dict[str, List[float]]] = {}
    times: Dict[str, Dict[str, float]] = {}
    for group, instances in groups.items():
        results[group], times[group] = {}, {}
        for method, model in ((POLICY_METHOD, policy), (NO_KNN_METHOD, variant)):
            with stopwatch() as elapsed:
                results[group][method] = _policy_lengths(model, instances, aug=False)
            times[group][method] = elapsed[0]
    report = EvalReport.from_results(results, times, seed=seed)
    for group in groups:
        full, reduced = report.row(group, POLICY_METHOD), report.row(group, NO_KNN_METHOD)
        evaluator_logger.info(
            f"消融 {group}: 完整模型 {full.objective:.4f}, 关闭 k-NN {reduced.objective:.4f}")
    return report
