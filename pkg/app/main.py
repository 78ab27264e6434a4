"""
命令行入口

子命令：gen / train / solve / eval / dynamic / selftest / plot
退出码：0 成功；1 用法或输入错误；2 数值异常、自检失败或动态执行未覆盖全部目标
参数优先级：命令行 > --config 指定的 JSON 文件 > 默认值
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import ValidationError

from app.component.env import discretize
from app.component.evaluator import BASELINES, ablation, evaluate
from app.component.policy import CETSPPolicy
from app.component.trainer import Trainer
from app.config import settings
from app.models.configs import PolicyConfig, TrainConfig
from app.models.geometry import Point
from app.models.instance import Distribution, GenConfig, Instance, RadiusConfig
from app.models.report import EvalReport
from app.models.route import Route
from app.models.scenario import DynamicPlanner
from app.services.checkpoint_service import checkpoint_service
from app.services.dynamic_service import generate_scenario, load_scenario, save_scenario, simulate
from app.services.instance_service import (
    denormalize_length,
    denormalize_point,
    generate,
    instance_file_service,
    normalize,
)
from app.services.selftest_service import SelftestService
from app.utils.errors import CETSPError, NumericalError
from app.utils.helpers import apply_worker_limit, format_duration, stopwatch
from app.utils.logger import setup_logger
from app.utils.svg import render_svg

INSTANCE_SUFFIX = ".cetsp"
SCENARIO_SUFFIX = ".scenario"
RADIUS_CHOICES = ["constant", "random", "small", "large"]
SOLVE_METHODS = ["policy"] + list(BASELINES)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2


class UsageError(Exception):
    """命令行用法错误"""


class CLIArgumentParser(argparse.ArgumentParser):
    """用法错误以 UsageError 抛出，由 dispatch 统一映射为退出码 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ==================== 参数解析 ====================

def build_parser() -> CLIArgumentParser:
    common = CLIArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="随机种子")
    common.add_argument("--config", help="JSON 配置文件（按子命令分段或顶层键）")
    common.add_argument("--out", help="输出路径")
    common.add_argument("--debug", action="store_true", help="启用调试日志")
    common.add_argument("--log-file", nargs="?", const=settings.log.file, help="同时写入日志文件")

    parser = CLIArgumentParser(
        prog="cetsp",
        description="CETSP 求解工具包",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
示例:
    python run_cetsp.py gen --n 20 --radius random --out data/n20.cetsp
    python run_cetsp.py train --config configs/desk_train.json --epochs 5
    python run_cetsp.py solve --input data/n20.cetsp --checkpoint checkpoints/epoch_0049.ckpt --aug
    python run_cetsp.py eval --n 20 --count 100 --checkpoint checkpoints/epoch_0049.ckpt --aug
    python run_cetsp.py dynamic --n 20 --dynamic-count 2 --count 100 --planner cheapest
    python run_cetsp.py selftest
    python run_cetsp.py plot --input data/n20.cetsp --route result.json --out n20.svg
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="生成实例或动态场景文件")
    gen.add_argument("--n", type=int, help="目标数量")
    gen.add_argument("--count", type=int, help="生成数量")
    gen.add_argument("--radius", choices=RADIUS_CHOICES, help="半径预设")
    gen.add_argument("--distribution", choices=[d.value for d in Distribution], help="空间分布")
    gen.add_argument("--dynamic-count", type=int, help="动态目标数量（大于 0 时生成场景文件）")

    train = sub.add_parser("train", parents=[common], help="训练策略网络")
    _add_policy_flags(train)
    train.add_argument("--n", type=int, nargs="+", help="训练规模集合 Λ")
    train.add_argument("--epochs", type=int, help="训练轮数")
    train.add_argument("--batch", type=int, help="批大小")
    train.add_argument("--count", type=int, help="每轮实例数")
    train.add_argument("--checkpoint", help="从检查点继续训练")

    solve = sub.add_parser("solve", parents=[common], help="求解单个实例")
    solve.add_argument("--input", required=True, help="实例文件")
    solve.add_argument("--checkpoint", help="策略检查点")
    solve.add_argument("--method", choices=SOLVE_METHODS, help="求解方法，默认 policy")
    solve.add_argument("--aug", action="store_true", help="×8 对称增强")
    solve.add_argument("--gamma", type=int, help="基线的离散化精度")
    solve.add_argument("--benchmark", action="store_true", help="输入为 4 列 x y z r 基准文件")

    ev = sub.add_parser("eval", parents=[common], help="评估策略与基线")
    ev.add_argument("--input", help="实例目录（缺省时按 --n/--count 生成）")
    ev.add_argument("--checkpoint", help="策略检查点")
    ev.add_argument("--n", type=int, help="生成实例的规模")
    ev.add_argument("--count", type=int, help="生成实例数量")
    ev.add_argument("--radius", choices=RADIUS_CHOICES, help="半径预设")
    ev.add_argument("--distribution", choices=[d.value for d in Distribution], help="空间分布")
    ev.add_argument("--aug", action="store_true", help="额外报告 ×8 增强结果")
    ev.add_argument("--gamma", type=int, help="基线的离散化精度")
    ev.add_argument("--ablation", action="store_true", help="同时报告关闭 k-NN 交互的消融结果")

    dyn = sub.add_parser("dynamic", parents=[common], help="动态场景仿真")
    dyn.add_argument("--input", help="场景文件（缺省时按 --n/--dynamic-count 生成）")
    dyn.add_argument("--checkpoint", help="策略检查点（policy 规划器必需）")
    dyn.add_argument("--planner", choices=[p.value for p in DynamicPlanner], help="重规划方式")
    dyn.add_argument("--n", type=int, help="静态目标数")
    dyn.add_argument("--dynamic-count", type=int, help="动态目标数")
    dyn.add_argument("--count", type=int, help="场景数量")
    dyn.add_argument("--gamma", type=int, help="插入规划器的离散化精度")

    st = sub.add_parser("selftest", parents=[common], help="梯度检查与基准一致性自检")
    st.add_argument("--count", type=int, help="环境/穷举一致性检查的实例数")

    plot = sub.add_parser("plot", parents=[common], help="把实例与路线渲染为 SVG")
    plot.add_argument("--input", required=True, help="实例文件")
    plot.add_argument("--route", help="solve 输出的 JSON 结果")
    return parser


def _add_policy_flags(p: argparse.ArgumentParser):
    p.add_argument("--gamma", type=int, help="每个圆盘的 PDS 航点数")
    p.add_argument("--knn", type=int, help="loc-decoder 近邻数")
    p.add_argument("--layers", type=int, help="编码器层数")
    p.add_argument("--dim", type=int, help="模型维度")
    p.add_argument("--heads", type=int, help="注意力头数")


# ==================== 配置合并 ====================

def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    file_path = Path(path)
    if not file_path.exists():
        raise UsageError(f"配置文件不存在: {file_path}")
    try:
        data = json.loads(file_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"配置文件无法解析: {e}")
    if not isinstance(data, dict):
        raise UsageError("配置文件顶层必须是对象")
    return data


def option(args: argparse.Namespace, config: Dict[str, Any], name: str,
           section: Optional[str] = None, default: Any = None) -> Any:
    """取值优先级：命令行 > 配置文件分段 > 配置文件顶层 > 默认值"""
    value = getattr(args, name, None)
    if value is not None:
        return value
    if section and name in config.get(section, {}):
        return config[section][name]
    if name in config:
        return config[name]
    return default


def model_kwargs(config: Dict[str, Any], section: str, overrides: Dict[str, Any]) -> Dict[str, Any]:
    kwargs = dict(config.get(section, {}))
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return kwargs


def resume_conflicts(current: PolicyConfig, requested: Dict[str, Any]) -> Dict[str, Tuple[Any, Any]]:
    """续训时显式给出的策略参数中与检查点不同的项：名称 -> (检查点值, 请求值)"""
    merged = PolicyConfig(**{**current.model_dump(), **requested})
    return {name: (getattr(current, name), getattr(merged, name))
            for name in requested if getattr(current, name, None) != getattr(merged, name, None)}


def _load_policy(path: Optional[str]) -> Optional[CETSPPolicy]:
    if not path:
        return None
    policy, extra = checkpoint_service.load(path)
    logger.info(f"加载策略: {path} (epoch={extra.get('epoch')})")
    return policy


def _echo_seed(seed: int):
    print(f"seed={seed}")


# ==================== 子命令 ====================

def cmd_gen(args, config) -> int:
    seed = option(args, config, "seed", "gen", 1234)
    n = option(args, config, "n", "gen", 20)
    count = option(args, config, "count", "gen", 1)
    m = option(args, config, "dynamic_count", "gen", 0)
    radius = option(args, config, "radius", "gen", "random")
    distribution = option(args, config, "distribution", "gen", Distribution.UNIFORM.value)
    out = option(args, config, "out", "gen")
    if count < 1:
        raise UsageError("--count 必须 >= 1")

    single_file = out is not None and count == 1 and Path(out).suffix != ""
    out_dir = Path(out) if out and not single_file else Path(settings.runtime.output_dir)
    if m > 0:
        for i in range(count):
            scenario = generate_scenario(n, m, seed, index=i)
            path = Path(out) if single_file else out_dir / f"{scenario.name}{SCENARIO_SUFFIX}"
            print(save_scenario(path, scenario))
    else:
        cfg = GenConfig(sizes=[n], distribution=Distribution(distribution),
                        radius=RadiusConfig.preset(radius), seed=seed)
        for i in range(count):
            inst = generate(cfg, n, index=i)
            path = Path(out) if single_file else out_dir / f"{inst.id}{INSTANCE_SUFFIX}"
            print(instance_file_service.save(path, inst))
    _echo_seed(seed)
    return EXIT_OK


def cmd_train(args, config) -> int:
    seed = option(args, config, "seed", "train", 1234)
    requested = model_kwargs(config, "policy", {
        "gamma": args.gamma, "k_nn": args.knn, "layers": args.layers, "dim": args.dim, "heads": args.heads,
    })
    train_cfg = TrainConfig(**model_kwargs(config, "train", {
        "epochs": args.epochs, "batch_size": args.batch, "sizes": args.n,
        "instances_per_epoch": args.count, "seed": seed, "checkpoint_dir": args.out,
    }))
    if args.checkpoint:
        policy = _load_policy(args.checkpoint)
        conflicts = resume_conflicts(policy.config, requested)
        if conflicts:
            raise UsageError(f"续训的策略参数与检查点不一致: {conflicts}")
    else:
        policy = CETSPPolicy(PolicyConfig(**requested))
    logger.info(f"策略参数量: {policy.params.num_values()}")

    with stopwatch() as elapsed:
        result = Trainer(train_cfg, policy).train()
    print(f"checkpoint={result.checkpoints[-1]}")
    for epoch, length in enumerate(result.eval_lengths):
        print(f"eval[{epoch}]={length:.6f}")
    print(f"multistart_violations={result.multistart_violations}")
    print(f"time={format_duration(elapsed[0])}")
    _echo_seed(train_cfg.seed)
    return EXIT_OK


def _route_payload(route: Route, scale: float, offset: Point) -> Dict[str, Any]:
    points = [denormalize_point(p, scale, offset) for p in route.points]
    return {"nodes": list(route.nodes), "waypoints": [[p.x, p.y] for p in points]}


def cmd_solve(args, config) -> int:
    seed = option(args, config, "seed", "solve", 0)
    method = option(args, config, "method", "solve", "policy")
    if args.benchmark:
        inst, scale, offset = instance_file_service.import_benchmark(args.input)
    else:
        inst, scale, offset = normalize(instance_file_service.load(args.input))

    policy = _load_policy(args.checkpoint)
    if method == "policy" and policy is None:
        raise UsageError("policy 方法需要 --checkpoint")
    label = method + ("-Aug" if args.aug and method == "policy" else "")
    with stopwatch() as elapsed:
        if method == "policy":
            route = policy.solve(inst, aug=args.aug).route
        else:
            gamma = option(args, config, "gamma", "policy", policy.config.gamma if policy else PolicyConfig().gamma)
            route = BASELINES[method](discretize(inst, gamma))
    objective = route.length

    report = EvalReport.from_results({inst.id: {label: [objective]}}, {inst.id: {label: elapsed[0]}}, seed=seed)
    print(report.render_table())
    if scale != 1.0:
        print(f"objective_original={denormalize_length(objective, scale):.6f}")

    if args.out:
        payload = {
            "instance": inst.id,
            "method": label,
            "objective": objective,
            "objective_original": denormalize_length(objective, scale),
            "scale": scale,
            "offset": [offset.x, offset.y],
            "time": elapsed[0],
            "seed": seed,
            **_route_payload(route, scale, offset),
        }
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        logger.info(f"求解结果已保存: {out}")
    return EXIT_OK


def _eval_dataset(args, config, seed: int) -> Dict[str, List[Instance]]:
    if args.input:
        files = sorted(Path(args.input).glob(f"*{INSTANCE_SUFFIX}"))
        groups: Dict[str, List[Instance]] = {}
        for f in files:
            inst, _, _ = normalize(instance_file_service.load(f))
            groups.setdefault(f"n{inst.n}", []).append(inst)
        return groups
    n = option(args, config, "n", "eval", 20)
    count = option(args, config, "count", "eval", 100)
    radius = option(args, config, "radius", "eval", "random")
    distribution = option(args, config, "distribution", "eval", Distribution.UNIFORM.value)
    cfg = GenConfig(sizes=[n], distribution=Distribution(distribution),
                    radius=RadiusConfig.preset(radius), seed=seed)
    return {f"n{n}-{radius}": [generate(cfg, n, index=i) for i in range(count)]}


def cmd_eval(args, config) -> int:
    seed = option(args, config, "seed", "eval", 4321)
    policy = _load_policy(args.checkpoint)
    gamma = option(args, config, "gamma", "policy", None)
    if policy is None and gamma is None:
        gamma = PolicyConfig().gamma
    dataset = _eval_dataset(args, config, seed)

    report = evaluate(policy, dataset, use_aug=args.aug, baselines=list(BASELINES), gamma=gamma, seed=seed)
    print(report.render_table())
    if args.ablation:
        if policy is None:
            raise UsageError("--ablation 需要 --checkpoint")
        print(ablation(policy, dataset, seed=seed).render_table())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_json_rows() + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_dynamic(args, config) -> int:
    seed = option(args, config, "seed", "dynamic", 2024)
    planner = DynamicPlanner(option(args, config, "planner", "dynamic", DynamicPlanner.CHEAPEST.value))
    policy = _load_policy(args.checkpoint)
    if planner == DynamicPlanner.POLICY and policy is None:
        raise UsageError("policy 规划器需要 --checkpoint")
    gamma = option(args, config, "gamma", "dynamic", None)

    if args.input:
        scenarios = [load_scenario(args.input)]
    else:
        n = option(args, config, "n", "dynamic", 20)
        m = option(args, config, "dynamic_count", "dynamic", 2)
        count = option(args, config, "count", "dynamic", 1)
        scenarios = [generate_scenario(n, m, seed, index=i) for i in range(count)]

    rows, failed = [], 0
    for scenario in scenarios:
        with stopwatch() as elapsed:
            trace = simulate(scenario, planner, policy=policy, gamma=gamma)
        if not trace.covers_all():
            failed += 1
            logger.error(f"场景 {scenario.name} 的执行轨迹没有覆盖全部目标")
        rows.append({"scenario": scenario.name, "planner": planner.value, "length": trace.length,
                     "initial_length": trace.initial_length, "replans": trace.replans,
                     "covered": trace.covers_all(), "time": elapsed[0], "seed": seed})
        print(f"{scenario.name:<28} {planner.value:<10} {trace.length:>10.4f} replans={trace.replans}")

    print(f"mean_length={np.mean([r['length'] for r in rows]):.6f}")
    _echo_seed(seed)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_selftest(args, config) -> int:
    seed = option(args, config, "seed", "selftest", 0)
    count = option(args, config, "count", "selftest", 200)
    results = SelftestService(seed=seed, oracle_count=count).run(on_result=lambda r: print(r.to_line()))
    passed = all(r.passed for r in results)
    print(f"selftest {'passed' if passed else 'FAILED'}: {sum(r.passed for r in results)}/{len(results)}")
    _echo_seed(seed)
    return EXIT_OK if passed else EXIT_NUMERIC


def cmd_plot(args, config) -> int:
    seed = option(args, config, "seed", "plot", 0)
    inst = instance_file_service.load(args.input)
    route = None
    if args.route:
        payload = json.loads(Path(args.route).read_text(encoding="utf-8"))
        route = Route(nodes=payload["nodes"], points=[Point(x, y) for x, y in payload["waypoints"]], closed=True)
    out = args.out or str(Path(settings.runtime.output_dir) / f"{inst.id}.svg")
    print(render_svg(inst, route, out))
    _echo_seed(seed)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "solve": cmd_solve,
    "eval": cmd_eval,
    "dynamic": cmd_dynamic,
    "selftest": cmd_selftest,
    "plot": cmd_plot,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    解析参数并执行子命令

    Returns:
        int: 退出码（0 成功，1 用法/输入错误，2 数值异常或自检失败）
    """
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except UsageError as e:
        print(f"cetsp: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    setup_logger(level="DEBUG" if args.debug else None, log_file=args.log_file, to_file=bool(args.log_file))
    apply_worker_limit()
    try:
        config = load_config_file(args.config)
        return COMMANDS[args.command](args, config)
    except UsageError as e:
        logger.error(f"用法错误: {e}")
        return EXIT_USAGE
    except NumericalError as e:
        logger.error(f"数值异常: {e}")
        return EXIT_NUMERIC
    except (CETSPError, ValidationError, FileNotFoundError) as e:
        logger.error(f"执行失败: {e}")
        return EXIT_USAGE
    except KeyboardInterrupt:
        logger.warning("用户中断执行")
        return EXIT_USAGE


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
