"""求解组件模块"""
from .env import BatchEnv, DiscretizedInstance, EnvState, discretize
from .diffcore import ParamBlock, grad_check
from .policy import CETSPPolicy, PolicySolution, Trajectories
# trainer / evaluator 依赖 app.services 中的检查点与基线，按需直接导入

__all__ = [
    "DiscretizedInstance",
    "discretize",
    "EnvState",
    "BatchEnv",
    "ParamBlock",
    "grad_check",
    "CETSPPolicy",
    "PolicySolution",
    "Trajectories",
]
