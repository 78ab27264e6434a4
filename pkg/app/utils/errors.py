"""异常定义"""


class CETSPError(Exception):
    """工具包异常基类"""


class InstanceFormatError(CETSPError, ValueError):
    """实例/场景文件格式错误"""


class InfeasibleActionError(CETSPError, ValueError):
    """环境动作不可行或状态使用错误"""


class ConfigurationError(CETSPError, ValueError):
    """参数或维度配置错误"""


class NumericalError(CETSPError, ArithmeticError):
    """数值异常（NaN/Inf）"""


class CheckpointError(CETSPError, IOError):
    """检查点文件损坏或不匹配"""
