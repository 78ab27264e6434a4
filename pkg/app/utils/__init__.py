"""工具函数模块"""
from .logger import setup_logger
from .helpers import apply_worker_limit, format_duration, format_gap, instance_rng, stopwatch
from .errors import (
    CETSPError,
    CheckpointError,
    ConfigurationError,
    InfeasibleActionError,
    InstanceFormatError,
    NumericalError,
)

__all__ = [
    "setup_logger",
    "apply_worker_limit",
    "format_duration",
    "format_gap",
    "instance_rng",
    "stopwatch",
    "CETSPError",
    "InstanceFormatError",
    "InfeasibleActionError",
    "ConfigurationError",
    "NumericalError",
    "CheckpointError",
]
