"""数据模型模块"""
from .geometry import Disk, Point
from .instance import Distribution, GenConfig, Instance, RadiusConfig, RadiusKind
from .configs import DecodeMode, EncoderVariant, FFKind, PolicyConfig, TrainConfig
from .route import Route
from .report import EvalReport, ReportRow
from .scenario import DynamicPlanner, DynamicScenario, DynamicTarget, ExecutionTrace, ReplanEvent

__all__ = [
    "Point",
    "Disk",
    "Instance",
    "RadiusKind",
    "Distribution",
    "RadiusConfig",
    "GenConfig",
    "DecodeMode",
    "EncoderVariant",
    "FFKind",
    "PolicyConfig",
    "TrainConfig",
    "Route",
    "ReportRow",
    "EvalReport",
    "DynamicPlanner",
    "DynamicTarget",
    "DynamicScenario",
    "ReplanEvent",
    "ExecutionTrace",
]
