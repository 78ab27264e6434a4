"""服务层模块"""
from .instance_service import InstanceFileService, instance_file_service
# checkpoint_service / selftest_service 依赖 app.component，按需直接导入以避免循环导入

__all__ = [
    "InstanceFileService",
    "instance_file_service",
]
