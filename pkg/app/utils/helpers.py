"""辅助工具函数"""
import time
from contextlib import contextmanager
from typing import Iterator, List

import numpy as np
import torch

from app.config import settings


def instance_rng(seed: int, size: int, index: int) -> np.random.Generator:
    """按 (seed, 规模, 序号) 派生独立随机流，保证并行生成时互不干扰"""
    return np.random.default_rng([int(seed), int(size), int(index)])


def torch_generator(seed: int) -> torch.Generator:
    """创建固定种子的 torch 随机数发生器（CPU）"""
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def default_dtype() -> torch.dtype:
    """根据运行时配置返回张量精度"""
    return torch.float64 if settings.runtime.dtype == "float64" else torch.float32


def apply_worker_limit(workers: int = None) -> int:
    """限制 torch 线程数，返回实际生效的线程数"""
    workers = workers or settings.runtime.workers
    torch.set_num_threads(max(1, int(workers)))
    return torch.get_num_threads()


def format_duration(seconds: float) -> str:
    """格式化耗时（s / m / h）"""
    if seconds < 60:
        return f"{seconds:.2f}s"
    if seconds < 3600:
        return f"{seconds / 60:.2f}m"
    return f"{seconds / 3600:.2f}h"


def format_gap(gap: float) -> str:
    """格式化百分比差距"""
    return f"{gap * 100:.2f}%"


@contextmanager
def stopwatch() -> Iterator[List[float]]:
    """
    计时上下文

    用法:
        with stopwatch() as elapsed:
            ...
        seconds = elapsed[0]
    """
    elapsed = [0.0]
    start = time.perf_counter()
    try:
        yield elapsed
    finally:
        elapsed[0] = time.perf_counter() - start
