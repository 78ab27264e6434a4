"""
实例服务

负责实例生成（均匀/聚类/混合分布，固定/随机半径）、归一化、
×8 对称增强以及实例文件读写。
"""
import math
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from app.models.geometry import Disk, Point
from app.models.instance import (
    DEFAULT_CONSTANT_RADII,
    Distribution,
    GenConfig,
    Instance,
    RadiusKind,
)
from app.services.geometry import SYMMETRY_INVERSE, apply_symmetry
from app.utils.errors import ConfigurationError, InstanceFormatError
from app.utils.helpers import instance_rng

FILE_MAGIC = "CETSP"
FILE_VERSION = "1"
# 实例段之后唯一允许出现的段关键字
DYNAMIC_SECTION = "DYNAMIC"

# 聚类分布参数
CLUSTER_COUNT = 5
CLUSTER_SIGMA = 0.05
CLUSTER_CENTER_RANGE = (0.1, 0.9)

# 单位正方形判定容差
UNIT_TOL = 1e-12

instance_logger = logger.bind(component="instance")


# ==================== 生成 ====================

def radius_for_size(size: int, constant_map: Optional[Dict[int, float]] = None) -> float:
    """
    固定半径映射

    未收录的规模取最近的已收录规模，距离相同时取较小规模。

    Args:
        size: 问题规模（>= 1）
        constant_map: 规模 -> 半径映射，默认 {20:0.1, 40:0.05, 60:0.05, 80:0.01, 100:0.01}

    Returns:
        float: 半径
    """
    if size < 1:
        raise ConfigurationError(f"问题规模必须 >= 1，当前为 {size}")
    mapping = constant_map or DEFAULT_CONSTANT_RADII
    nearest = min(mapping, key=lambda k: (abs(k - size), k))
    return float(mapping[nearest])


def _clustered_point(rng: np.random.Generator, cluster_centers: np.ndarray) -> np.ndarray:
    center = cluster_centers[rng.integers(len(cluster_centers))]
    while True:
        p = rng.normal(center, CLUSTER_SIGMA)
        if 0.0 <= p[0] <= 1.0 and 0.0 <= p[1] <= 1.0:
            return p


def _sample_centers(distribution: Distribution, size: int, rng: np.random.Generator) -> np.ndarray:
    if distribution == Distribution.UNIFORM:
        return rng.uniform(0.0, 1.0, size=(size, 2))

    lo, hi = CLUSTER_CENTER_RANGE
    cluster_centers = rng.uniform(lo, hi, size=(CLUSTER_COUNT, 2))
    points = np.empty((size, 2), dtype=np.float64)
    for i in range(size):
        if distribution == Distribution.MIXED and rng.random() < 0.5:
            points[i] = rng.uniform(0.0, 1.0, size=2)
        else:
            points[i] = _clustered_point(rng, cluster_centers)
    return points


def _sample_radii(cfg: GenConfig, size: int, rng: np.random.Generator) -> np.ndarray:
    if cfg.radius.kind == RadiusKind.CONSTANT:
        return np.full(size, radius_for_size(size, cfg.radius.constant_map))
    lo, hi = cfg.radius.random_range
    radii = rng.uniform(lo, hi, size=size)
    # 浮点舍入可能得到 hi，收紧到 [lo, hi)
    return np.minimum(radii, np.nextafter(hi, -np.inf))


def generate(cfg: GenConfig, size: int, rng: Optional[np.random.Generator] = None,
             index: int = 0) -> Instance:
    """
    生成一个实例

    Args:
        cfg: 生成配置
        size: 目标数量
        rng: 随机数发生器；为空时由 (cfg.seed, size, index) 派生
        index: 实例序号（用于派生随机流和实例标识）

    Returns:
        Instance: 仓库与目标坐标均位于 [0,1]²
    """
    if size < 1:
        raise ConfigurationError(f"问题规模必须 >= 1，当前为 {size}")
    rng = rng if rng is not None else instance_rng(cfg.seed, size, index)

    depot = rng.uniform(0.0, 1.0, size=2)
    centers = _sample_centers(cfg.distribution, size, rng)
    radii = _sample_radii(cfg, size, rng)

    all_centers = np.vstack([depot[None, :], centers])
    all_radii = np.concatenate([[0.0], radii])
    inst_id = f"{cfg.distribution.value}-{cfg.radius.kind.value}-n{size}-s{cfg.seed}-{index}"
    return Instance.from_arrays(all_centers, all_radii, id=inst_id)


def generate_batch(cfg: GenConfig, size: int, count: int, start_index: int = 0) -> List[Instance]:
    """按序号生成一批实例，第 i 个实例只依赖 (seed, size, start_index + i)"""
    return list(iter_instances(cfg, size, count, start_index))


def iter_instances(cfg: GenConfig, size: int, count: int, start_index: int = 0) -> Iterator[Instance]:
    for i in range(start_index, start_index + count):
        yield generate(cfg, size, index=i)


# ==================== 对称增强 ====================

def _in_unit_square(inst: Instance) -> bool:
    centers = inst.centers()
    return bool(np.all(centers >= -UNIT_TOL) and np.all(centers <= 1.0 + UNIT_TOL))


def transform_instance(inst: Instance, k: int) -> Instance:
    """对仓库与全部圆心施加第 k 个对称变换，半径不变"""
    depot = apply_symmetry(inst.depot, k)
    targets = tuple(Disk(apply_symmetry(d.center, k), d.radius) for d in inst.targets)
    return Instance(depot=depot, targets=targets, id=inst.id if k == 0 else f"{inst.id}#aug{k}")


def augment8(inst: Instance) -> List[Instance]:
    """
    ×8 实例增强

    Returns:
        List[Instance]: 8 个对称实例，第 0 个为原实例

    Raises:
        ConfigurationError: 实例不在单位正方形内
    """
    if not _in_unit_square(inst):
        raise ConfigurationError(f"实例 {inst.id} 不在 [0,1]² 内，需先 normalize")
    return [transform_instance(inst, k) for k in range(8)]


def restore_points(points: Sequence[Point], k: int) -> List[Point]:
    """把第 k 个增强实例上的航点映射回原坐标系"""
    inv = SYMMETRY_INVERSE[k]
    return [apply_symmetry(p, inv) for p in points]


# ==================== 归一化 ====================

def normalize(inst: Instance) -> Tuple[Instance, float, Point]:
    """
    把实例缩放到单位正方形

    已位于 [0,1]² 的实例原样返回（scale=1，offset=(0,0)）；否则平移包围盒
    最小角到原点，坐标与半径同除以包围盒较长边。

    Returns:
        Tuple[Instance, float, Point]: (归一化实例, scale, offset)，
        真实长度 = 归一化长度 × scale

    Raises:
        ConfigurationError: 所有点重合（包围盒为零）
    """
    centers = inst.centers()
    mins = centers.min(axis=0)
    extent = float((centers.max(axis=0) - mins).max())
    if extent <= 0.0:
        raise ConfigurationError(f"实例 {inst.id} 的所有点重合，无法归一化")

    if _in_unit_square(inst):
        return inst, 1.0, Point(0.0, 0.0)

    scaled_centers = (centers - mins) / extent
    scaled_radii = inst.radii() / extent
    normalized = Instance.from_arrays(scaled_centers, scaled_radii, id=inst.id)
    instance_logger.debug(f"实例 {inst.id} 归一化: scale={extent}, offset=({mins[0]}, {mins[1]})")
    return normalized, extent, Point(float(mins[0]), float(mins[1]))


def denormalize_length(length: float, scale: float) -> float:
    """归一化长度换算回原始长度"""
    return length * scale


def denormalize_point(p: Point, scale: float, offset: Point) -> Point:
    """归一化坐标换算回原始坐标"""
    return Point(p.x * scale + offset.x, p.y * scale + offset.y)


# ==================== 文件读写 ====================

def _fmt(value: float) -> str:
    return repr(float(value))


def format_instance(inst: Instance) -> str:
    """序列化为实例文件文本"""
    lines = [f"{FILE_MAGIC} {FILE_VERSION} {inst.n}",
             f"{_fmt(inst.depot.x)} {_fmt(inst.depot.y)} 0"]
    for d in inst.targets:
        lines.append(f"{_fmt(d.center.x)} {_fmt(d.center.y)} {_fmt(d.radius)}")
    return "\n".join(lines) + "\n"


def _parse_floats(tokens: List[str], lineno: int) -> List[float]:
    values = []
    for tok in tokens:
        try:
            value = float(tok)
        except ValueError:
            raise InstanceFormatError(f"non-numeric field '{tok}' at line {lineno}")
        if not math.isfinite(value):
            raise InstanceFormatError(f"non-finite field '{tok}' at line {lineno}")
        values.append(value)
    return values


def parse_instance(lines: List[Tuple[int, str]], inst_id: str = "instance") -> Tuple[Instance, List[Tuple[int, str]]]:
    """
    解析实例段

    Args:
        lines: (行号, 内容) 列表，已去掉空行
        inst_id: 实例标识

    Returns:
        Tuple[Instance, List]: 实例与实例段之后的剩余行（如 DYNAMIC 段）

    Raises:
        InstanceFormatError: 各类格式错误，信息互不相同
    """
    if not lines:
        raise InstanceFormatError("malformed header: empty file")
    lineno, header = lines[0]
    tokens = header.split()
    if len(tokens) != 3 or tokens[0] != FILE_MAGIC:
        raise InstanceFormatError(f"malformed header at line {lineno}: expected 'CETSP 1 <n>'")
    if tokens[1] != FILE_VERSION:
        raise InstanceFormatError(f"malformed header at line {lineno}: unsupported version {tokens[1]}")
    try:
        n = int(tokens[2])
    except ValueError:
        raise InstanceFormatError(f"malformed header at line {lineno}: target count '{tokens[2]}' is not an integer")
    if n < 1:
        raise InstanceFormatError(f"malformed header at line {lineno}: target count must be >= 1")

    if len(lines) < 2 or lines[1][1].split()[0] == DYNAMIC_SECTION:
        raise InstanceFormatError("missing depot line")
    depot_lineno, depot_text = lines[1]
    depot_tokens = depot_text.split()
    if len(depot_tokens) != 3:
        raise InstanceFormatError(f"depot line {depot_lineno} must have 3 fields")
    dx, dy, dr = _parse_floats(depot_tokens, depot_lineno)
    if dr != 0.0:
        raise InstanceFormatError(f"depot radius must be 0 at line {depot_lineno}")

    targets = []
    rest_start = 2
    for idx in range(2, len(lines)):
        k, text = lines[idx]
        tokens = text.split()
        if tokens[0] == DYNAMIC_SECTION:
            break
        rest_start = idx + 1
        if len(tokens) != 3:
            raise InstanceFormatError(f"target line {k} must have 3 fields")
        cx, cy, r = _parse_floats(tokens, k)
        if r < 0:
            raise InstanceFormatError(f"radius < 0 at line {k}")
        targets.append(Disk(Point(cx, cy), r))

    if len(targets) != n:
        raise InstanceFormatError(f"target count mismatch: header says {n}, found {len(targets)}")
    inst = Instance(depot=Point(dx, dy), targets=tuple(targets), id=inst_id)
    return inst, lines[rest_start:]


def read_lines(path: Path) -> List[Tuple[int, str]]:
    """读取非空行，保留原始行号"""
    text = Path(path).read_text(encoding="utf-8")
    return [(i, line.strip()) for i, line in enumerate(text.splitlines(), start=1) if line.strip()]


class InstanceFileService:
    """实例文件存储服务"""

    def __init__(self, base_path: Optional[str] = None):
        """
        初始化实例存储服务

        Args:
            base_path: 相对路径的根目录，默认当前目录
        """
        self.base_path = Path(base_path) if base_path else None

    def _resolve(self, path) -> Path:
        path = Path(path)
        if self.base_path is not None and not path.is_absolute():
            path = self.base_path / path
        return path

    def save(self, path, inst: Instance) -> Path:
        """
        保存实例文件

        Returns:
            Path: 写入的文件路径
        """
        file_path = self._resolve(path)
        file_path.parent.mkdir(parents=True, exist_ok=True)
        file_path.write_text(format_instance(inst), encoding="utf-8")
        instance_logger.info(f"保存实例文件: {file_path} (n={inst.n})")
        return file_path

    def load(self, path) -> Instance:
        """
        读取实例文件

        Raises:
            InstanceFormatError: 文件格式错误
            FileNotFoundError: 文件不存在
        """
        file_path = self._resolve(path)
        inst, rest = parse_instance(read_lines(file_path), inst_id=file_path.stem)
        if rest:
            lineno, text = rest[0]
            raise InstanceFormatError(f"unexpected content at line {lineno}: '{text.split()[0]}'")
        instance_logger.debug(f"读取实例文件: {file_path} (n={inst.n})")
        return inst

    def import_benchmark(self, path) -> Tuple[Instance, float, Point]:
        """
        导入 4 列 `x y z r` 格式的基准实例（尽力而为）

        无法解析为 4 个数字的行被跳过；第一行数据作为仓库，z 列忽略。
        返回归一化后的实例、scale 与 offset。
        """
        file_path = self._resolve(path)
        rows = []
        for lineno, text in read_lines(file_path):
            tokens = text.split()
            if len(tokens) != 4:
                continue
            try:
                rows.append([float(t) for t in tokens])
            except ValueError:
                continue
        if len(rows) < 2:
            raise InstanceFormatError(f"benchmark file {file_path} has fewer than 2 numeric rows")

        data = np.asarray(rows, dtype=np.float64)
        if np.any(data[1:, 3] < 0):
            raise InstanceFormatError(f"radius < 0 in benchmark file {file_path}")
        centers = data[:, :2]
        radii = np.concatenate([[0.0], data[1:, 3]])
        raw = Instance.from_arrays(centers, radii, id=file_path.stem)
        instance_logger.info(f"导入基准实例: {file_path} (n={raw.n})")
        return normalize(raw)


# 全局实例
instance_file_service = InstanceFileService()


def save(path, inst: Instance) -> Path:
    return instance_file_service.save(path, inst)


def load(path) -> Instance:
    return instance_file_service.load(path)
