"""SVG 路线渲染"""
from pathlib import Path
from typing import Optional

from loguru import logger

from app.models.instance import Instance
from app.models.route import Route

CANVAS = 600
MARGIN = 30
DEPOT_SIZE = 10


def _project(x: float, y: float, lo: float, span: float):
    """实例坐标 -> 画布坐标（y 轴向上）"""
    scale = (CANVAS - 2 * MARGIN) / span
    return MARGIN + (x - lo) * scale, CANVAS - MARGIN - (y - lo) * scale


def _num(v: float) -> str:
    return f"{v:.3f}"


def svg_text(instance: Instance, route: Optional[Route] = None) -> str:
    """
    生成 SVG 文本：每个目标邻域一个 <circle>，仓库为 <rect>，路线为带闭合边的 <polyline>

    输出只依赖输入，同样的输入得到逐字节相同的文本。
    """
    xs = [instance.depot.x] + [d.center.x for d in instance.targets]
    ys = [instance.depot.y] + [d.center.y for d in instance.targets]
    lo = min(0.0, min(xs), min(ys))
    hi = max(1.0, max(xs), max(ys))
    span = hi - lo
    scale = (CANVAS - 2 * MARGIN) / span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS}" height="{CANVAS}" '
        f'viewBox="0 0 {CANVAS} {CANVAS}">',
        f'<title>{instance.id}</title>',
    ]
    for i, disk in enumerate(instance.targets, start=1):
        cx, cy = _project(disk.center.x, disk.center.y, lo, span)
        parts.append(
            f'<circle id="t{i}" cx="{_num(cx)}" cy="{_num(cy)}" r="{_num(disk.radius * scale)}" '
            f'fill="#4c72b0" fill-opacity="0.2" stroke="#4c72b0" stroke-width="1"/>')

    if route is not None:
        points = list(route.points)
        if route.closed:
            points.append(points[0])
        coords = " ".join(f"{_num(px)},{_num(py)}" for px, py in (_project(p.x, p.y, lo, span) for p in points))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="#c44e52" stroke-width="1.5"/>')

    dx, dy = _project(instance.depot.x, instance.depot.y, lo, span)
    parts.append(
        f'<rect id="depot" x="{_num(dx - DEPOT_SIZE / 2)}" y="{_num(dy - DEPOT_SIZE / 2)}" '
        f'width="{DEPOT_SIZE}" height="{DEPOT_SIZE}" fill="#222222"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_svg(instance: Instance, route: Optional[Route], path) -> Path:
    """
    把实例与可选路线渲染为 SVG 文件

    Raises:
        OSError: 路径不可写
    """
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    file_path.write_text(svg_text(instance, route), encoding="utf-8")
    logger.info(f"写入 SVG: {file_path}")
    return file_path
