"""评估报告模型"""
import json
from typing import Dict, List

from pydantic import BaseModel, Field

from app.utils.helpers import format_gap


class ReportRow(BaseModel):
    """一个分组内一种方法的评估结果"""
    group: str = Field(..., description="分组名称，如 n20-random")
    method: str = Field(..., description="方法名称")
    objective: float = Field(..., description="平均目标值 Obj.")
    gap: float = Field(default=0.0, ge=0, description="相对组内最优方法的差距（比例）")
    time: float = Field(default=0.0, ge=0, description="总耗时（秒）")
    count: int = Field(default=0, ge=0, description="实例数量")
    objectives: List[float] = Field(default_factory=list, description="逐实例目标值")


class EvalReport(BaseModel):
    """评估报告：各分组、各方法的 Obj. / Gap / Time"""
    rows: List[ReportRow] = Field(default_factory=list)
    seed: int = Field(default=0, description="评估使用的随机种子")

    @classmethod
    def from_results(cls, results: Dict[str, Dict[str, List[float]]], times: Dict[str, Dict[str, float]],
                     seed: int = 0) -> "EvalReport":
        """
        由逐实例结果构造报告，Gap 相对组内平均目标值最小的方法计算

        Args:
            results: 分组 -> 方法 -> 逐实例目标值
            times: 分组 -> 方法 -> 总耗时
        """
        rows = []
        for group, methods in results.items():
            means = {m: sum(v) / len(v) for m, v in methods.items()}
            best = min(means.values())
            for method, values in methods.items():
                gap = (means[method] - best) / best if best > 0 else 0.0
                rows.append(ReportRow(
                    group=group,
                    method=method,
                    objective=means[method],
                    gap=max(0.0, gap),
                    time=times.get(group, {}).get(method, 0.0),
                    count=len(values),
                    objectives=list(values),
                ))
        return cls(rows=rows, seed=seed)

    def row(self, group: str, method: str) -> ReportRow:
        for r in self.rows:
            if r.group == group and r.method == method:
                return r
        raise KeyError(f"{group}/{method}")

    def render_table(self) -> str:
        """对齐的文本表格"""
        header = f"{'Group':<16} {'Method':<16} {'Obj.':>10} {'Gap':>8} {'Time':>10}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(f"{r.group:<16} {r.method:<16} {r.objective:>10.4f} {format_gap(r.gap):>8} {r.time:>9.2f}s")
        lines.append(f"seed={self.seed}")
        return "\n".join(lines)

    def to_json_rows(self) -> str:
        """机器可读的逐行 JSON（不含逐实例明细）"""
        return "\n".join(
            json.dumps({"group": r.group, "method": r.method, "Obj.": r.objective,
                        "Gap": r.gap, "Time": r.time, "count": r.count, "seed": self.seed})
            for r in self.rows
        )
