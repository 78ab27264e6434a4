"""
双解码器注意力策略网络

编码器：坐标/半径线性投影拼接后，经过若干层 pre-norm 注意力层
（RMSNorm → MHA → 残差，RMSNorm → 门控前馈 → 残差）。
node-decoder：图嵌入与上一节点嵌入构成上下文查询，经带掩码 MHA 与
tanh 裁剪兼容层给出节点分布。
loc-decoder：选中节点嵌入与上一位置构成查询，以 k 近邻子图为键值，
经三层 MLP 给出 γ 个候选航点上的分布。
"""
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger

from app.component.diffcore import (
    ParamBlock,
    affine,
    attention,
    gated_ff,
    instance_norm,
    masked_log_softmax,
    merge_heads,
    mha,
    plain_ff,
    rmsnorm,
    split_heads,
    swiglu_ff,
)
from app.component.env import BatchEnv, DiscretizedInstance, EnvState, discretize
from app.models.configs import DecodeMode, EncoderVariant, FFKind, PolicyConfig
from app.models.geometry import Point
from app.models.instance import Instance
from app.models.route import Route
from app.services.instance_service import augment8, restore_points
from app.utils.errors import ConfigurationError
from app.utils.helpers import default_dtype, torch_generator

policy_logger = logger.bind(component="policy")


def knn_indices(inst: Instance, node: int, k: int) -> List[int]:
    """
    按圆心欧氏距离取 node 的 k 个最近邻（仓库也可入选，不含 node 自身）

    距离相同时下标小者优先。

    Raises:
        ConfigurationError: k 不在 [1, n] 内
    """
    if k < 1 or k > inst.n:
        raise ConfigurationError(f"k 必须在 [1, {inst.n}] 内，当前为 {k}")
    centers = inst.centers()
    dist = np.linalg.norm(centers - centers[node], axis=1)
    order = np.argsort(dist, kind="stable")
    return [int(i) for i in order if i != node][:k]


def knn_table(inst: Instance, k: int) -> np.ndarray:
    """(n+1, k) 近邻表，第 i 行为 knn_indices(inst, i, k)"""
    return np.asarray([knn_indices(inst, i, k) for i in range(inst.n + 1)], dtype=np.int64)


@dataclass
class Embeddings:
    """编码结果：nodes 形状 (B, n+1, d)"""
    nodes: torch.Tensor
    instances: List[Instance]

    @property
    def graph(self) -> torch.Tensor:
        """图嵌入 = 节点嵌入的算术平均，形状 (B, d)"""
        return self.nodes.mean(dim=-2)


@dataclass
class DecodeContext:
    """一次 rollout 内按行展开并缓存的解码器输入"""
    rows: torch.Tensor             # (R,) 行 -> 实例下标
    nodes: torch.Tensor            # (R, n+1, d)
    graph_query: torch.Tensor      # (R, d)
    keys: torch.Tensor             # (R, H, n+1, d_k)
    values: torch.Tensor           # (R, H, n+1, d_k)
    knn: torch.Tensor              # (R, n+1, k)


@dataclass
class Trajectories:
    """一批完整轨迹"""
    env: BatchEnv
    log_probs: torch.Tensor                        # (R,) 轨迹对数概率
    rewards: torch.Tensor                          # (R,)
    node_log_probs: List[torch.Tensor] = field(default_factory=list)
    loc_log_probs: List[torch.Tensor] = field(default_factory=list)

    @property
    def n_instances(self) -> int:
        return len(self.env.dinsts)

    @property
    def n_starts(self) -> int:
        return self.env.n_starts

    def grouped_rewards(self) -> torch.Tensor:
        """(B, n_starts) 奖励"""
        return self.rewards.reshape(self.n_instances, self.n_starts)

    def grouped_log_probs(self) -> torch.Tensor:
        return self.log_probs.reshape(self.n_instances, self.n_starts)

    def lengths(self) -> np.ndarray:
        return self.env.length.copy()

    def state(self, row: int) -> EnvState:
        return self.env.to_state(row)

    def multistart_violations(self) -> int:
        """第二节点重复的行数（不计 duplicate_start 标记的行）"""
        second = self.env.second_nodes().reshape(self.n_instances, self.n_starts)
        dup = self.env.duplicate_start.reshape(self.n_instances, self.n_starts)
        violations = 0
        for b in range(self.n_instances):
            seen = set()
            for s in range(self.n_starts):
                if dup[b, s]:
                    continue
                if second[b, s] in seen:
                    violations += 1
                seen.add(int(second[b, s]))
        return violations


@dataclass
class PolicySolution:
    """策略求解结果（已映射回原坐标系）"""
    route: Route
    length: float
    transform: int
    row: int


class CETSPPolicy:
    """双解码器策略网络"""

    def __init__(self, config: Optional[PolicyConfig] = None, params: Optional[ParamBlock] = None):
        self.config = config or PolicyConfig()
        self.dtype = default_dtype()
        if params is None:
            params = ParamBlock(dtype=self.dtype, generator=torch_generator(self.config.seed))
            self._build(params)
        self.params = params

    # ==================== 参数 ====================

    def _build(self, p: ParamBlock):
        cfg = self.config
        d = cfg.dim
        p.add("enc.W_o", (2, d // 2))
        p.add("enc.W_r", (1, d // 2))
        for layer in range(cfg.layers):
            pre = f"enc.{layer}."
            if cfg.encoder_variant == EncoderVariant.ADAPTED:
                p.add(pre + "attn_gain", (d,), init="ones")
            for name in ("W_Q", "W_K", "W_V", "W_O"):
                p.add(pre + name, (d, d))
            if cfg.encoder_variant == EncoderVariant.ADAPTED:
                p.add(pre + "ff_gain", (d,), init="ones")
            self._build_ff(p, pre, d)

        for name in ("W_Qg", "W_Ql", "W_Kc", "W_Vc", "W_Oc"):
            p.add("node." + name, (d, d))

        p.add("loc.W_Qn", (d, d))
        p.add("loc.W_Qy", (2, d))
        for name in ("W_Kl", "W_Vl", "W_Ol"):
            p.add("loc." + name, (d, d))
        p.add("loc.W_f1", (d, d))
        p.add("loc.b_f1", (d,), fan_in=d)
        p.add("loc.W_f2", (d, d // 2))
        p.add("loc.b_f2", (d // 2,), fan_in=d)
        p.add("loc.W_f3", (d // 2, cfg.gamma))
        p.add("loc.b_f3", (cfg.gamma,), fan_in=d // 2)

    def _build_ff(self, p: ParamBlock, pre: str, d: int):
        kind = self.config.ff_kind
        if kind == FFKind.GATED:
            p.add(pre + "ff.W1", (d, d))
            p.add(pre + "ff.b1", (d,), fan_in=d)
            p.add(pre + "ff.W2", (d, d * d))
            p.add(pre + "ff.b2", (d * d,), fan_in=d)
        elif kind == FFKind.SWIGLU:
            hidden = 2 * d
            p.add(pre + "ff.W1", (d, hidden))
            p.add(pre + "ff.b1", (hidden,), fan_in=d)
            p.add(pre + "ff.W2", (d, hidden))
            p.add(pre + "ff.b2", (hidden,), fan_in=d)
            p.add(pre + "ff.W3", (hidden, d))
            p.add(pre + "ff.b3", (d,), fan_in=hidden)
        else:
            hidden = 4 * d
            p.add(pre + "ff.W1", (d, hidden))
            p.add(pre + "ff.b1", (hidden,), fan_in=d)
            p.add(pre + "ff.W2", (hidden, d))
            p.add(pre + "ff.b2", (d,), fan_in=hidden)

    def _ff(self, x: torch.Tensor, pre: str) -> torch.Tensor:
        p = self.params
        kind = self.config.ff_kind
        if kind == FFKind.GATED:
            return gated_ff(x, p[pre + "ff.W1"], p[pre + "ff.b1"], p[pre + "ff.W2"], p[pre + "ff.b2"])
        if kind == FFKind.SWIGLU:
            return swiglu_ff(x, p[pre + "ff.W1"], p[pre + "ff.b1"], p[pre + "ff.W2"], p[pre + "ff.b2"],
                             p[pre + "ff.W3"], p[pre + "ff.b3"])
        return plain_ff(x, p[pre + "ff.W1"], p[pre + "ff.b1"], p[pre + "ff.W2"], p[pre + "ff.b2"])

    def _k(self, n: int) -> int:
        return min(self.config.k_nn, n)

    # ==================== 编码器 ====================

    def encode(self, insts: Union[Instance, Sequence[Instance]]) -> Embeddings:
        """
        编码一批同规模实例

        Returns:
            Embeddings: 节点嵌入 (B, n+1, d)
        """
        insts = [insts] if isinstance(insts, Instance) else list(insts)
        if len({inst.n for inst in insts}) != 1:
            raise ConfigurationError("同一批次内实例规模必须一致")
        cfg, p = self.config, self.params
        coords = torch.as_tensor(np.stack([inst.centers() for inst in insts]), dtype=self.dtype)
        radii = torch.as_tensor(np.stack([inst.radii() for inst in insts]), dtype=self.dtype).unsqueeze(-1)

        h = torch.cat([affine(coords, p["enc.W_o"]), affine(radii, p["enc.W_r"])], dim=-1)
        for layer in range(cfg.layers):
            pre = f"enc.{layer}."
            weights = (p[pre + "W_Q"], p[pre + "W_K"], p[pre + "W_V"], p[pre + "W_O"])
            if cfg.encoder_variant == EncoderVariant.ADAPTED:
                x = rmsnorm(h, p[pre + "attn_gain"])
                h = h + mha(x, x, x, *weights, heads=cfg.heads)
                x = rmsnorm(h, p[pre + "ff_gain"])
                h = h + self._ff(x, pre)
            else:
                h = instance_norm(h + mha(h, h, h, *weights, heads=cfg.heads))
                h = instance_norm(h + self._ff(h, pre))
        return Embeddings(nodes=h, instances=insts)

    # ==================== 解码器 ====================

    def context(self, emb: Embeddings, n_starts: int = 1) -> DecodeContext:
        """按行展开编码结果：行 r 对应实例 r // n_starts"""
        p, cfg = self.params, self.config
        batch = emb.nodes.shape[0]
        n = emb.instances[0].n
        rows = torch.arange(batch).repeat_interleave(n_starts)
        nodes = emb.nodes.index_select(0, rows)
        graph_query = affine(emb.graph, p["node.W_Qg"]).index_select(0, rows)
        keys = split_heads(affine(emb.nodes, p["node.W_Kc"]), cfg.heads).index_select(0, rows)
        values = split_heads(affine(emb.nodes, p["node.W_Vc"]), cfg.heads).index_select(0, rows)
        table = np.stack([knn_table(inst, self._k(n)) for inst in emb.instances])
        knn = torch.as_tensor(table).index_select(0, rows)
        return DecodeContext(rows=rows, nodes=nodes, graph_query=graph_query,
                             keys=keys, values=values, knn=knn)

    def node_log_probs(self, ctx: DecodeContext, last_nodes: torch.Tensor, mask: torch.Tensor,
                       return_logits: bool = False):
        """
        node-decoder 一步

        Args:
            ctx: 解码上下文
            last_nodes: (R,) 上一节点
            mask: (R, n+1) 布尔可行掩码

        Returns:
            (R, n+1) 对数概率；return_logits 时同时返回裁剪前掩码的 logits
        """
        p, cfg = self.params, self.config
        ar = torch.arange(ctx.nodes.shape[0])
        h_last = ctx.nodes[ar, last_nodes]
        query = ctx.graph_query + affine(h_last, p["node.W_Ql"])
        q = split_heads(query.unsqueeze(-2), cfg.heads)                          # (R, H, 1, d_k)
        z = attention(q, ctx.keys, ctx.values, mask.unsqueeze(-2).unsqueeze(-3))
        h_c = affine(merge_heads(z), p["node.W_Oc"]).squeeze(-2)                 # (R, d)
        compat = (ctx.nodes @ h_c.unsqueeze(-1)).squeeze(-1) / math.sqrt(cfg.head_dim)
        logits = cfg.clip * torch.tanh(compat)
        log_probs = masked_log_softmax(logits, mask)
        return (log_probs, logits) if return_logits else log_probs

    def loc_log_probs(self, ctx: DecodeContext, rows: torch.Tensor, selected: torch.Tensor,
                      prev_xy: torch.Tensor) -> torch.Tensor:
        """
        loc-decoder 一步

        Args:
            ctx: 解码上下文
            rows: (R',) 参与计算的行
            selected: (R',) 选中节点（不能是仓库）
            prev_xy: (R', 2) 上一位置坐标

        Returns:
            (R', γ) 对数概率
        """
        if bool((selected == 0).any()):
            raise ConfigurationError("loc-decoder 不接受仓库作为选中节点")
        p, cfg = self.params, self.config
        nodes = ctx.nodes.index_select(0, rows)
        ar = torch.arange(rows.shape[0])
        h_sel = nodes[ar, selected]                                              # (R', d)
        query = affine(h_sel, p["loc.W_Qn"]) + affine(prev_xy, p["loc.W_Qy"])
        if cfg.use_knn:
            neighbours = ctx.knn.index_select(0, rows)[ar, selected]              # (R', k)
            kv = nodes[ar.unsqueeze(-1), neighbours]                              # (R', k, d)
        else:
            kv = h_sel.unsqueeze(-2)
        q = split_heads(query.unsqueeze(-2), cfg.heads)
        k = split_heads(affine(kv, p["loc.W_Kl"]), cfg.heads)
        v = split_heads(affine(kv, p["loc.W_Vl"]), cfg.heads)
        h_l = affine(merge_heads(attention(q, k, v)), p["loc.W_Ol"]).squeeze(-2)
        x = F.silu(affine(h_l, p["loc.W_f1"], p["loc.b_f1"]))
        x = F.silu(affine(x, p["loc.W_f2"], p["loc.b_f2"]))
        logits = affine(x, p["loc.W_f3"], p["loc.b_f3"])
        return masked_log_softmax(logits, torch.ones_like(logits, dtype=torch.bool))

    def node_decode_step(self, emb: Embeddings, last_node: int, mask: np.ndarray) -> torch.Tensor:
        """单实例 node-decoder：返回长度 n+1 的概率向量"""
        ctx = self.context(emb, 1)
        mask_t = torch.as_tensor(np.asarray(mask, dtype=bool)).unsqueeze(0)
        log_probs = self.node_log_probs(ctx, torch.tensor([int(last_node)]), mask_t)
        return log_probs.exp()[0]

    def loc_decode_step(self, emb: Embeddings, selected_node: int, prev_location: Point) -> torch.Tensor:
        """单实例 loc-decoder：返回长度 γ 的概率向量"""
        ctx = self.context(emb, 1)
        prev = torch.tensor([[prev_location.x, prev_location.y]], dtype=self.dtype)
        log_probs = self.loc_log_probs(ctx, torch.tensor([0]), torch.tensor([int(selected_node)]), prev)
        return log_probs.exp()[0]

    @staticmethod
    def _select(log_probs: torch.Tensor, mode: DecodeMode, generator: Optional[torch.Generator]) -> torch.Tensor:
        if mode == DecodeMode.GREEDY:
            return torch.argmax(log_probs.detach(), dim=-1)
        probs = log_probs.detach().exp()
        return torch.multinomial(probs, 1, generator=generator).squeeze(-1)

    @staticmethod
    def _given_actions(actions, t: int, rows: int):
        if len(actions) != rows:
            raise ConfigurationError(f"给定动作序列数 {len(actions)} 与轨迹行数 {rows} 不一致")
        nodes = torch.zeros(rows, dtype=torch.long)
        waypoints = torch.zeros(rows, dtype=torch.long)
        for r, seq in enumerate(actions):
            if t < len(seq):
                nodes[r], waypoints[r] = int(seq[t][0]), int(seq[t][1])
        return nodes, waypoints

    # ==================== rollout ====================

    def rollout(self, dinsts: Union[DiscretizedInstance, Sequence[DiscretizedInstance]],
                mode: Optional[Union[DecodeMode, str]] = None, n_starts: Optional[int] = None,
                generator: Optional[torch.Generator] = None,
                actions: Optional[Sequence[Sequence[Tuple[int, int]]]] = None) -> Trajectories:
        """
        在一批同规模离散化实例上做多起点解码

        第一步（仓库之后）强制为各轨迹分配的第二节点，不计节点对数概率，
        但 loc-decoder 仍按分布选择航点并计入对数概率。

        Args:
            dinsts: 离散化实例
            mode: sample / greedy，默认取配置
            n_starts: 每个实例的轨迹数，默认 n
            generator: 采样随机数发生器
            actions: 每行给定的动作序列（teacher forcing），用于对固定轨迹求对数概率

        Returns:
            Trajectories
        """
        dinsts = [dinsts] if isinstance(dinsts, DiscretizedInstance) else list(dinsts)
        mode = DecodeMode(mode or self.config.decode_mode)
        if any(d.gamma != self.config.gamma for d in dinsts):
            raise ConfigurationError(f"实例离散化 gamma 与策略配置 gamma={self.config.gamma} 不一致")
        n_starts = n_starts or dinsts[0].n

        env = BatchEnv(dinsts, n_starts)
        emb = self.encode([d.base for d in dinsts])
        ctx = self.context(emb, n_starts)
        rows = env.rows
        zeros = torch.zeros(rows, dtype=self.dtype)
        total = zeros
        node_steps, loc_steps = [], []

        while not env.all_done:
            active = torch.as_tensor(~env.done)
            mask = torch.as_tensor(env.mask())
            prev_xy = torch.as_tensor(env.last_point, dtype=self.dtype)
            given = self._given_actions(actions, env.steps, rows) if actions is not None else None
            if env.steps == 0:
                nodes = torch.as_tensor(env.forced_second) if given is None else given[0]
                node_lp = zeros
            else:
                last = torch.as_tensor([trail[-1] for trail in env.nodes])
                log_probs = self.node_log_probs(ctx, last, mask)
                nodes = self._select(log_probs, mode, generator) if given is None else given[0]
                node_lp = torch.where(active, log_probs.gather(1, nodes.unsqueeze(1)).squeeze(1), zeros)

            waypoints = torch.zeros(rows, dtype=torch.long)
            loc_lp = zeros
            need_loc = active & (nodes != 0)
            if bool(need_loc.any()):
                idx = torch.nonzero(need_loc).squeeze(1)
                log_probs = self.loc_log_probs(ctx, idx, nodes[idx], prev_xy[idx])
                choice = self._select(log_probs, mode, generator) if given is None else given[1][idx]
                waypoints[idx] = choice
                picked = log_probs.gather(1, choice.unsqueeze(1)).squeeze(1)
                loc_lp = zeros.index_put((idx,), picked)

            env.step(nodes.numpy(), waypoints.numpy())
            total = total + node_lp + loc_lp
            node_steps.append(node_lp)
            loc_steps.append(loc_lp)

        rewards = torch.as_tensor(env.rewards(), dtype=self.dtype)
        return Trajectories(env=env, log_probs=total, rewards=rewards,
                            node_log_probs=node_steps, loc_log_probs=loc_steps)

    # ==================== 推理 ====================

    def solve(self, inst: Instance, aug: bool = False, n_starts: Optional[int] = None) -> PolicySolution:
        """
        贪心多起点求解，可选 ×8 增强；返回映射回原坐标系的最优路线

        各对称实例分别解码，恒等变换的结果与不增强时逐位一致。
        """
        candidates = augment8(inst) if aug else [inst]
        n_starts = n_starts or inst.n
        best: Optional[PolicySolution] = None
        with torch.no_grad():
            for k, candidate in enumerate(candidates):
                traj = self.rollout(discretize(candidate, self.config.gamma), DecodeMode.GREEDY, n_starts)
                lengths = traj.lengths()
                row = int(np.argmin(lengths))
                if best is not None and not lengths[row] < best.length:
                    continue
                state = traj.state(row)
                points = list(state.waypoints[:-1])
                indices = state.waypoint_indices[:-1] if k == 0 else None
                if k != 0:
                    points = restore_points(points, k)
                route = Route(nodes=state.nodes[:-1], points=points, waypoint_indices=indices, closed=True)
                best = PolicySolution(route=route, length=float(lengths[row]), transform=k, row=row)
        return best
