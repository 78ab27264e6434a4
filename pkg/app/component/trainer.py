"""
定制 REINFORCE 训练

每个小批次：抽取问题规模 κ 与半径类型 λ，生成 B̃ 个实例，每个实例解码 κ 条
多起点轨迹；以同一实例多条轨迹的平均奖励为共享基线计算优势，
全局梯度范数裁剪后做一步 AdamW 更新。每轮结束保存检查点。
"""
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import torch
from loguru import logger
from tqdm import tqdm

from app.component.diffcore import ParamBlock, adam_step
from app.component.env import discretize
from app.component.policy import CETSPPolicy, Trajectories
from app.models.configs import DecodeMode, TrainConfig
from app.models.instance import GenConfig, RadiusConfig
from app.services.checkpoint_service import CheckpointService
from app.services.instance_service import generate, generate_batch
from app.utils.errors import ConfigurationError, NumericalError
from app.utils.helpers import apply_worker_limit, torch_generator

trainer_logger = logger.bind(component="trainer")


def plan_batches(total: int, batch_size: int) -> List[int]:
    """每轮的小批次大小序列：B̃ = min(𝔻 − D, B)"""
    if total < 1 or batch_size < 1:
        raise ConfigurationError(f"实例数与批大小必须为正: total={total}, batch_size={batch_size}")
    sizes, done = [], 0
    while done < total:
        b = min(total - done, batch_size)
        sizes.append(b)
        done += b
    return sizes


def shared_baseline_advantage(rewards: torch.Tensor) -> torch.Tensor:
    """
    共享基线优势：每个实例的奖励减去该实例多起点轨迹的平均奖励

    Args:
        rewards: (B, S) 奖励

    Raises:
        ConfigurationError: S < 2（基线退化）
    """
    if rewards.dim() != 2 or rewards.shape[1] < 2:
        raise ConfigurationError(f"共享基线至少需要每个实例两条轨迹，当前形状 {tuple(rewards.shape)}")
    return rewards - rewards.mean(dim=1, keepdim=True)


def reinforce_loss(log_probs: torch.Tensor, rewards: torch.Tensor) -> torch.Tensor:
    """
    替代损失 −(1/BS) ΣΣ advantage · log p

    Args:
        log_probs: (B, S) 轨迹对数概率
        rewards: (B, S) 奖励（不参与求导）
    """
    advantage = shared_baseline_advantage(rewards.detach())
    return -(advantage * log_probs).mean()


def reinforce_gradient(trajectories: Trajectories, params: ParamBlock) -> torch.Tensor:
    """
    计算 REINFORCE 梯度并累积到参数的 .grad 上

    Returns:
        torch.Tensor: 替代损失

    Raises:
        NumericalError: 损失非有限
    """
    loss = reinforce_loss(trajectories.grouped_log_probs(), trajectories.grouped_rewards())
    if not torch.isfinite(loss):
        raise NumericalError(f"训练损失非有限: {loss.item()}")
    params.zero_grad()
    loss.backward()
    return loss


@dataclass
class BatchMetrics:
    """单个小批次的指标"""
    epoch: int
    batch: int
    mean_reward: float
    loss: float
    grad_norm: float
    wall_ms: float

    def to_line(self) -> str:
        return (f"{self.epoch}, {self.batch}, {self.mean_reward:.6f}, {self.loss:.6f}, "
                f"{self.grad_norm:.6f}, {self.wall_ms:.1f}")


@dataclass
class TrainResult:
    """训练结果"""
    metrics: List[BatchMetrics] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    eval_lengths: List[float] = field(default_factory=list)
    multistart_violations: int = 0


class Trainer:
    """REINFORCE 训练器"""

    def __init__(self, config: TrainConfig, policy: CETSPPolicy,
                 checkpoints: Optional[CheckpointService] = None):
        """
        初始化训练器

        Args:
            config: 训练配置
            policy: 待训练的策略网络
            checkpoints: 检查点服务，默认写入 config.checkpoint_dir
        """
        self.config = config
        self.policy = policy
        self.checkpoints = checkpoints or CheckpointService(config.checkpoint_dir)
        self.generator = torch_generator(config.seed)
        # 从检查点恢复的策略沿用已有的 Adam 矩与步数
        if self.policy.params.optimizer is None:
            self.policy.params.configure_optimizer(lr=config.lr, weight_decay=config.weight_decay)
        apply_worker_limit()
        self.metrics_path = Path(config.checkpoint_dir) / config.metrics_file
        self._violations = 0

    def _gen_config(self, radius_kind) -> GenConfig:
        return GenConfig(
            sizes=list(self.config.sizes),
            distribution=self.config.distribution,
            radius=RadiusConfig(kind=radius_kind),
            seed=self.config.seed,
        )

    def eval_set(self):
        """固定的评估集（均匀分布、随机半径）"""
        cfg = GenConfig(sizes=[self.config.eval_size], seed=self.config.seed + 1)
        return generate_batch(cfg, self.config.eval_size, self.config.eval_count)

    def greedy_mean_length(self, instances) -> float:
        """评估集上贪心多起点解码的平均长度"""
        with torch.no_grad():
            dinsts = [discretize(inst, self.policy.config.gamma) for inst in instances]
            traj = self.policy.rollout(dinsts, DecodeMode.GREEDY)
        best = traj.lengths().reshape(traj.n_instances, traj.n_starts).min(axis=1)
        return float(best.mean())

    def train_batch(self, epoch: int, batch: int, instances) -> BatchMetrics:
        """在一个小批次上做一次策略梯度更新"""
        start = time.perf_counter()
        dinsts = [discretize(inst, self.policy.config.gamma) for inst in instances]
        traj = self.policy.rollout(dinsts, DecodeMode.SAMPLE, generator=self.generator)
        violations = traj.multistart_violations()
        if violations:
            trainer_logger.error(f"第 {epoch} 轮第 {batch} 批出现 {violations} 条第二节点重复的轨迹")
            self._violations += violations

        loss = reinforce_gradient(traj, self.policy.params)
        grad_norm = torch.nn.utils.clip_grad_norm_(self.policy.params.tensors(), self.config.max_grad_norm)
        if not torch.isfinite(grad_norm):
            raise NumericalError(f"梯度范数非有限 (epoch={epoch}, batch={batch})")
        adam_step(self.policy.params, lr=self.config.lr, weight_decay=self.config.weight_decay)

        return BatchMetrics(
            epoch=epoch,
            batch=batch,
            mean_reward=float(traj.rewards.mean().item()),
            loss=float(loss.item()),
            grad_norm=float(grad_norm.item()),
            wall_ms=(time.perf_counter() - start) * 1000.0,
        )

    def train(self, on_epoch: Optional[Callable[[int, TrainResult], None]] = None) -> TrainResult:
        """
        按配置训练 E 轮

        Args:
            on_epoch: 每轮结束后的回调

        Returns:
            TrainResult: 指标、检查点路径、评估曲线与多起点约束违例数
        """
        cfg = self.config
        result = TrainResult()
        self._violations = 0
        self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
        eval_instances = self.eval_set() if cfg.eval_every else []
        batches = plan_batches(cfg.instances_per_epoch, cfg.batch_size)

        trainer_logger.info(
            f"开始训练: epochs={cfg.epochs}, 𝔻={cfg.instances_per_epoch}, B={cfg.batch_size}, "
            f"Λ={cfg.sizes}, 半径类型={[k.value for k in cfg.radius_types]}, seed={cfg.seed}")

        for epoch in range(cfg.epochs):
            rng = np.random.default_rng([cfg.seed, epoch])
            progress = tqdm(enumerate(batches), total=len(batches), desc=f"epoch {epoch}", leave=False)
            offset = 0
            with self.metrics_path.open("a", encoding="utf-8") as metrics_file:
                for batch, size in progress:
                    kappa = int(cfg.sizes[rng.integers(len(cfg.sizes))])
                    radius_kind = cfg.radius_types[rng.integers(len(cfg.radius_types))]
                    gen_cfg = self._gen_config(radius_kind)
                    first = epoch * cfg.instances_per_epoch + offset
                    instances = [generate(gen_cfg, kappa, index=first + i) for i in range(size)]
                    offset += size

                    metrics = self.train_batch(epoch, batch, instances)
                    result.metrics.append(metrics)
                    metrics_file.write(metrics.to_line() + "\n")
                    progress.set_description(
                        f"epoch {epoch} | κ={kappa} {radius_kind.value} | reward {metrics.mean_reward:.4f} "
                        f"| loss {metrics.loss:.4f}")

            path = self.checkpoints.save(self.policy, f"epoch_{epoch:04d}.ckpt",
                                         extra={"epoch": epoch, "step": self.policy.params.step_count,
                                                "seed": cfg.seed})
            result.checkpoints.append(path)

            if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
                length = self.greedy_mean_length(eval_instances)
                result.eval_lengths.append(length)
                trainer_logger.info(f"第 {epoch} 轮评估: 贪心多起点平均长度 {length:.4f}")

            result.multistart_violations = self._violations
            if on_epoch is not None:
                on_epoch(epoch, result)

        trainer_logger.info(f"训练完成: {len(result.metrics)} 个批次, 多起点约束违例 {self._violations} 次")
        return result
