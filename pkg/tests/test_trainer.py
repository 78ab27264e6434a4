"""REINFORCE 训练测试"""
from pathlib import Path

import pytest
import torch

from app.component.diffcore import grad_check
from app.component.env import discretize
from app.component.policy import CETSPPolicy
from app.component.trainer import (
    BatchMetrics,
    Trainer,
    plan_batches,
    reinforce_loss,
    shared_baseline_advantage,
)
from app.models.configs import DecodeMode, PolicyConfig, TrainConfig
from app.models.instance import GenConfig
from app.services.checkpoint_service import CheckpointService
from app.services.instance_service import generate_batch
from app.utils.errors import ConfigurationError
from app.utils.helpers import torch_generator

MICRO = dict(layers=1, dim=16, heads=2, gamma=4, k_nn=3, seed=0)


class TestBaseline:
    """共享基线与替代损失测试"""

    def test_advantage_zero_mean(self):
        """测试优势在每个实例内均值为 0"""
        rewards = torch.tensor([[-1.0, -2.0, -3.0], [-4.0, -4.0, -7.0]], dtype=torch.float64)
        adv = shared_baseline_advantage(rewards)
        assert torch.allclose(adv.mean(dim=1), torch.zeros(2, dtype=torch.float64))
        assert adv[0].tolist() == [1.0, 0.0, -1.0]

    def test_single_start_rejected(self):
        """测试每个实例只有一条轨迹时基线退化"""
        with pytest.raises(ConfigurationError):
            shared_baseline_advantage(torch.zeros(3, 1))

    def test_loss_value_and_gradient(self):
        """测试损失数值与对 log p 的梯度"""
        rewards = torch.tensor([[-1.0, -3.0]], dtype=torch.float64)
        log_probs = torch.tensor([[-0.5, -0.7]], dtype=torch.float64, requires_grad=True)
        loss = reinforce_loss(log_probs, rewards)
        # 优势 = [1, -1]
        assert loss.item() == pytest.approx(-(1.0 * -0.5 + -1.0 * -0.7) / 2)
        loss.backward()
        assert log_probs.grad.tolist() == [[-0.5, 0.5]]

    def test_rewards_not_differentiated(self):
        """测试奖励不参与求导"""
        rewards = torch.tensor([[-1.0, -3.0]], dtype=torch.float64, requires_grad=True)
        log_probs = torch.tensor([[-0.5, -0.7]], dtype=torch.float64, requires_grad=True)
        reinforce_loss(log_probs, rewards).backward()
        assert rewards.grad is None


class TestPlanBatches:
    """小批次划分测试"""

    def test_remainder(self):
        """测试最后一个批次取余数"""
        assert plan_batches(10, 4) == [4, 4, 2]
        assert plan_batches(8, 4) == [4, 4]
        assert sum(plan_batches(10000, 64)) == 10000

    def test_invalid(self):
        """测试非法参数"""
        with pytest.raises(ConfigurationError):
            plan_batches(0, 4)


class TestPolicyGradient:
    """策略梯度与中心差分一致"""

    def test_reinforce_gradient_matches_finite_difference(self):
        """测试微型策略上替代损失的梯度"""
        policy = CETSPPolicy(PolicyConfig(**MICRO))
        dinsts = [discretize(inst, 4) for inst in generate_batch(GenConfig(seed=0), 5, 2)]
        traj = policy.rollout(dinsts, DecodeMode.SAMPLE, generator=torch_generator(0))
        actions = [traj.state(r).actions() for r in range(traj.env.rows)]
        rewards = traj.grouped_rewards().detach()

        def surrogate():
            forced = policy.rollout(dinsts, DecodeMode.GREEDY, actions=actions)
            return reinforce_loss(forced.grouped_log_probs(), rewards)

        assert grad_check(surrogate, policy.params, max_coords=60) < 1e-4


class TestTrainer:
    """训练器测试"""

    @pytest.fixture
    def train_config(self, tmp_path):
        """微型训练配置"""
        return TrainConfig(
            epochs=2,
            instances_per_epoch=6,
            batch_size=4,
            sizes=[4, 5],
            eval_every=1,
            eval_size=5,
            eval_count=3,
            seed=3,
            checkpoint_dir=str(tmp_path / "ckpt"),
        )

    def test_train_writes_metrics_and_checkpoints(self, train_config):
        """测试训练生成指标、检查点与评估曲线，且无多起点违例"""
        policy = CETSPPolicy(PolicyConfig(**MICRO))
        before = policy.params["node.W_Qg"].detach().clone()
        seen = []
        result = Trainer(train_config, policy).train(on_epoch=lambda epoch, _: seen.append(epoch))

        assert seen == [0, 1]
        assert len(result.metrics) == 4
        assert [m.batch for m in result.metrics] == [0, 1, 0, 1]
        assert [p.name for p in result.checkpoints] == ["epoch_0000.ckpt", "epoch_0001.ckpt"]
        assert all(p.exists() for p in result.checkpoints)
        assert len(result.eval_lengths) == 2
        assert result.multistart_violations == 0
        assert not torch.equal(before, policy.params["node.W_Qg"].detach())

        metrics_path = Path(train_config.checkpoint_dir) / train_config.metrics_file
        lines = metrics_path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 4
        assert len(lines[0].split(", ")) == 6

    def test_checkpoint_extra(self, train_config):
        """测试检查点记录轮次与优化器步数"""
        policy = CETSPPolicy(PolicyConfig(**MICRO))
        result = Trainer(train_config, policy).train()
        loaded, extra = CheckpointService().load(result.checkpoints[-1])
        assert extra == {"epoch": 1, "step": 4, "seed": 3}
        for name in policy.params.names():
            assert torch.equal(loaded.params[name].detach(), policy.params[name].detach())

    def test_deterministic(self, tmp_path):
        """测试相同种子训练结果一致"""
        def run(sub):
            cfg = TrainConfig(epochs=1, instances_per_epoch=4, batch_size=2, sizes=[4], eval_every=0,
                              seed=5, checkpoint_dir=str(tmp_path / sub))
            policy = CETSPPolicy(PolicyConfig(**MICRO))
            Trainer(cfg, policy).train()
            return policy.params["loc.W_f3"].detach().clone()
        assert torch.equal(run("a"), run("b"))

    def test_metrics_line(self):
        """测试指标行格式"""
        line = BatchMetrics(epoch=1, batch=2, mean_reward=-3.5, loss=0.25, grad_norm=1.0, wall_ms=12.34).to_line()
        assert line == "1, 2, -3.500000, 0.250000, 1.000000, 12.3"

    def test_updates_use_adam_step(self, train_config, monkeypatch):
        """测试每个小批次的参数更新都经过 adam_step，并使用训练配置的超参数"""
        import app.component.trainer as trainer_module

        calls = []
        original = trainer_module.adam_step

        def recording(params, grads=None, **kwargs):
            calls.append(kwargs)
            return original(params, grads, **kwargs)

        monkeypatch.setattr(trainer_module, "adam_step", recording)
        policy = CETSPPolicy(PolicyConfig(**MICRO))
        Trainer(train_config, policy).train()
        assert len(calls) == 4
        assert all(c["lr"] == train_config.lr and c["weight_decay"] == train_config.weight_decay for c in calls)
        assert policy.params.step_count == 4

    def test_resume_keeps_optimizer_state(self, train_config, tmp_path):
        """测试从检查点续训时沿用 Adam 矩与步数"""
        policy = CETSPPolicy(PolicyConfig(**MICRO))
        result = Trainer(train_config, policy).train()
        loaded, _ = CheckpointService().load(result.checkpoints[-1])
        assert loaded.params.step_count == 4
        for name in policy.params.names():
            m0, v0 = policy.params.moments(name)
            m1, v1 = loaded.params.moments(name)
            if m0 is None:
                assert m1 is None
                continue
            assert torch.equal(m0, m1)
            assert torch.equal(v0, v1)

        resume_cfg = train_config.model_copy(update={"epochs": 1, "checkpoint_dir": str(tmp_path / "resume")})
        trainer = Trainer(resume_cfg, loaded)
        assert loaded.params.step_count == 4
        trainer.train()
        assert loaded.params.step_count == 6
