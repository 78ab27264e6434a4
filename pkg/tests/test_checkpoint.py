"""检查点存储测试"""
import shutil
import tempfile
from pathlib import Path

import pytest
import torch

from app.component.diffcore import adam_step
from app.component.policy import CETSPPolicy
from app.models.configs import PolicyConfig
from app.models.instance import GenConfig
from app.services.checkpoint_service import CHECKPOINT_MAGIC, CheckpointService
from app.services.instance_service import generate
from app.utils.errors import CheckpointError


class TestCheckpointService:
    """检查点存储服务测试类"""

    @pytest.fixture
    def temp_dir(self):
        """创建临时目录"""
        temp_dir = tempfile.mkdtemp()
        yield temp_dir
        shutil.rmtree(temp_dir)

    @pytest.fixture
    def service(self, temp_dir):
        """创建检查点服务"""
        return CheckpointService(base_path=temp_dir)

    @pytest.fixture
    def policy(self):
        """微型策略网络"""
        return CETSPPolicy(PolicyConfig(layers=1, dim=16, heads=2, gamma=4, k_nn=3, seed=7))

    def test_save_and_load(self, service, policy):
        """测试保存后重建的策略参数与解码结果逐位一致"""
        path = service.save(policy, "micro.ckpt", extra={"epoch": 3})
        assert path.exists()
        assert path.read_bytes().startswith(CHECKPOINT_MAGIC.encode())

        loaded, extra = service.load("micro.ckpt")
        assert extra == {"epoch": 3}
        assert loaded.config == policy.config
        for name in policy.params.names():
            assert torch.equal(loaded.params[name], policy.params[name])

        inst = generate(GenConfig(seed=2), 6)
        assert loaded.solve(inst).length == policy.solve(inst).length

    def test_header(self, service, policy):
        """测试文件头记录配置与参数块"""
        service.save(policy, "micro.ckpt")
        header, payload = service.read_header("micro.ckpt")
        assert header["config"]["dim"] == 16
        assert [b["name"] for b in header["blocks"]] == policy.params.names()
        assert len(payload) == 8 * policy.params.num_values()
        assert "optimizer" not in header

    def test_optimizer_state_round_trip(self, service, policy):
        """测试检查点保存 Adam 矩与步数，恢复后下一步更新与不中断时一致"""
        grads = {name: torch.full_like(t, 0.01) for name, t in policy.params.params.items()}
        adam_step(policy.params, grads, lr=1e-3)
        service.save(policy, "micro.ckpt")

        header, payload = service.read_header("micro.ckpt")
        assert header["optimizer"]["step"] == 1
        assert header["optimizer"]["lr"] == 1e-3
        names = [b["name"] for b in header["blocks"]]
        assert names[:len(policy.params)] == policy.params.names()
        assert "adam.m/node.W_Qg" in names and "adam.v/node.W_Qg" in names
        assert len(payload) == 8 * 3 * policy.params.num_values()

        loaded, _ = service.load("micro.ckpt")
        assert loaded.params.step_count == 1
        for name in policy.params.names():
            m0, v0 = policy.params.moments(name)
            m1, v1 = loaded.params.moments(name)
            assert torch.equal(m0, m1)
            assert torch.equal(v0, v1)

        adam_step(policy.params, grads, lr=1e-3)
        adam_step(loaded.params, grads, lr=1e-3)
        for name in policy.params.names():
            torch.testing.assert_close(loaded.params[name].detach(), policy.params[name].detach(),
                                       rtol=0.0, atol=1e-14)

    def test_missing_file(self, service):
        """测试文件不存在"""
        with pytest.raises(CheckpointError):
            service.load("nope.ckpt")

    def test_corrupted_payload(self, service, policy, temp_dir):
        """测试数据区被篡改时校验失败"""
        path = service.save(policy, "micro.ckpt")
        data = bytearray(path.read_bytes())
        data[-1] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="校验和"):
            service.load(path)

    def test_truncated(self, service, policy):
        """测试截断的文件"""
        path = service.save(policy, "micro.ckpt")
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(CheckpointError):
            service.load(path)

    def test_not_a_checkpoint(self, service, temp_dir):
        """测试非检查点文件"""
        path = Path(temp_dir) / "bad.ckpt"
        path.write_text("hello\nworld\n", encoding="utf-8")
        with pytest.raises(CheckpointError, match="不是检查点文件"):
            service.load(path)

    def test_wrong_version(self, service, policy):
        """测试不支持的版本"""
        path = service.save(policy, "micro.ckpt")
        data = path.read_bytes().replace(f"{CHECKPOINT_MAGIC} 1".encode(), f"{CHECKPOINT_MAGIC} 9".encode(), 1)
        path.write_bytes(data)
        with pytest.raises(CheckpointError, match="版本"):
            service.load(path)
