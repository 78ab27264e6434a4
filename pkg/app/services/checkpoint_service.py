"""
模型检查点存储服务

文件格式：
    第 1 行  CETSP-CKPT <version>
    第 2 行  单行 JSON 头：version / config / blocks[{name, shape}] / payload_bytes / sha256 / extra
             以及可选的 optimizer（step / lr / betas / eps / weight_decay）
    其后    按 blocks 顺序排列的小端 float64 原始数据；参数块之后是 adam.m/、adam.v/ 前缀的矩
"""
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch
from loguru import logger
from pydantic import ValidationError

from app.component.diffcore import MOMENT_PREFIX_M, MOMENT_PREFIX_V
from app.component.policy import CETSPPolicy
from app.models.configs import PolicyConfig
from app.utils.errors import CheckpointError

CHECKPOINT_MAGIC = "CETSP-CKPT"
CHECKPOINT_VERSION = 1


class CheckpointService:
    """检查点存储服务"""

    def __init__(self, base_path: Optional[str] = None):
        """
        初始化检查点存储服务

        Args:
            base_path: 相对路径的根目录，默认当前目录
        """
        self.base_path = Path(base_path) if base_path else None

    def _resolve(self, path) -> Path:
        path = Path(path)
        if self.base_path is not None and not path.is_absolute():
            path = self.base_path / path
        return path

    def save(self, policy: CETSPPolicy, path, extra: Optional[Dict[str, Any]] = None) -> Path:
        """
        保存策略参数

        Args:
            policy: 策略网络
            path: 文件路径
            extra: 附加信息（如 epoch、优化器步数），写入 JSON 头

        Returns:
            Path: 写入的文件路径
        """
        file_path = self._resolve(path)
        file_path.parent.mkdir(parents=True, exist_ok=True)

        optimizer, moments = policy.params.optimizer_state()
        tensors = list(policy.params.params.items()) + list(moments.items())
        blocks, chunks = [], []
        for name, tensor in tensors:
            blocks.append({"name": name, "shape": list(tensor.shape)})
            chunks.append(tensor.detach().to(torch.float64).cpu().numpy().astype("<f8").tobytes())
        payload = b"".join(chunks)
        header = {
            "version": CHECKPOINT_VERSION,
            "config": policy.config.model_dump(mode="json"),
            "blocks": blocks,
            "payload_bytes": len(payload),
            "sha256": hashlib.sha256(payload).hexdigest(),
            "extra": extra or {},
        }
        if optimizer:
            header["optimizer"] = optimizer
        head = f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n{json.dumps(header, sort_keys=True)}\n".encode("utf-8")
        file_path.write_bytes(head + payload)
        logger.info(f"保存检查点: {file_path} (参数块={len(blocks)}, 字节数={len(payload)})")
        return file_path

    def read_header(self, path) -> Tuple[Dict[str, Any], bytes]:
        """读取并校验文件头与数据区"""
        file_path = self._resolve(path)
        if not file_path.exists():
            raise CheckpointError(f"检查点文件不存在: {file_path}")
        data = file_path.read_bytes()
        try:
            first = data.index(b"\n")
            second = data.index(b"\n", first + 1)
        except ValueError:
            raise CheckpointError(f"检查点文件头不完整: {file_path}")

        magic = data[:first].decode("utf-8", errors="replace").split()
        if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"不是检查点文件: {file_path}")
        if magic[1] != str(CHECKPOINT_VERSION):
            raise CheckpointError(f"不支持的检查点版本: {magic[1]}")
        try:
            header = json.loads(data[first + 1:second].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"检查点 JSON 头无法解析: {e}")

        payload = data[second + 1:]
        if len(payload) != header.get("payload_bytes"):
            raise CheckpointError(f"检查点数据长度不符: {len(payload)} != {header.get('payload_bytes')}")
        if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
            raise CheckpointError("检查点校验和不匹配")
        return header, payload

    def load(self, path) -> Tuple[CETSPPolicy, Dict[str, Any]]:
        """
        读取检查点并重建策略网络

        Returns:
            Tuple[CETSPPolicy, Dict]: 策略网络与附加信息

        Raises:
            CheckpointError: 魔数、版本、长度、校验和或形状不匹配
        """
        header, payload = self.read_header(path)
        try:
            config = PolicyConfig(**header["config"])
        except (KeyError, ValidationError) as e:
            raise CheckpointError(f"检查点中的策略配置无效: {e}")

        policy = CETSPPolicy(config)
        expected = policy.params.shapes()
        values = np.frombuffer(payload, dtype="<f8")
        offset = 0
        loaded, moments = {}, {}
        for block in header["blocks"]:
            name, shape = block["name"], tuple(block["shape"])
            is_moment = name.startswith((MOMENT_PREFIX_M, MOMENT_PREFIX_V))
            owner = name.split("/", 1)[1] if is_moment else name
            if expected.get(owner) != shape:
                raise CheckpointError(f"参数块 {name} 形状不匹配: {shape} != {expected.get(owner)}")
            size = int(np.prod(shape)) if shape else 1
            tensor = torch.from_numpy(values[offset:offset + size].reshape(shape).copy())
            (moments if is_moment else loaded)[name] = tensor
            offset += size
        missing = set(expected) - set(loaded)
        if missing:
            raise CheckpointError(f"检查点缺少参数块: {sorted(missing)}")
        policy.params.load_values(loaded)
        if "optimizer" in header:
            try:
                policy.params.restore_optimizer_state(header["optimizer"], moments)
            except (KeyError, TypeError) as e:
                raise CheckpointError(f"检查点中的优化器状态无效: {e}")
        logger.info(f"读取检查点: {self._resolve(path)} (参数块={len(loaded)})")
        return policy, header.get("extra", {})


# 全局实例
checkpoint_service = CheckpointService()
