"""策略网络与训练配置"""
from enum import Enum
from typing import List

from pydantic import BaseModel, Field, field_validator, model_validator

from app.models.instance import Distribution, RadiusKind


class DecodeMode(str, Enum):
    """解码方式"""
    SAMPLE = "sample"
    GREEDY = "greedy"


class EncoderVariant(str, Enum):
    """编码器结构"""
    ADAPTED = "adapted"      # pre-norm RMSNorm + 门控前馈
    ORIGINAL = "original"    # post-norm 实例归一化 + ReLU 前馈


class FFKind(str, Enum):
    """前馈层类型"""
    GATED = "gated"
    SWIGLU = "swiglu"
    PLAIN = "plain"


class PolicyConfig(BaseModel):
    """策略网络配置"""
    layers: int = Field(default=3, ge=1, description="编码器层数")
    heads: int = Field(default=8, ge=1, description="注意力头数 H")
    dim: int = Field(default=128, ge=2, description="模型维度 d")
    gamma: int = Field(default=16, ge=2, description="每个圆盘的 PDS 航点数 γ")
    k_nn: int = Field(default=10, ge=1, description="loc-decoder 的近邻数 k")
    clip: float = Field(default=10.0, gt=0, description="兼容层 tanh 裁剪系数 C")
    decode_mode: DecodeMode = Field(default=DecodeMode.SAMPLE, description="解码方式")
    use_knn: bool = Field(default=True, description="是否使用 k-NN 子图交互")
    encoder_variant: EncoderVariant = Field(default=EncoderVariant.ADAPTED, description="编码器结构")
    ff_kind: FFKind = Field(default=FFKind.GATED, description="前馈层类型")
    seed: int = Field(default=0, description="参数初始化种子")

    @model_validator(mode="after")
    def validate_dims(self):
        """d 必须能被 H 整除且为偶数（坐标/半径投影各占 d/2）"""
        if self.dim % self.heads != 0:
            raise ValueError(f"dim={self.dim} 不能被 heads={self.heads} 整除")
        if self.dim % 2 != 0:
            raise ValueError(f"dim={self.dim} 必须为偶数")
        if self.encoder_variant == EncoderVariant.ORIGINAL:
            self.ff_kind = FFKind.PLAIN
        return self

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


class TrainConfig(BaseModel):
    """训练配置"""
    epochs: int = Field(default=50, ge=1, description="训练轮数 E")
    instances_per_epoch: int = Field(default=10000, ge=1, description="每轮实例数 𝔻")
    batch_size: int = Field(default=64, ge=1, description="批大小 B")
    sizes: List[int] = Field(default_factory=lambda: [10, 20], description="问题规模集合 Λ")
    radius_types: List[RadiusKind] = Field(default_factory=lambda: [RadiusKind.CONSTANT, RadiusKind.RANDOM],
                                           description="半径类型集合 𝒮_λ")
    distribution: Distribution = Field(default=Distribution.UNIFORM, description="训练实例分布")
    lr: float = Field(default=1e-4, gt=0, description="学习率")
    weight_decay: float = Field(default=1e-6, ge=0, description="解耦权重衰减")
    max_grad_norm: float = Field(default=1.0, gt=0, description="全局梯度范数裁剪阈值")
    seed: int = Field(default=1234, description="随机种子")
    eval_every: int = Field(default=1, ge=0, description="每隔多少轮评估一次，0 表示不评估")
    eval_size: int = Field(default=20, ge=1, description="评估实例规模")
    eval_count: int = Field(default=16, ge=1, description="评估实例数量")
    checkpoint_dir: str = Field(default="checkpoints", description="检查点目录")
    metrics_file: str = Field(default="metrics.log", description="指标日志文件名（位于检查点目录）")

    @field_validator("sizes")
    @classmethod
    def validate_sizes(cls, v):
        if not v or any(s < 2 for s in v):
            raise ValueError(f"训练规模必须 >= 2（共享基线至少需要两条轨迹）: {v}")
        return sorted(set(v))

    @field_validator("radius_types")
    @classmethod
    def validate_radius_types(cls, v):
        if not v:
            raise ValueError("radius_types 不能为空")
        return v

    @model_validator(mode="after")
    def validate_batch(self):
        """B 不能超过 𝔻"""
        if self.batch_size > self.instances_per_epoch:
            raise ValueError(f"batch_size={self.batch_size} 大于 instances_per_epoch={self.instances_per_epoch}")
        return self
