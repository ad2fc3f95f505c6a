"""
配置管理
职责：读取 config.yaml + 应用 --set 覆盖项 + pydantic 校验
"""
import copy
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

# 加载环境变量（DROP_CONFIG / DROP_DEVICE / DROP_NUM_THREADS）
load_dotenv()

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "config.yaml"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BackboneConfig(_Section):
    """骨干网络配置"""

    input_height: int = Field(128, gt=0, description="输入图像高度（像素）")
    input_width: int = Field(64, gt=0, description="输入图像宽度（像素）")
    stage_channels: List[int] = Field(default_factory=lambda: [16, 32, 64, 128],
                                      description="P_1..P_4 的通道数")
    stem_stride: int = Field(4, ge=1, description="输入到 P_1 的下采样倍数")
    blocks_per_stage: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_geometry(self) -> "BackboneConfig":
        if len(self.stage_channels) != 4:
            raise ValueError(f"stage_channels 必须恰好 4 个，当前: {self.stage_channels}")
        if any(c <= 0 for c in self.stage_channels):
            raise ValueError("stage_channels 必须全为正整数")
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError(f"stage_channels 必须严格递增: {self.stage_channels}")
        if self.stem_stride & (self.stem_stride - 1):
            raise ValueError(f"stem_stride 必须是 2 的幂: {self.stem_stride}")
        divisor = self.stem_stride * 8
        if self.input_height % divisor or self.input_width % divisor:
            raise ValueError(
                f"输入尺寸 {self.input_height}x{self.input_width} 必须能被 stem_stride*8={divisor} 整除"
            )
        return self

    def stage_sizes(self) -> List[tuple]:
        """返回 4 个阶段的空间尺寸 [(H_i, W_i), ...]"""
        h1 = self.input_height // self.stem_stride
        w1 = self.input_width // self.stem_stride
        return [(h1 >> i, w1 >> i) for i in range(4)]


class DPUConfig(_Section):
    """细节保持上采样（DPU）配置"""

    reduced_channels: int = Field(16, gt=0, description="通道缩减后的通道数 C_r")
    fusion_mode: Literal["cascade", "direct"] = "cascade"


class PositionEncodingConfig(_Section):
    """行人位置编码（PPE）配置；embed_channels 恒等于 reduced_channels"""

    mode: Literal["none", "1d_height", "2d"] = "1d_height"


class ModelConfig(_Section):
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    dpu: DPUConfig = Field(default_factory=DPUConfig)
    position: PositionEncodingConfig = Field(default_factory=PositionEncodingConfig)
    num_parts: int = Field(8, ge=1, description="人体部件数 K")
    embed_dim: int = Field(64, gt=0, description="嵌入维度 C")
    visibility_threshold: float = Field(0.4, ge=0.0, le=1.0, description="可见性阈值，训练与推理共用")
    pooling: Literal["wamp", "gwap"] = "wamp"
    # False 时两个分支共用 P_reid（耦合基线）
    decouple: bool = True
    share_projection: bool = False
    share_part_heads: bool = False

    @model_validator(mode="after")
    def _check_reduced_channels(self) -> "ModelConfig":
        if self.dpu.reduced_channels > min(self.backbone.stage_channels):
            raise ValueError(
                f"reduced_channels={self.dpu.reduced_channels} 不能大于 "
                f"min(stage_channels)={min(self.backbone.stage_channels)}"
            )
        return self


class LossConfig(_Section):
    lambda_hp: float = Field(0.4, ge=0.0, description="解析损失权重 λ")
    gamma_smooth: float = Field(0.5, ge=0.0, description="空间平滑权重 γ")
    epsilon_ls: float = Field(0.1, ge=0.0, lt=1.0, description="标签平滑率 ε")
    margin: float = Field(0.3, ge=0.0, description="三元组间隔 α")
    reid_reduction: Literal["mean", "sum"] = "mean"
    triplet_mode: Literal["pct", "part_average", "part_hct"] = "pct"


class MemoryBankConfig(_Section):
    capacity_batches: int = Field(4, ge=1, description="M：保存的批次数")
    reset_each_epoch: bool = True


class RetrievalConfig(_Section):
    mode: str = "F+P"
    weights: Dict[str, float] = Field(default_factory=lambda: {"G": 1.0, "F": 1.0, "P": 1.0})
    ranks: List[int] = Field(default_factory=lambda: [1, 5, 10])
    mode_grid: List[str] = Field(default_factory=lambda: ["G", "F", "P", "G+F", "F+P", "G+F+P"])


class SyntheticConfig(_Section):
    """合成行人数据配置"""

    n_identities: int = Field(20, ge=2)
    images_per_identity: int = Field(40, ge=3)
    image_height: int = Field(128, gt=0)
    image_width: int = Field(64, gt=0)
    num_parts: int = Field(8, ge=3, le=8, description="K")
    occlusion_prob: float = Field(0.3, ge=0.0, le=1.0)
    query_occlusion_prob: float = Field(1.0, ge=0.0, le=1.0)
    occluder_kind: Literal["box", "second_person"] = "box"
    rng_seed: int = 0
    color_separation: float = Field(0.25, ge=0.0, le=1.0)
    train_ratio: float = Field(0.7, gt=0.0, lt=1.0)
    query_per_identity: int = Field(4, ge=1)
    holdout_identities: int = Field(0, ge=0)
    num_workers: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _check_split(self) -> "SyntheticConfig":
        n_train = int(round(self.images_per_identity * self.train_ratio))
        if self.images_per_identity - n_train <= self.query_per_identity:
            raise ValueError("每个身份的评估图像数必须多于 query_per_identity，gallery 才不为空")
        if self.holdout_identities >= self.n_identities:
            raise ValueError("holdout_identities 必须小于 n_identities")
        return self


class AugmentConfig(_Section):
    flip_prob: float = Field(0.5, ge=0.0, le=1.0)
    pad: int = Field(10, ge=0)
    erase_prob: float = Field(0.5, ge=0.0, le=1.0)
    erase_area: List[float] = Field(default_factory=lambda: [0.02, 0.4])
    erase_aspect: List[float] = Field(default_factory=lambda: [0.3, 3.3])


class OptimizerConfig(_Section):
    lr: float = Field(3.5e-4, gt=0.0)
    decay_factor: float = Field(0.1, gt=0.0)
    decay_epochs: List[int] = Field(default_factory=lambda: [10, 20])
    epochs: int = Field(30, ge=1)
    betas: List[float] = Field(default_factory=lambda: [0.9, 0.999])
    weight_decay: float = Field(0.0, ge=0.0)

    @model_validator(mode="after")
    def _check_schedule(self) -> "OptimizerConfig":
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError(f"decay_epochs 必须严格递增: {self.decay_epochs}")
        if self.decay_epochs and self.decay_epochs[-1] >= self.epochs:
            raise ValueError(f"decay_epochs 必须小于总轮数 {self.epochs}")
        if len(self.betas) != 2:
            raise ValueError("betas 必须是两个数")
        return self


class SamplerConfig(_Section):
    """P 个身份 × I 个实例"""

    identities_per_batch: int = Field(4, ge=2)
    instances_per_identity: int = Field(4, ge=2)

    @property
    def batch_size(self) -> int:
        return self.identities_per_batch * self.instances_per_identity


class TrainConfig(_Section):
    eval_every: int = Field(5, ge=0, description="每隔多少轮评估一次，0 表示不评估")
    best_mode: str = "F+P"
    num_workers: int = Field(0, ge=0)
    max_batches_per_epoch: Optional[int] = Field(None, ge=1)


class LoggingConfig(_Section):
    level: str = "INFO"
    format: Literal["text", "json"] = "text"
    log_dir: str = "data/logs"
    max_bytes: int = 5 * 1024 * 1024
    backup_count: int = 10


class PathsConfig(_Section):
    data_dir: str = "data/synthetic"
    output_dir: str = "data/runs/default"


class RunConfig(_Section):
    """一次运行的全部配置"""

    seed: int = 0
    device: str = Field(default_factory=lambda: os.getenv("DROP_DEVICE", "cpu"))
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    memory_bank: MemoryBankConfig = Field(default_factory=MemoryBankConfig)
    retrieval: RetrievalConfig = Field(default_factory=RetrievalConfig)
    data: SyntheticConfig = Field(default_factory=SyntheticConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @model_validator(mode="after")
    def _check_consistency(self) -> "RunConfig":
        if self.data.num_parts != self.model.num_parts:
            raise ValueError(
                f"data.num_parts={self.data.num_parts} 与 model.num_parts={self.model.num_parts} 不一致"
            )
        backbone = self.model.backbone
        if (self.data.image_height, self.data.image_width) != (backbone.input_height, backbone.input_width):
            raise ValueError("合成图像尺寸必须与 backbone 输入尺寸一致")
        if self.sampler.identities_per_batch > self.data.n_identities - self.data.holdout_identities:
            raise ValueError("identities_per_batch 不能超过训练身份数")
        return self


def load_config(config_path: Optional[str] = None,
                overrides: Optional[Sequence[str]] = None) -> RunConfig:
    """
    加载配置文件

    Args:
        config_path: 配置文件路径，默认读取环境变量 DROP_CONFIG，再退回仓库根目录的 config.yaml
        overrides: 形如 "loss.lambda_hp=0.2" 的覆盖项

    Returns:
        RunConfig: 校验后的配置
    """
    if config_path is None:
        config_path = os.getenv("DROP_CONFIG", str(DEFAULT_CONFIG_PATH))

    path = Path(config_path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在: {path}")

    with open(path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}

    return build_config(raw, overrides)


def build_config(raw: Dict[str, Any], overrides: Optional[Sequence[str]] = None) -> RunConfig:
    """
    从字典构建配置（应用覆盖项后校验）

    Args:
        raw: 原始配置字典
        overrides: 覆盖项列表

    Returns:
        RunConfig: 校验后的配置
    """
    raw = copy.deepcopy(raw)
    for item in overrides or []:
        apply_override(raw, item)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"配置校验失败:\n{e}") from e


def apply_override(raw: Dict[str, Any], item: str) -> None:
    """
    把 "a.b.c=value" 写入嵌套字典，value 按 YAML 解析

    Args:
        raw: 待修改的配置字典
        item: 覆盖项
    """
    if "=" not in item:
        raise ConfigError(f"覆盖项格式应为 key=value: {item}")
    key, value = item.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"覆盖项缺少键名: {item}")

    node = raw
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"覆盖项路径冲突: {key}")
        node = child
    node[parts[-1]] = yaml.safe_load(value)


def config_with(config: RunConfig, overrides: Sequence[str]) -> RunConfig:
    """基于已有配置派生新配置（消融实验用）"""
    return build_config(config.model_dump(), overrides)
