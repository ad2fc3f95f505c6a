"""
骨干网络
小型四阶段残差 CNN，输出分辨率逐级减半的特征金字塔 P_1..P_4
"""
import math
from dataclasses import dataclass
from typing import List

import torch
import torch.nn as nn

from ..config import BackboneConfig
from ..errors import ConfigError, NumericalError


@dataclass
class FeaturePyramid:
    """四个阶段的特征图，stages[i] 形状 [N, C_i, H_1/2^i, W_1/2^i]"""

    stages: List[torch.Tensor]

    def __len__(self) -> int:
        return len(self.stages)

    def __getitem__(self, index: int) -> torch.Tensor:
        return self.stages[index]

    @property
    def spatial_sizes(self) -> List[tuple]:
        return [tuple(s.shape[-2:]) for s in self.stages]


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )


class ResidualBlock(nn.Module):
    """两层 3x3 卷积的基础残差块"""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)

        self.shortcut = nn.Identity()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class Backbone(nn.Module):
    """
    stem（log2(stem_stride) 个步长为 2 的卷积）+ 四个残差阶段
    阶段 1 保持 stem 分辨率，阶段 2~4 各下采样 2 倍
    """

    def __init__(self, config: BackboneConfig, check_finite: bool = True):
        super().__init__()
        self.config = config
        self.check_finite = check_finite

        channels = config.stage_channels
        num_down = int(math.log2(config.stem_stride))
        stem_channels = max(channels[0] // 2, 8)

        stem = []
        in_channels = 3
        for _ in range(num_down):
            stem.append(ConvBNReLU(in_channels, stem_channels, stride=2))
            in_channels = stem_channels
        if not stem:
            stem.append(ConvBNReLU(in_channels, stem_channels, stride=1))
            in_channels = stem_channels
        self.stem = nn.Sequential(*stem)

        stages = []
        for i, out_channels in enumerate(channels):
            stride = 1 if i == 0 else 2
            blocks = [ResidualBlock(in_channels, out_channels, stride)]
            blocks += [ResidualBlock(out_channels, out_channels) for _ in range(config.blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            in_channels = out_channels
        self.stages = nn.ModuleList(stages)

        self._init_params()

    def _init_params(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.constant_(m.weight, 1)
                nn.init.constant_(m.bias, 0)

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        """
        前向计算特征金字塔

        Args:
            images: [N, 3, H, W] 或单张 [3, H, W]，取值 [0, 1]

        Returns:
            FeaturePyramid: 四个阶段的特征图
        """
        if images.dim() == 3:
            images = images.unsqueeze(0)
        expected = (3, self.config.input_height, self.config.input_width)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ConfigError(f"输入尺寸 {tuple(images.shape)} 与配置 {expected} 不一致")

        x = self.stem(images)
        outputs = []
        for index, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if self.check_finite and not torch.isfinite(x).all():
                raise NumericalError(f"骨干网络第 {index} 阶段出现非有限值", stage=index)
            outputs.append(x)
        return FeaturePyramid(outputs)


def forward_backbone(image: torch.Tensor, backbone: Backbone) -> FeaturePyramid:
    """
    对单张或一批图像计算特征金字塔

    Args:
        image: [3, H, W] 或 [N, 3, H, W]
        backbone: 骨干网络

    Returns:
        FeaturePyramid
    """
    return backbone(image)
