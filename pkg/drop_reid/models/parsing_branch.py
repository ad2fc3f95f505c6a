"""
人体位置感知解析分支
DPU（细节保持上采样）融合四个阶段 → 加上行人位置编码 → 1x1 卷积预测每像素部件概率
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import DPUConfig, PositionEncodingConfig
from ..errors import DimensionError
from .backbone import FeaturePyramid


def upsample_to(x: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    """角点对齐的双线性插值（固定核，不可学习）"""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=True)


@dataclass
class ParsingPrediction:
    """
    解析结果

    part_probs: [N, K+1, H_1, W_1]，通道 0 为背景
    foreground: [N, H_1, W_1]，部件概率的逐像素最大值
    visibility: [N, K] bool
    visibility_scores: [N, K]，每个部件概率的空间最大值
    """

    logits: torch.Tensor
    part_probs: torch.Tensor
    foreground: torch.Tensor
    visibility: torch.Tensor
    visibility_scores: torch.Tensor

    @property
    def num_parts(self) -> int:
        return self.part_probs.shape[1] - 1


def make_parsing_prediction(logits: torch.Tensor, visibility_threshold: float = 0.4) -> ParsingPrediction:
    """
    由 logits 推导概率、前景与可见性

    Args:
        logits: [N, K+1, H, W]
        visibility_threshold: 可见性阈值（概率最大值严格大于该值视为可见）

    Returns:
        ParsingPrediction
    """
    probs = torch.softmax(logits, dim=1)
    parts = probs[:, 1:]
    foreground = parts.max(dim=1).values
    scores = parts.flatten(2).max(dim=-1).values
    return ParsingPrediction(
        logits=logits,
        part_probs=probs,
        foreground=foreground,
        visibility=scores > visibility_threshold,
        visibility_scores=scores,
    )


class ChannelReduction(nn.Sequential):
    """CR(·)：1x1 卷积 + BN，偏置零初始化"""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels),
        )
        nn.init.kaiming_normal_(self[0].weight, mode="fan_in")
        nn.init.constant_(self[1].weight, 1)
        nn.init.zeros_(self[1].bias)


class DetailPreservingUpsample(nn.Module):
    """
    DPU：各阶段先通道缩减到 C_r，再上采样融合到阶段 1 分辨率

    cascade: 4→3→2 逐级 2 倍上采样相加，最后上采样并与 CR(P_1) 相加
    direct:  CR(P_1) + Σ_{i=2..4} UP(CR(P_i))
    """

    def __init__(self, stage_channels: Sequence[int], config: DPUConfig):
        super().__init__()
        self.fusion_mode = config.fusion_mode
        self.reductions = nn.ModuleList(
            [ChannelReduction(c, config.reduced_channels) for c in stage_channels]
        )

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        reduced = [cr(p) for cr, p in zip(self.reductions, pyramid.stages)]
        return self.fuse(reduced, self.fusion_mode)

    @staticmethod
    def fuse(reduced: List[torch.Tensor], fusion_mode: str) -> torch.Tensor:
        """
        融合已缩减通道的各阶段特征

        Args:
            reduced: [CR(P_1), ..., CR(P_4)]
            fusion_mode: cascade / direct

        Returns:
            Tensor: [N, C_r, H_1, W_1]
        """
        target = reduced[0].shape[-2:]
        if fusion_mode == "direct":
            out = reduced[0]
            for r in reduced[1:]:
                out = out + upsample_to(r, target)
        else:
            x = reduced[-1]
            for r in reversed(reduced[1:-1]):
                x = upsample_to(x, r.shape[-2:]) + r
            out = reduced[0] + upsample_to(x, target)

        if out.shape[-2:] != target:
            raise DimensionError(f"DPU 输出分辨率 {tuple(out.shape[-2:])} 与阶段 1 {tuple(target)} 不一致")
        return out


def build_coordinate_map(height: int, width: int, mode: str) -> torch.Tensor:
    """
    归一化坐标图

    Args:
        height: H_1
        width: W_1
        mode: 1d_height（1 通道，h/(H-1)）或 2d（再加一个 w/(W-1) 通道）

    Returns:
        Tensor: [1 或 2, H, W]；H=1 时坐标定义为 0
    """
    rows = torch.arange(height, dtype=torch.float32)
    rows = rows / (height - 1) if height > 1 else torch.zeros(height)
    channels = [rows.view(height, 1).expand(height, width)]
    if mode == "2d":
        cols = torch.arange(width, dtype=torch.float32)
        cols = cols / (width - 1) if width > 1 else torch.zeros(width)
        channels.append(cols.view(1, width).expand(height, width))
    return torch.stack(channels, dim=0)


class PositionEncoder(nn.Module):
    """
    PPE：Conv-BN-ReLU-Conv-BN
    卷积使用复制填充，宽度方向恒定的输入输出仍然宽度恒定
    """

    def __init__(self, config: PositionEncodingConfig, embed_channels: int):
        super().__init__()
        self.mode = config.mode
        self.embed_channels = embed_channels
        if self.mode == "none":
            self.encoder = None
            return

        in_channels = 1 if self.mode == "1d_height" else 2
        self.encoder = nn.Sequential(
            nn.Conv2d(in_channels, embed_channels, 3, padding=1, padding_mode="replicate", bias=False),
            nn.BatchNorm2d(embed_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(embed_channels, embed_channels, 3, padding=1, padding_mode="replicate", bias=False),
            nn.BatchNorm2d(embed_channels),
        )

    def forward(self, height: int, width: int, device: Optional[torch.device] = None) -> torch.Tensor:
        """
        Returns:
            Tensor: [C_r, H, W] 的位置嵌入（由调用方与 P_hp 相加）
        """
        if self.encoder is None:
            return torch.zeros(self.embed_channels, height, width, device=device)
        coords = build_coordinate_map(height, width, self.mode)
        coords = coords.to(self.encoder[0].weight).unsqueeze(0)
        return self.encoder(coords)[0]


def detail_preserving_upsample(pyramid: FeaturePyramid, dpu: DetailPreservingUpsample) -> torch.Tensor:
    return dpu(pyramid)


def position_embedding(height: int, width: int, encoder: PositionEncoder) -> torch.Tensor:
    return encoder(height, width)


class ParsingBranch(nn.Module):
    """
    解析分支

    decouple=True：输入为特征金字塔（DPU）
    decouple=False：输入为共享的 P_reid，通道缩减后上采样到阶段 1 分辨率（耦合基线）
    """

    def __init__(self, stage_channels: Sequence[int], dpu: DPUConfig, position: PositionEncodingConfig,
                 num_parts: int, visibility_threshold: float = 0.4, decouple: bool = True,
                 shared_channels: Optional[int] = None):
        super().__init__()
        self.decouple = decouple
        self.num_parts = num_parts
        self.visibility_threshold = visibility_threshold

        if decouple:
            self.dpu = DetailPreservingUpsample(stage_channels, dpu)
            self.shared_reduction = None
        else:
            self.dpu = None
            self.shared_reduction = ChannelReduction(shared_channels or sum(stage_channels[1:]),
                                                     dpu.reduced_channels)
        self.ppe = PositionEncoder(position, dpu.reduced_channels)
        # f_hp：1x1 卷积到 K+1 个类别
        self.classifier = nn.Conv2d(dpu.reduced_channels, num_parts + 1, 1)
        nn.init.normal_(self.classifier.weight, 0, 0.01)
        nn.init.zeros_(self.classifier.bias)

    def parsing_features(self, pyramid: FeaturePyramid, p_reid: Optional[torch.Tensor] = None) -> torch.Tensor:
        if self.decouple:
            return self.dpu(pyramid)
        target = pyramid.stages[0].shape[-2:]
        return upsample_to(self.shared_reduction(p_reid), target)

    def forward(self, pyramid: FeaturePyramid, p_reid: Optional[torch.Tensor] = None) -> ParsingPrediction:
        p_hp = self.parsing_features(pyramid, p_reid)
        height, width = p_hp.shape[-2:]
        p_hp = p_hp + self.ppe(height, width, device=p_hp.device).unsqueeze(0)
        logits = self.classifier(p_hp)
        return make_parsing_prediction(logits, self.visibility_threshold)


def parse(pyramid: FeaturePyramid, branch: ParsingBranch) -> ParsingPrediction:
    return branch(pyramid)
