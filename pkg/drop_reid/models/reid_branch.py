"""
解析引导的 ReID 分支
P_reid 构建 + GAP 全局嵌入 + WAMP 前景/部件嵌入 + BNNeck 身份分类头
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, DimensionError
from .backbone import FeaturePyramid
from .parsing_branch import ParsingPrediction, upsample_to

WAMP_EPS = 1e-6


@dataclass
class EmbeddingSet:
    """
    一批图像的嵌入

    global_emb: [N, C]
    foreground_emb: [N, C]
    part_embs: [N, K, C]（不可见部件同样有定义，只是在距离计算中被排除）
    visibility: [N, K] bool
    """

    global_emb: torch.Tensor
    foreground_emb: torch.Tensor
    part_embs: torch.Tensor
    visibility: torch.Tensor

    def detach(self) -> "EmbeddingSet":
        return EmbeddingSet(self.global_emb.detach(), self.foreground_emb.detach(),
                            self.part_embs.detach(), self.visibility.detach())

    def to(self, device) -> "EmbeddingSet":
        return EmbeddingSet(self.global_emb.to(device), self.foreground_emb.to(device),
                            self.part_embs.to(device), self.visibility.to(device))

    def __len__(self) -> int:
        return self.global_emb.shape[0]


def build_p_reid(pyramid: FeaturePyramid) -> torch.Tensor:
    """
    P_3、P_4 双线性上采样到阶段 2 分辨率后与 P_2 拼接（不含阶段 1）

    Args:
        pyramid: 特征金字塔

    Returns:
        Tensor: [N, C_2 + C_3 + C_4, H_2, W_2]
    """
    p2 = pyramid.stages[1]
    target = p2.shape[-2:]
    deeper = [upsample_to(p, target) for p in pyramid.stages[2:]]
    return torch.cat([p2] + deeper, dim=1)


def area_downsample(maps: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """面积平均下采样解析图（保持软掩码的质量）"""
    if tuple(maps.shape[-2:]) == tuple(size):
        return maps
    return F.adaptive_avg_pool2d(maps, size)


def weighted_pool(features: torch.Tensor, weights: torch.Tensor,
                  eps: float = WAMP_EPS) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    加权平均池化 + 加权最大池化

    Args:
        features: [N, C, H, W]
        weights: [N, M, H, W]（M 个权重图）
        eps: 分母保护项，全零权重图的平均值为零向量

    Returns:
        (avg, max): 均为 [N, M, C]
    """
    if features.shape[0] != weights.shape[0] or features.shape[-2:] != weights.shape[-2:]:
        raise DimensionError(f"特征 {tuple(features.shape)} 与权重图 {tuple(weights.shape)} 尺寸不一致")
    # [N, M, C, H, W]
    weighted = weights.unsqueeze(2) * features.unsqueeze(1)
    mass = weights.flatten(2).sum(-1, keepdim=True)
    avg = weighted.flatten(3).sum(-1) / (mass + eps)
    mx = weighted.flatten(3).max(-1).values
    return avg, mx


class WAMPHead(nn.Module):
    """
    WAMP：[加权平均; 加权最大] → 全连接降维到 C
    pooling=gwap 时只用加权平均
    detach_maps=False 时 ReID 损失经解析图回传到解析分支（耦合基线）
    """

    def __init__(self, in_channels: int, embed_dim: int, num_parts: int,
                 pooling: str = "wamp", share_projection: bool = False, detach_maps: bool = True):
        super().__init__()
        self.pooling = pooling
        self.detach_maps = detach_maps
        self.num_parts = num_parts
        pooled = in_channels * (2 if pooling == "wamp" else 1)
        self.part_projection = nn.Linear(pooled, embed_dim)
        self.foreground_projection = self.part_projection if share_projection else nn.Linear(pooled, embed_dim)

    def pool(self, features: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
        avg, mx = weighted_pool(features, weights)
        if self.pooling == "wamp":
            return torch.cat([avg, mx], dim=-1)
        return avg

    def forward(self, p_reid: torch.Tensor, parsing: ParsingPrediction) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Returns:
            (foreground_emb [N, C], part_embs [N, K, C])
        """
        size = p_reid.shape[-2:]
        maps = torch.cat([parsing.foreground.unsqueeze(1), parsing.part_probs[:, 1:]], dim=1)
        if self.detach_maps:
            # 解耦时解析分支只由解析损失训练
            maps = maps.detach()
        maps = area_downsample(maps, size)
        pooled = self.pool(p_reid, maps)
        foreground = self.foreground_projection(pooled[:, 0])
        parts = self.part_projection(pooled[:, 1:])
        return foreground, parts


def wamp_pool(p_reid: torch.Tensor, parsing: ParsingPrediction, head: WAMPHead) -> Tuple[torch.Tensor, torch.Tensor]:
    return head(p_reid, parsing)


class GlobalHead(nn.Module):
    """GAP + 全连接"""

    def __init__(self, in_channels: int, embed_dim: int):
        super().__init__()
        self.projection = nn.Linear(in_channels, embed_dim)

    def forward(self, p_reid: torch.Tensor) -> torch.Tensor:
        return self.projection(p_reid.mean(dim=(-2, -1)))


def global_pool(p_reid: torch.Tensor, head: GlobalHead) -> torch.Tensor:
    return head(p_reid)


class BNNeckHead(nn.Module):
    """
    BNNeck：BN 后接无偏置分类器
    检索使用 BN 之后、分类器之前的向量
    """

    def __init__(self, embed_dim: int, num_classes: int):
        super().__init__()
        if num_classes <= 0:
            raise ConfigError(f"身份类别数必须为正: {num_classes}")
        self.num_classes = num_classes
        self.bn = nn.BatchNorm1d(embed_dim)
        self.bn.bias.requires_grad_(False)
        self.classifier = nn.Linear(embed_dim, num_classes, bias=False)

        nn.init.constant_(self.bn.weight, 1)
        nn.init.constant_(self.bn.bias, 0)
        nn.init.normal_(self.classifier.weight, 0, 0.001)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        feature = self.bn(x)
        return feature, self.classifier(feature)


class IdentityHeads(nn.Module):
    """全局、前景各一个头；K 个部件头默认互相独立"""

    def __init__(self, embed_dim: int, num_classes: int, num_parts: int, share_part_heads: bool = False):
        super().__init__()
        self.num_classes = num_classes
        self.global_head = BNNeckHead(embed_dim, num_classes)
        self.foreground_head = BNNeckHead(embed_dim, num_classes)
        if share_part_heads:
            shared = BNNeckHead(embed_dim, num_classes)
            self.part_heads = nn.ModuleList([shared] * num_parts)
        else:
            self.part_heads = nn.ModuleList([BNNeckHead(embed_dim, num_classes) for _ in range(num_parts)])

    def forward(self, embeddings: EmbeddingSet) -> Tuple[EmbeddingSet, List[torch.Tensor]]:
        """
        Returns:
            (BN 后的嵌入, K+2 个 logits：[global, foreground, part_1..part_K])
        """
        if embeddings.part_embs.shape[1] != len(self.part_heads):
            raise ConfigError(f"部件数 {embeddings.part_embs.shape[1]} 与分类头数 {len(self.part_heads)} 不一致")

        g_feat, g_logits = self.global_head(embeddings.global_emb)
        f_feat, f_logits = self.foreground_head(embeddings.foreground_emb)
        part_feats, part_logits = [], []
        for k, head in enumerate(self.part_heads):
            feat, logits = head(embeddings.part_embs[:, k])
            part_feats.append(feat)
            part_logits.append(logits)

        bn_embeddings = EmbeddingSet(g_feat, f_feat, torch.stack(part_feats, dim=1), embeddings.visibility)
        return bn_embeddings, [g_logits, f_logits] + part_logits


def identity_logits(embeddings: EmbeddingSet, heads: IdentityHeads,
                    num_identities: Optional[int] = None) -> List[torch.Tensor]:
    """
    计算 K+2 组身份 logits

    Args:
        embeddings: 分类前的嵌入
        heads: BNNeck 分类头
        num_identities: 期望的训练身份数（不一致时报配置错误）

    Returns:
        list: K+2 个 [N, num_identities] 张量
    """
    if num_identities is not None and num_identities != heads.num_classes:
        raise ConfigError(f"训练身份数 {num_identities} 与分类头类别数 {heads.num_classes} 不一致")
    _, logits = heads(embeddings)
    return logits


class ReIDBranch(nn.Module):
    """ReID 分支：P_reid → 全局 / 前景 / 部件嵌入"""

    def __init__(self, stage_channels, embed_dim: int, num_parts: int,
                 pooling: str = "wamp", share_projection: bool = False, detach_maps: bool = True):
        super().__init__()
        in_channels = sum(stage_channels[1:])
        self.global_head = GlobalHead(in_channels, embed_dim)
        self.wamp = WAMPHead(in_channels, embed_dim, num_parts, pooling, share_projection, detach_maps)

    def forward(self, p_reid: torch.Tensor, parsing: ParsingPrediction) -> EmbeddingSet:
        global_emb = self.global_head(p_reid)
        foreground_emb, part_embs = self.wamp(p_reid, parsing)
        return EmbeddingSet(global_emb, foreground_emb, part_embs, parsing.visibility)
