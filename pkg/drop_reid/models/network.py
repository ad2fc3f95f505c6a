"""
DROP 网络组装
"""
from dataclasses import dataclass
from typing import List

import torch
import torch.nn as nn

from ..config import ModelConfig
from .backbone import Backbone, FeaturePyramid
from .parsing_branch import ParsingBranch, ParsingPrediction
from .reid_branch import EmbeddingSet, IdentityHeads, ReIDBranch, build_p_reid


@dataclass
class NetworkOutput:
    pyramid: FeaturePyramid
    parsing: ParsingPrediction
    embeddings: EmbeddingSet      # 分类前（PCT 损失使用）
    bn_embeddings: EmbeddingSet   # BN 之后（检索使用）
    logits: List[torch.Tensor]    # K+2 组身份 logits


class DROPNet(nn.Module):
    """骨干 + 解析分支 + ReID 分支 + BNNeck 分类头"""

    def __init__(self, config: ModelConfig, num_classes: int):
        super().__init__()
        self.config = config
        self.num_classes = num_classes
        channels = config.backbone.stage_channels

        self.backbone = Backbone(config.backbone)
        self.parsing_branch = ParsingBranch(
            channels, config.dpu, config.position, config.num_parts,
            visibility_threshold=config.visibility_threshold,
            decouple=config.decouple,
        )
        self.reid_branch = ReIDBranch(channels, config.embed_dim, config.num_parts,
                                      pooling=config.pooling, share_projection=config.share_projection,
                                      detach_maps=config.decouple)
        self.heads = IdentityHeads(config.embed_dim, num_classes, config.num_parts,
                                   share_part_heads=config.share_part_heads)

    def forward(self, images: torch.Tensor) -> NetworkOutput:
        pyramid = self.backbone(images)
        p_reid = build_p_reid(pyramid)
        parsing = self.parsing_branch(pyramid, p_reid=None if self.config.decouple else p_reid)
        embeddings = self.reid_branch(p_reid, parsing)
        bn_embeddings, logits = self.heads(embeddings)
        return NetworkOutput(pyramid, parsing, embeddings, bn_embeddings, logits)

    @torch.no_grad()
    def extract(self, images: torch.Tensor) -> EmbeddingSet:
        """
        推理：返回 BN 之后的检索嵌入（调用方负责切换 eval 模式）
        """
        return self.forward(images).bn_embeddings

    def parsing_head_parameters(self) -> List[nn.Parameter]:
        """只属于解析分支的参数"""
        return list(self.parsing_branch.parameters())
