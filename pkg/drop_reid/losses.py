"""
训练损失
L = L_reid + L_pct + λ·L_hp
"""
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from .errors import DimensionError, LabelError, NumericalError
from .memory_bank import BankSnapshot

PROB_FLOOR = 1e-12


@dataclass
class LossDiagnostics:
    """三元组类损失的挖掘统计"""

    valid_anchors: int = 0
    skipped_anchors: int = 0
    degenerate: bool = False


@dataclass
class PartDistanceMatrix:
    """
    values: [K, N, N] 部件间欧氏距离
    validity: [K, N, N] 两端部件均可见
    """

    values: torch.Tensor
    validity: torch.Tensor

    @property
    def num_parts(self) -> int:
        return self.values.shape[0]

    def pedestrian_distance(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        行人级距离：只在共同可见的部件上取平均

        Returns:
            (distance [N, N], shared_count [N, N])；shared_count 为 0 的位置距离置 0
        """
        valid = self.validity.to(self.values.dtype)
        count = valid.sum(dim=0)
        total = (self.values * valid).sum(dim=0)
        return total / count.clamp_min(1.0), count


@dataclass
class ParsingLossTerms:
    cross_entropy: torch.Tensor
    smooth: torch.Tensor   # 已乘 γ

    @property
    def total(self) -> torch.Tensor:
        return self.cross_entropy + self.smooth


def _check_labels(labels: torch.Tensor, num_classes: int, what: str) -> None:
    if labels.numel() == 0:
        return
    low, high = int(labels.min()), int(labels.max())
    if low < 0 or high >= num_classes:
        raise LabelError(f"{what}标签越界: 取值范围 [{low}, {high}]，类别数 {num_classes}")


def smoothed_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, epsilon: float) -> torch.Tensor:
    """
    标签平滑交叉熵（批内平均）

    Args:
        logits: [N, num_classes]
        labels: [N]
        epsilon: 平滑率

    Returns:
        Tensor: 标量
    """
    num_classes = logits.shape[1]
    _check_labels(labels, num_classes, "身份")
    log_probs = F.log_softmax(logits, dim=1)
    targets = torch.full_like(log_probs, epsilon / num_classes)
    targets.scatter_(1, labels.view(-1, 1), 1.0 - epsilon + epsilon / num_classes)
    return -(targets * log_probs).sum(dim=1).mean()


def reid_ce_loss(logit_sets: Sequence[torch.Tensor], identities: torch.Tensor,
                 epsilon: float = 0.1, reduction: str = "mean") -> torch.Tensor:
    """
    K+2 个 BNNeck 头的标签平滑交叉熵

    Args:
        logit_sets: 每个嵌入类别一组 [N, num_identities]
        identities: [N]
        epsilon: 平滑率
        reduction: mean（各头平均）或 sum

    Returns:
        Tensor: 标量
    """
    losses = torch.stack([smoothed_cross_entropy(logits, identities, epsilon) for logits in logit_sets])
    return losses.sum() if reduction == "sum" else losses.mean()


def part_distance_matrix(embs: torch.Tensor, visibility: torch.Tensor) -> PartDistanceMatrix:
    """
    逐部件两两欧氏距离

    Args:
        embs: [N, K, C]
        visibility: [N, K]

    Returns:
        PartDistanceMatrix
    """
    if embs.dim() != 3 or tuple(visibility.shape) != tuple(embs.shape[:2]):
        raise DimensionError(f"嵌入 {tuple(embs.shape)} 与可见性 {tuple(visibility.shape)} 形状不一致")
    parts = embs.transpose(0, 1)                       # [K, N, C]
    diff = parts.unsqueeze(2) - parts.unsqueeze(1)     # [K, N, N, C]
    squared = (diff * diff).sum(-1)
    # 零距离处 sqrt 的梯度无定义，置零
    positive = squared > 0
    values = torch.where(positive, squared.clamp_min(PROB_FLOOR).sqrt(), torch.zeros_like(squared))

    vis = visibility.bool().transpose(0, 1)            # [K, N]
    validity = vis.unsqueeze(2) & vis.unsqueeze(1)
    return PartDistanceMatrix(values, validity)


def _batch_hard_hinge(distance: torch.Tensor, usable: torch.Tensor, identities: torch.Tensor,
                      anchors: torch.Tensor, margin: float) -> Tuple[torch.Tensor, LossDiagnostics]:
    """
    在候选集合上做最难正/负样本挖掘

    Args:
        distance: [N, N]
        usable: [N, N]，可作为候选的配对
        identities: [N]
        anchors: 锚点下标
        margin: α
    """
    n = distance.shape[0]
    d = distance[anchors]                              # [A, N]
    same = identities[anchors].unsqueeze(1) == identities.unsqueeze(0)
    not_self = anchors.unsqueeze(1) != torch.arange(n, device=distance.device).unsqueeze(0)
    usable = usable[anchors]
    pos_mask = same & not_self & usable
    neg_mask = ~same & usable

    has_pair = pos_mask.any(dim=1) & neg_mask.any(dim=1)
    diagnostics = LossDiagnostics(valid_anchors=int(has_pair.sum()),
                                  skipped_anchors=int((~has_pair).sum()))
    if not bool(has_pair.any()):
        diagnostics.degenerate = True
        return distance.sum() * 0.0, diagnostics

    hardest_pos = torch.where(pos_mask, d, torch.full_like(d, -math.inf)).max(dim=1).values
    hardest_neg = torch.where(neg_mask, d, torch.full_like(d, math.inf)).min(dim=1).values
    hinge = F.relu(hardest_pos[has_pair] - hardest_neg[has_pair] + margin)
    return hinge.mean(), diagnostics


def pct_loss(matrix: PartDistanceMatrix, identities: torch.Tensor, anchors: torch.Tensor,
             margin: float = 0.3) -> Tuple[torch.Tensor, LossDiagnostics]:
    """
    部件感知紧致三元组损失

    行人级距离为共同可见部件距离的平均；没有共同可见部件的配对不参与挖掘。

    Args:
        matrix: 记忆库上的部件距离矩阵
        identities: [N]
        anchors: 当前批次（带梯度）条目的下标
        margin: α

    Returns:
        (loss, diagnostics)；没有任何可用锚点时损失为 0 且 degenerate=True
    """
    distance, shared = matrix.pedestrian_distance()
    return _batch_hard_hinge(distance, shared > 0, identities, anchors, margin)


def pct_loss_from_bank(snapshot: BankSnapshot, margin: float = 0.3) -> Tuple[torch.Tensor, LossDiagnostics]:
    matrix = part_distance_matrix(snapshot.embs, snapshot.visibility)
    return pct_loss(matrix, snapshot.identities, snapshot.anchor_indices, margin)


def part_average_triplet(part_embs: torch.Tensor, identities: torch.Tensor,
                         margin: float = 0.3) -> Tuple[torch.Tensor, LossDiagnostics]:
    """批内最难三元组，距离为全部 K 个部件距离的平均（不考虑可见性）"""
    visibility = torch.ones(part_embs.shape[:2], dtype=torch.bool, device=part_embs.device)
    matrix = part_distance_matrix(part_embs, visibility)
    anchors = torch.arange(part_embs.shape[0], device=part_embs.device)
    return pct_loss(matrix, identities, anchors, margin)


def part_hct_loss(part_embs: torch.Tensor, identities: torch.Tensor,
                  margin: float = 0.3) -> Tuple[torch.Tensor, LossDiagnostics]:
    """
    部件级难样本挖掘中心三元组损失

    每个部件、每个身份：类中心到本身份最远样本的距离 vs 到最近异类中心的距离
    """
    labels, inverse = torch.unique(identities, return_inverse=True)
    num_ids = labels.numel()
    diagnostics = LossDiagnostics(valid_anchors=num_ids if num_ids > 1 else 0,
                                  skipped_anchors=0 if num_ids > 1 else num_ids)
    if num_ids < 2:
        diagnostics.degenerate = True
        return part_embs.sum() * 0.0, diagnostics

    one_hot = F.one_hot(inverse, num_ids).to(part_embs.dtype)          # [N, P]
    counts = one_hot.sum(dim=0)                                         # [P]
    centers = torch.einsum("np,nkc->pkc", one_hot, part_embs) / counts.view(-1, 1, 1)

    losses = []
    for k in range(part_embs.shape[1]):
        # 样本到所属中心
        own = centers[inverse, k]                                       # [N, C]
        spread = _safe_norm(part_embs[:, k] - own)                      # [N]
        spread = torch.where(one_hot.bool(), spread.unsqueeze(1), torch.full_like(one_hot, -math.inf))
        hardest_pos = spread.max(dim=0).values                          # [P]
        # 中心之间
        center_dist = _safe_norm(centers[:, k].unsqueeze(1) - centers[:, k].unsqueeze(0))
        eye = torch.eye(num_ids, dtype=torch.bool, device=part_embs.device)
        hardest_neg = center_dist.masked_fill(eye, math.inf).min(dim=1).values
        losses.append(F.relu(hardest_pos - hardest_neg + margin).mean())
    return torch.stack(losses).mean(), diagnostics


def _safe_norm(x: torch.Tensor) -> torch.Tensor:
    squared = (x * x).sum(-1)
    return torch.where(squared > 0, squared.clamp_min(PROB_FLOOR).sqrt(), torch.zeros_like(squared))


def baseline_losses(part_embs: torch.Tensor, identities: torch.Tensor, mode: str = "part_average",
                    margin: float = 0.3) -> Tuple[torch.Tensor, LossDiagnostics]:
    """
    不使用记忆库的对照三元组损失

    Args:
        part_embs: [B, K, C]
        identities: [B]
        mode: part_average / part_hct
        margin: α
    """
    if mode == "part_average":
        return part_average_triplet(part_embs, identities, margin)
    if mode == "part_hct":
        return part_hct_loss(part_embs, identities, margin)
    raise ValueError(f"未知的对照损失: {mode}")


def total_variation(probs: torch.Tensor) -> torch.Tensor:
    """
    L1 全变分（竖直 + 水平相邻像素），对所有类别与样本求和

    Args:
        probs: [N, K+1, H, W]
    """
    vertical = (probs[..., 1:, :] - probs[..., :-1, :]).abs().sum()
    horizontal = (probs[..., :, 1:] - probs[..., :, :-1]).abs().sum()
    return vertical + horizontal


def parsing_loss_terms(part_probs: torch.Tensor, gt_mask: torch.Tensor,
                       epsilon: float = 0.1, gamma: float = 0.5) -> ParsingLossTerms:
    """
    空间平滑的解析损失

    Args:
        part_probs: [N, K+1, H, W] 或 [K+1, H, W]
        gt_mask: [N, H, W] 或 [H, W]，取值 0..K
        epsilon: 像素级标签平滑率
        gamma: 平滑项权重

    Returns:
        ParsingLossTerms：两项均已按像素数归一化
    """
    if part_probs.dim() == 3:
        part_probs = part_probs.unsqueeze(0)
        gt_mask = gt_mask.unsqueeze(0)
    if part_probs.shape[0] != gt_mask.shape[0] or part_probs.shape[-2:] != gt_mask.shape[-2:]:
        raise DimensionError(f"解析概率 {tuple(part_probs.shape)} 与标签 {tuple(gt_mask.shape)} 尺寸不一致")

    num_classes = part_probs.shape[1]
    gt_mask = gt_mask.long()
    _check_labels(gt_mask, num_classes, "解析")

    pixels = gt_mask.numel()
    log_probs = part_probs.clamp_min(PROB_FLOOR).log()
    targets = torch.full_like(part_probs, epsilon / num_classes)
    targets.scatter_(1, gt_mask.unsqueeze(1), 1.0 - (num_classes - 1) / num_classes * epsilon)
    cross_entropy = -(targets * log_probs).sum() / pixels

    smooth = gamma * total_variation(part_probs) / pixels
    return ParsingLossTerms(cross_entropy, smooth)


def parsing_loss(part_probs: torch.Tensor, gt_mask: torch.Tensor,
                 epsilon: float = 0.1, gamma: float = 0.5) -> torch.Tensor:
    return parsing_loss_terms(part_probs, gt_mask, epsilon, gamma).total


def _is_finite(value: Union[torch.Tensor, float]) -> bool:
    if isinstance(value, torch.Tensor):
        return bool(torch.isfinite(value).all())
    return math.isfinite(value)


def total_loss(l_reid, l_pct, l_hp, lambda_hp: float = 0.4,
               batch_index: Optional[int] = None):
    """
    总损失 l_reid + l_pct + λ·l_hp

    Raises:
        NumericalError: 任一项非有限（term 字段给出项名）
    """
    for name, value in (("reid", l_reid), ("pct", l_pct), ("hp", l_hp)):
        if not _is_finite(value):
            where = f"（批次 {batch_index}）" if batch_index is not None else ""
            raise NumericalError(f"损失项 {name} 出现非有限值{where}", term=name, batch_index=batch_index)
    total = l_reid + l_pct
    if lambda_hp != 0:
        total = total + lambda_hp * l_hp
    return total


def parsing_pixel_accuracy(part_probs: torch.Tensor, gt_mask: torch.Tensor) -> float:
    """逐像素 argmax 与标签一致的比例"""
    pred = part_probs.argmax(dim=1 if part_probs.dim() == 4 else 0)
    return float((pred == gt_mask.long()).float().mean())
