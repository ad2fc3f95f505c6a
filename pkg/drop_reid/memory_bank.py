"""
部件嵌入记忆库（PEMB）
按批次先进先出，容量 M×B；只有最新一批保留梯度
"""
from collections import deque
from dataclasses import dataclass
from typing import Deque, Optional

import torch

from .errors import DimensionError, EmptyBankError


@dataclass
class BankSnapshot:
    """
    记忆库快照（按插入顺序排列，最新一批在末尾）

    embs: [N, K, C]
    visibility: [N, K] bool
    identities: [N]
    ages: [N]，每条记录所属批次的序号
    """

    embs: torch.Tensor
    visibility: torch.Tensor
    identities: torch.Tensor
    ages: torch.Tensor
    newest_size: int

    def __len__(self) -> int:
        return self.embs.shape[0]

    @property
    def anchor_indices(self) -> torch.Tensor:
        """最新一批（带梯度）在快照中的下标"""
        n = len(self)
        return torch.arange(n - self.newest_size, n, device=self.embs.device)


@dataclass
class _BankBatch:
    embs: torch.Tensor
    visibility: torch.Tensor
    identities: torch.Tensor
    age: int


class PartsMemoryBank:
    """
    部件嵌入记忆库

    Args:
        capacity_batches: M，保存的批次数
        batch_size: B，每批条目数（构造后固定）
        num_parts: K，为 None 时由第一次写入确定
        embed_dim: C，为 None 时由第一次写入确定
    """

    def __init__(self, capacity_batches: int, batch_size: int,
                 num_parts: Optional[int] = None, embed_dim: Optional[int] = None):
        if capacity_batches < 1 or batch_size < 1:
            raise DimensionError(f"记忆库尺寸必须为正: M={capacity_batches}, B={batch_size}")
        self.capacity_batches = capacity_batches
        self.batch_size = batch_size
        self.num_parts = num_parts
        self.embed_dim = embed_dim
        self._batches: Deque[_BankBatch] = deque(maxlen=capacity_batches)
        self._next_age = 0

    @property
    def capacity(self) -> int:
        return self.capacity_batches * self.batch_size

    def __len__(self) -> int:
        return sum(b.embs.shape[0] for b in self._batches)

    def is_empty(self) -> bool:
        return not self._batches

    def reset(self) -> None:
        """清空记忆库（每轮开始时调用）"""
        self._batches.clear()

    def push_batch(self, batch_embs: torch.Tensor, visibility: torch.Tensor,
                   identities: torch.Tensor) -> "PartsMemoryBank":
        """
        写入一批部件嵌入，满时淘汰最旧的一批

        Args:
            batch_embs: [B, K, C]，保留计算图
            visibility: [B, K]
            identities: [B]

        Returns:
            PartsMemoryBank: 自身
        """
        if batch_embs.dim() != 3 or batch_embs.shape[0] != self.batch_size:
            raise DimensionError(f"批次形状 {tuple(batch_embs.shape)} 与记忆库批大小 {self.batch_size} 不一致")
        _, k, c = batch_embs.shape
        if self.num_parts is None:
            self.num_parts = k
        if self.embed_dim is None:
            self.embed_dim = c
        if (k, c) != (self.num_parts, self.embed_dim):
            raise DimensionError(f"部件嵌入形状 [{k}, {c}] 与记忆库 [{self.num_parts}, {self.embed_dim}] 不一致")
        if tuple(visibility.shape) != (self.batch_size, k) or tuple(identities.shape) != (self.batch_size,):
            raise DimensionError("可见性或身份标签的形状与批次不一致")

        # 上一批变为历史记录，切断计算图
        if self._batches:
            last = self._batches[-1]
            last.embs = last.embs.detach()

        self._batches.append(_BankBatch(
            embs=batch_embs,
            visibility=visibility.detach().bool(),
            identities=identities.detach().long(),
            age=self._next_age,
        ))
        self._next_age += 1
        return self

    def snapshot(self) -> BankSnapshot:
        """
        按插入顺序拼接全部条目

        Returns:
            BankSnapshot: N = 当前条目数
        """
        if not self._batches:
            raise EmptyBankError("记忆库为空，无法生成快照")
        batches = list(self._batches)
        device = batches[-1].embs.device
        ages = torch.cat([torch.full((b.embs.shape[0],), b.age, dtype=torch.long) for b in batches])
        return BankSnapshot(
            embs=torch.cat([b.embs.to(device) for b in batches], dim=0),
            visibility=torch.cat([b.visibility.to(device) for b in batches], dim=0),
            identities=torch.cat([b.identities.to(device) for b in batches], dim=0),
            ages=ages.to(device),
            newest_size=batches[-1].embs.shape[0],
        )


def push_batch(bank: PartsMemoryBank, batch_embs: torch.Tensor, visibility: torch.Tensor,
               identities: torch.Tensor) -> PartsMemoryBank:
    return bank.push_batch(batch_embs, visibility, identities)


def snapshot(bank: PartsMemoryBank) -> BankSnapshot:
    return bank.snapshot()
