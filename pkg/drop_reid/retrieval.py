"""
检索与评估
可见性门控的 query-gallery 距离 + G/F/P 组合模式 + CMC/mAP（单 query 协议，同身份同相机的 gallery 样本被排除）
"""
import logging
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, DimensionError

logger = logging.getLogger(__name__)

_PART_TOKEN = re.compile(r"^P\[(\d+(?:\s*,\s*\d+)*)\]$")


@dataclass(frozen=True)
class RetrievalMode:
    """
    检索模式，例如 "F+P"、"G+F+P"、"P[5,6]"

    parts: P 组件使用的部件下标（0 起），None 表示全部部件
    """

    name: str
    use_global: bool = False
    use_foreground: bool = False
    use_parts: bool = False
    parts: Optional[Tuple[int, ...]] = None

    def part_indices(self, num_parts: int) -> np.ndarray:
        if self.parts is None:
            return np.arange(num_parts)
        if max(self.parts) >= num_parts:
            raise ConfigError(f"检索模式 {self.name} 引用了不存在的部件（K={num_parts}）")
        return np.asarray(self.parts)


def parse_mode(mode: str) -> RetrievalMode:
    """
    解析模式字符串

    Args:
        mode: 以 + 连接的 G / F / P / P[i,j]（部件下标从 1 开始）

    Returns:
        RetrievalMode
    """
    tokens = [t.strip() for t in mode.split("+") if t.strip()]
    if not tokens:
        raise ConfigError(f"检索模式不能为空: {mode!r}")

    flags = {"use_global": False, "use_foreground": False, "use_parts": False}
    parts = None
    for token in tokens:
        if token == "G":
            flags["use_global"] = True
        elif token == "F":
            flags["use_foreground"] = True
        elif token == "P":
            flags["use_parts"] = True
        else:
            match = _PART_TOKEN.match(token)
            if not match:
                raise ConfigError(f"无法识别的检索模式片段: {token}")
            indices = tuple(sorted({int(i) - 1 for i in match.group(1).split(",")}))
            if indices[0] < 0:
                raise ConfigError(f"部件下标从 1 开始: {token}")
            flags["use_parts"] = True
            parts = indices
    return RetrievalMode(name=mode, parts=parts, **flags)


@dataclass
class RetrievalRecord:
    """单张图像的检索记录"""

    global_emb: np.ndarray       # [C]
    foreground_emb: np.ndarray   # [C]
    part_embs: np.ndarray        # [K, C]
    visibility: np.ndarray       # [K] bool
    identity: int
    camera: int


@dataclass
class EmbeddingIndex:
    """
    一组检索记录的列式存储

    global_emb / foreground_emb: [N, C]
    part_embs: [N, K, C]
    visibility: [N, K] bool
    """

    global_emb: np.ndarray
    foreground_emb: np.ndarray
    part_embs: np.ndarray
    visibility: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray
    image_paths: List[str] = field(default_factory=list)

    def __post_init__(self):
        n = self.global_emb.shape[0]
        c = self.global_emb.shape[1] if self.global_emb.ndim == 2 else -1
        if (self.foreground_emb.shape != (n, c) or self.part_embs.ndim != 3
                or self.part_embs.shape[0] != n or self.part_embs.shape[2] != c
                or self.visibility.shape != self.part_embs.shape[:2]
                or self.identities.shape != (n,) or self.cameras.shape != (n,)):
            raise DimensionError("检索索引各字段的形状不一致")
        self.visibility = self.visibility.astype(bool)

    def __len__(self) -> int:
        return self.global_emb.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.global_emb.shape[1]

    @property
    def num_parts(self) -> int:
        return self.part_embs.shape[1]

    def record(self, i: int) -> RetrievalRecord:
        return RetrievalRecord(self.global_emb[i], self.foreground_emb[i], self.part_embs[i],
                               self.visibility[i], int(self.identities[i]), int(self.cameras[i]))

    def subset(self, mask: np.ndarray) -> "EmbeddingIndex":
        paths = [p for p, keep in zip(self.image_paths, mask) if keep] if self.image_paths else []
        return EmbeddingIndex(self.global_emb[mask], self.foreground_emb[mask], self.part_embs[mask],
                              self.visibility[mask], self.identities[mask], self.cameras[mask], paths)

    @classmethod
    def from_records(cls, records: Sequence[RetrievalRecord]) -> "EmbeddingIndex":
        return cls(
            np.stack([r.global_emb for r in records]),
            np.stack([r.foreground_emb for r in records]),
            np.stack([r.part_embs for r in records]),
            np.stack([r.visibility for r in records]),
            np.asarray([r.identity for r in records]),
            np.asarray([r.camera for r in records]),
        )

    @classmethod
    def concatenate(cls, indexes: Sequence["EmbeddingIndex"]) -> "EmbeddingIndex":
        if len({(ix.embed_dim, ix.num_parts) for ix in indexes}) > 1:
            raise DimensionError("拼接的索引嵌入维度或部件数不一致")
        paths = [p for ix in indexes for p in ix.image_paths]
        return cls(*(np.concatenate([getattr(ix, name) for ix in indexes])
                     for name in ("global_emb", "foreground_emb", "part_embs",
                                  "visibility", "identities", "cameras")),
                   image_paths=paths)


def _weights_for(weights: Optional[Dict[str, float]]) -> Dict[str, float]:
    merged = {"G": 1.0, "F": 1.0, "P": 1.0}
    merged.update(weights or {})
    return merged


def _euclidean(a: np.ndarray, b: np.ndarray) -> float:
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sqrt((diff ** 2).sum()))


def pair_distance(q: RetrievalRecord, g: RetrievalRecord, mode, weights: Optional[Dict[str, float]] = None) -> float:
    """
    单对 query/gallery 的距离

    Args:
        q: query 记录
        g: gallery 记录
        mode: 模式字符串或 RetrievalMode
        weights: 各组件权重（默认全 1，即简单平均）

    Returns:
        float: 已定义组件的加权平均；P 无共同可见部件时退化（只选 P 时用前景距离）
    """
    mode = parse_mode(mode) if isinstance(mode, str) else mode
    if q.part_embs.shape != g.part_embs.shape or q.global_emb.shape != g.global_emb.shape:
        raise DimensionError(f"嵌入维度不一致: {q.part_embs.shape} vs {g.part_embs.shape}")
    w = _weights_for(weights)

    components = []
    if mode.use_global:
        components.append((w["G"], _euclidean(q.global_emb, g.global_emb)))
    if mode.use_foreground:
        components.append((w["F"], _euclidean(q.foreground_emb, g.foreground_emb)))
    if mode.use_parts:
        parts = mode.part_indices(q.part_embs.shape[0])
        shared = [k for k in parts if q.visibility[k] and g.visibility[k]]
        if shared:
            d_p = float(np.mean([_euclidean(q.part_embs[k], g.part_embs[k]) for k in shared]))
            components.append((w["P"], d_p))
        elif not (mode.use_global or mode.use_foreground):
            return _euclidean(q.foreground_emb, g.foreground_emb)

    total_weight = sum(cw for cw, _ in components)
    if total_weight <= 0:
        raise ConfigError(f"检索模式 {mode.name} 的组件权重之和必须为正: {w}")
    return sum(cw * d for cw, d in components) / total_weight


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """[Q, C] x [G, C] -> [Q, G] 欧氏距离（逐元素差，避免展开式的抵消误差）"""
    diff = a[:, None, :].astype(np.float64) - b[None, :, :].astype(np.float64)
    return np.sqrt((diff ** 2).sum(-1))


def distance_components(queries: EmbeddingIndex, gallery: EmbeddingIndex,
                        mode: RetrievalMode) -> Dict[str, np.ndarray]:
    """
    计算所选组件的距离矩阵

    Returns:
        dict: G / F / P 距离 [Q, G]，P 另附 shared（共同可见部件数）
    """
    if queries.embed_dim != gallery.embed_dim or queries.num_parts != gallery.num_parts:
        raise DimensionError(
            f"query [{queries.num_parts}, {queries.embed_dim}] 与 gallery "
            f"[{gallery.num_parts}, {gallery.embed_dim}] 维度不一致"
        )
    out: Dict[str, np.ndarray] = {}
    if mode.use_global:
        out["G"] = _pairwise(queries.global_emb, gallery.global_emb)
    if mode.use_foreground or (mode.use_parts and not mode.use_global):
        out["F"] = _pairwise(queries.foreground_emb, gallery.foreground_emb)
    if mode.use_parts:
        parts = mode.part_indices(queries.num_parts)
        total = np.zeros((len(queries), len(gallery)))
        shared = np.zeros((len(queries), len(gallery)))
        for k in parts:
            valid = queries.visibility[:, k][:, None] & gallery.visibility[:, k][None, :]
            d = _pairwise(queries.part_embs[:, k], gallery.part_embs[:, k])
            total += np.where(valid, d, 0.0)
            shared += valid
        out["P"] = np.divide(total, shared, out=np.zeros_like(total), where=shared > 0)
        out["shared"] = shared
    return out


def distance_matrix(queries: EmbeddingIndex, gallery: EmbeddingIndex, mode,
                    weights: Optional[Dict[str, float]] = None) -> np.ndarray:
    """
    [Q, G] 距离矩阵，逐元素等价于 pair_distance

    Args:
        queries: query 索引
        gallery: gallery 索引
        mode: 模式字符串或 RetrievalMode
        weights: 组件权重
    """
    mode = parse_mode(mode) if isinstance(mode, str) else mode
    w = _weights_for(weights)
    comps = distance_components(queries, gallery, mode)

    weighted = np.zeros((len(queries), len(gallery)))
    weight_sum = np.zeros_like(weighted)
    if mode.use_global:
        weighted += w["G"] * comps["G"]
        weight_sum += w["G"]
    if mode.use_foreground:
        weighted += w["F"] * comps["F"]
        weight_sum += w["F"]
    if mode.use_parts:
        defined = comps["shared"] > 0
        weighted += np.where(defined, w["P"] * comps["P"], 0.0)
        weight_sum += np.where(defined, w["P"], 0.0)

    parts_only = mode.use_parts and not (mode.use_global or mode.use_foreground)
    undefined = weight_sum <= 0
    if parts_only:
        # 没有共同可见部件的对退回前景距离，不参与权重检查
        undefined &= comps["shared"] > 0
    if undefined.any():
        raise ConfigError(f"检索模式 {mode.name} 的组件权重之和必须为正: {w}")

    dist = np.divide(weighted, weight_sum, out=np.zeros_like(weighted), where=weight_sum > 0)
    if parts_only:
        dist = np.where(comps["shared"] > 0, dist, comps["F"])
    return dist


@dataclass
class RankingResult:
    """
    orders: 每个 query 排序后的 gallery 下标（已排除同身份同相机样本）
    average_precision: 每个 query 的 AP（无效 query 为 nan）
    cmc: 有效 query 上平均的 CMC 曲线，cmc[r-1] 即 Rank-r
    """

    orders: List[np.ndarray]
    average_precision: np.ndarray
    cmc: np.ndarray
    num_valid: int
    num_invalid: int

    @property
    def mAP(self) -> float:
        valid = self.average_precision[~np.isnan(self.average_precision)]
        return float(valid.mean()) if valid.size else 0.0

    def rank(self, r: int) -> float:
        if self.cmc.size == 0:
            return 0.0
        return float(self.cmc[min(r, self.cmc.size) - 1])

    def summary(self, ranks: Sequence[int] = (1, 5, 10)) -> Dict[str, float]:
        result = {f"rank{r}": self.rank(r) for r in ranks}
        result["mAP"] = self.mAP
        result["valid_queries"] = self.num_valid
        result["invalid_queries"] = self.num_invalid
        return result


def rank_distances(distmat: np.ndarray, q_ids: np.ndarray, g_ids: np.ndarray,
                   q_cams: np.ndarray, g_cams: np.ndarray) -> RankingResult:
    """
    由距离矩阵计算 CMC/mAP

    距离相同时按 gallery 下标排序；没有有效匹配的 query 不计入平均

    Args:
        distmat: [Q, G]
        q_ids, g_ids: 身份
        q_cams, g_cams: 相机

    Returns:
        RankingResult
    """
    num_q, num_g = distmat.shape
    if num_q == 0:
        raise DataError("no queries")
    if num_g == 0:
        raise DataError("gallery 为空")

    orders, aps, all_cmc = [], [], []
    num_invalid = 0
    for qi in range(num_q):
        # 稳定排序保证相同距离按 gallery 下标
        order = np.argsort(distmat[qi], kind="stable")
        removed = (g_ids[order] == q_ids[qi]) & (g_cams[order] == q_cams[qi])
        order = order[~removed]
        orders.append(order)

        matches = (g_ids[order] == q_ids[qi]).astype(np.int64)
        if not matches.any():
            num_invalid += 1
            aps.append(np.nan)
            continue

        cmc = (matches.cumsum() >= 1).astype(np.float64)
        hits = matches.cumsum()
        precision = hits / np.arange(1, matches.size + 1)
        aps.append(float((precision * matches).sum() / matches.sum()))
        # 所有 query 的有效 gallery 长度可能不同，补齐到 num_g
        padded = np.ones(num_g)
        padded[:cmc.size] = cmc
        all_cmc.append(padded)

    if num_invalid:
        logger.warning(f"{num_invalid} 个 query 在 gallery 中没有有效匹配，已从平均中排除")

    cmc = np.mean(all_cmc, axis=0) if all_cmc else np.zeros(0)
    return RankingResult(orders, np.asarray(aps, dtype=np.float64), cmc,
                         num_valid=num_q - num_invalid, num_invalid=num_invalid)


def evaluate(queries: EmbeddingIndex, gallery: EmbeddingIndex, mode="F+P",
             weights: Optional[Dict[str, float]] = None) -> RankingResult:
    """
    单 query 协议下的检索评估

    Args:
        queries: query 索引
        gallery: gallery 索引
        mode: 检索模式
        weights: 组件权重

    Returns:
        RankingResult
    """
    if len(queries) == 0:
        raise DataError("no queries")
    distmat = distance_matrix(queries, gallery, mode, weights)
    return rank_distances(distmat, queries.identities, gallery.identities,
                          queries.cameras, gallery.cameras)
