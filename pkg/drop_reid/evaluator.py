"""
评估与导出
提取 query/gallery 嵌入 → 按检索模式计算 Rank-k / mAP → 报告表格、CMC 曲线、检索结果条带图
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402
from rich.console import Console  # noqa: E402
from rich.table import Table  # noqa: E402

from .config import RunConfig  # noqa: E402
from .data.dataset import ManifestDataset, ManifestRow, read_manifest  # noqa: E402
from .data.synthetic import part_names  # noqa: E402
from .errors import DataError  # noqa: E402
from .index_store import EmbeddingIndexStore  # noqa: E402
from .models.network import DROPNet  # noqa: E402
from .retrieval import EmbeddingIndex, RankingResult, distance_matrix, parse_mode, rank_distances  # noqa: E402
from .trainer import extract_index, load_checkpoint, model_from_checkpoint  # noqa: E402

logger = logging.getLogger(__name__)

REPORT_NAME = "report.json"
CMC_PLOT_NAME = "cmc.png"
STRIPS_NAME = "rankings.png"


@dataclass
class EvaluationReport:
    """
    rows: 每个检索模式一行 {mode, rank1, rank5, rank10, mAP, valid_queries, invalid_queries, mean_shared_parts}
    part_visibility_rate: query 中每个部件被判为可见的比例
    """

    rows: List[Dict[str, float]]
    part_names: List[str]
    part_visibility_rate: List[float]
    num_queries: int
    num_gallery: int
    checkpoint: Optional[str] = None
    cmc: Dict[str, List[float]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2)
        return path

    def render(self, console: Optional[Console] = None) -> None:
        """在终端打印结果表格"""
        console = console or Console()
        table = Table(title=f"检索结果（query {self.num_queries} / gallery {self.num_gallery}）")
        for column in ("mode", "Rank-1", "Rank-5", "Rank-10", "mAP", "共同可见部件"):
            table.add_column(column, justify="right" if column != "mode" else "left")
        for row in self.rows:
            table.add_row(
                row["mode"],
                f"{row['rank1'] * 100:.1f}",
                f"{row['rank5'] * 100:.1f}",
                f"{row['rank10'] * 100:.1f}",
                f"{row['mAP'] * 100:.1f}",
                f"{row['mean_shared_parts']:.2f}",
            )
        console.print(table)

        visibility = Table(title="query 部件可见率")
        for name in self.part_names:
            visibility.add_column(name, justify="right")
        visibility.add_row(*[f"{rate * 100:.0f}%" for rate in self.part_visibility_rate])
        console.print(visibility)


def mean_shared_parts(queries: EmbeddingIndex, gallery: EmbeddingIndex, result: RankingResult) -> float:
    """有效 query 与其 top-1 gallery 之间共同可见部件数的平均"""
    shared = []
    for qi, order in enumerate(result.orders):
        if np.isnan(result.average_precision[qi]) or order.size == 0:
            continue
        shared.append(int((queries.visibility[qi] & gallery.visibility[order[0]]).sum()))
    return float(np.mean(shared)) if shared else 0.0


def evaluate_indexes(queries: EmbeddingIndex, gallery: EmbeddingIndex, modes: Sequence[str],
                     ranks: Sequence[int] = (1, 5, 10), weights: Optional[Dict[str, float]] = None,
                     names: Optional[List[str]] = None) -> tuple:
    """
    在已提取的索引上按多个模式评估

    Returns:
        (EvaluationReport, {mode: RankingResult})
    """
    if len(queries) == 0:
        raise DataError("no queries")
    rows, results, cmc = [], {}, {}
    for mode in modes:
        parsed = parse_mode(mode)
        distmat = distance_matrix(queries, gallery, parsed, weights)
        result = rank_distances(distmat, queries.identities, gallery.identities,
                                queries.cameras, gallery.cameras)
        row = {"mode": mode}
        row.update(result.summary(ranks))
        for r in (1, 5, 10):
            row.setdefault(f"rank{r}", result.rank(r))
        row["mean_shared_parts"] = mean_shared_parts(queries, gallery, result)
        rows.append(row)
        results[mode] = result
        cmc[mode] = [float(v) for v in result.cmc]

    report = EvaluationReport(
        rows=rows,
        part_names=names or [f"part{k + 1}" for k in range(queries.num_parts)],
        part_visibility_rate=[float(v) for v in queries.visibility.mean(axis=0)],
        num_queries=len(queries),
        num_gallery=len(gallery),
        cmc=cmc,
    )
    return report, results


def extract_eval_indexes(model: DROPNet, data_dir, config: RunConfig,
                         rows: Optional[Sequence[ManifestRow]] = None, show_progress: bool = False):
    """
    Returns:
        (query_index, gallery_index)
    """
    rows = rows if rows is not None else read_manifest(data_dir)
    device = next(model.parameters()).device
    indexes = []
    for split in ("query", "gallery"):
        dataset = ManifestDataset(data_dir, split, config.model.num_parts,
                                  mask_stride=config.model.backbone.stem_stride, rows=rows)
        if len(dataset) == 0:
            raise DataError("no queries" if split == "query" else "gallery 为空")
        indexes.append(extract_index(model, dataset, device=device, show_progress=show_progress))
    return indexes[0], indexes[1]


def evaluate_model(model: DROPNet, data_dir, config: RunConfig, modes: Optional[Sequence[str]] = None,
                   rows: Optional[Sequence[ManifestRow]] = None, show_progress: bool = False) -> EvaluationReport:
    """训练过程中的评估：只返回报告，不写文件"""
    modes = list(modes or config.retrieval.mode_grid)
    queries, gallery = extract_eval_indexes(model, data_dir, config, rows, show_progress)
    report, _ = evaluate_indexes(queries, gallery, modes, config.retrieval.ranks,
                                 config.retrieval.weights, part_names(config.model.num_parts))
    return report


def plot_cmc(report: EvaluationReport, path, max_rank: int = 20) -> Path:
    """各模式的 CMC 曲线"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig = plt.figure(figsize=(6, 4))
    ax = plt.subplot(111)
    for mode, curve in report.cmc.items():
        values = np.asarray(curve[:max_rank]) * 100
        ax.plot(np.arange(1, values.size + 1), values, marker=".", label=mode)
    ax.set_xlabel("Rank")
    ax.set_ylabel("Matching rate (%)")
    ax.set_ylim(0, 101)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _tile(data_dir: Path, image_path: str, visibility: np.ndarray, border: Optional[str],
          size: tuple) -> Image.Image:
    """单张图像 + 边框 + 下方的部件可见性色块"""
    width, height = size
    flag = 6
    tile = Image.new("RGB", (width + 6, height + 6 + flag + 2), "white")
    image = Image.open(data_dir / image_path).convert("RGB").resize((width, height))
    draw = ImageDraw.Draw(tile)
    if border is not None:
        draw.rectangle([0, 0, width + 5, height + 5], fill=border)
    tile.paste(image, (3, 3))
    cell = (width + 6) / max(len(visibility), 1)
    for k, visible in enumerate(visibility):
        x0 = int(k * cell)
        draw.rectangle([x0 + 1, height + 8, int((k + 1) * cell) - 1, height + 8 + flag],
                       fill="#2e7d32" if visible else "#bdbdbd")
    return tile


def ranking_strips(queries: EmbeddingIndex, gallery: EmbeddingIndex, result: RankingResult,
                   data_dir, path, num_queries: int = 6, top_k: int = 5) -> Path:
    """
    检索结果条带图：每行一个 query 及其 top-k gallery（绿框正确，红框错误）
    每张图下方的色块为各部件的可见性
    """
    data_dir = Path(data_dir)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    size = (48, 96)
    chosen = [qi for qi in range(len(queries)) if not np.isnan(result.average_precision[qi])][:num_queries]
    if not chosen:
        raise DataError("没有可绘制的有效 query")

    rows = []
    for qi in chosen:
        tiles = [_tile(data_dir, queries.image_paths[qi], queries.visibility[qi], None, size)]
        for gi in result.orders[qi][:top_k]:
            correct = gallery.identities[gi] == queries.identities[qi]
            tiles.append(_tile(data_dir, gallery.image_paths[gi], gallery.visibility[gi],
                               "#2e7d32" if correct else "#c62828", size))
        rows.append(tiles)

    tile_w, tile_h = rows[0][0].size
    gap = 12
    canvas = Image.new("RGB", (tile_w * (top_k + 1) + gap + 4 * top_k, tile_h * len(rows) + 4 * len(rows)), "white")
    for r, tiles in enumerate(rows):
        x = 0
        for c, tile in enumerate(tiles):
            canvas.paste(tile, (x, r * (tile_h + 4)))
            x += tile_w + (gap if c == 0 else 4)
    canvas.save(path)
    return path


def evaluate_cmd(checkpoint, data_dir=None, modes: Optional[Sequence[str]] = None, output_dir=None,
                 plot: bool = True, strips: bool = True, config: Optional[RunConfig] = None,
                 show_progress: bool = True) -> EvaluationReport:
    """
    评估一个检查点并写出报告

    Args:
        checkpoint: 检查点路径
        data_dir: 数据集目录（默认取检查点中的配置）
        modes: 检索模式列表（默认 retrieval.mode_grid）
        output_dir: 报告输出目录（默认检查点所在目录）
        plot: 是否绘制 CMC 曲线
        strips: 是否绘制检索结果条带图
        config: 覆盖检查点中的检索配置

    Returns:
        EvaluationReport
    """
    state = load_checkpoint(checkpoint)
    run_config = config or RunConfig.model_validate(state["config"])
    device = run_config.device if torch.cuda.is_available() or run_config.device == "cpu" else "cpu"
    model = model_from_checkpoint(state, device)
    data_dir = Path(data_dir or run_config.paths.data_dir)
    output_dir = Path(output_dir or Path(checkpoint).parent)

    modes = list(modes or run_config.retrieval.mode_grid)
    queries, gallery = extract_eval_indexes(model, data_dir, run_config, show_progress=show_progress)
    report, results = evaluate_indexes(queries, gallery, modes, run_config.retrieval.ranks,
                                       run_config.retrieval.weights, part_names(run_config.model.num_parts))
    report.checkpoint = str(checkpoint)
    report.save(output_dir / REPORT_NAME)

    if plot:
        plot_cmc(report, output_dir / CMC_PLOT_NAME)
    if strips:
        ranking_strips(queries, gallery, results[modes[0]], data_dir, output_dir / STRIPS_NAME)
    logger.info(f"评估报告已写入 {output_dir / REPORT_NAME}")
    return report


def export_embeddings(checkpoint, data_dir=None, out_path=None,
                      splits: Sequence[str] = ("query", "gallery"),
                      show_progress: bool = True) -> Dict[str, int]:
    """
    导出检索嵌入到索引文件（追加写入）

    Returns:
        dict: {split: 条数, "total": 文件总条数}
    """
    state = load_checkpoint(checkpoint)
    run_config = RunConfig.model_validate(state["config"])
    model = model_from_checkpoint(state, "cpu")
    data_dir = Path(data_dir or run_config.paths.data_dir)
    out_path = Path(out_path or Path(checkpoint).with_suffix(".index.db"))

    rows = read_manifest(data_dir)
    store = EmbeddingIndexStore(out_path)
    counts: Dict[str, int] = {}
    total = 0
    for split in splits:
        dataset = ManifestDataset(data_dir, split, run_config.model.num_parts,
                                  mask_stride=run_config.model.backbone.stem_stride, rows=rows)
        if len(dataset) == 0:
            continue
        index = extract_index(model, dataset, show_progress=show_progress)
        total = store.append(index, split)
        counts[split] = len(index)
    counts["total"] = total
    return counts
