"""
消融实验
同一种子下按组件开关、三元组损失、位置编码或部件数 K 逐行训练并评估，输出对比表
"""
import itertools
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from rich.console import Console
from rich.table import Table

from .config import LossConfig, PositionEncodingConfig, RunConfig, config_with
from .data import generate_dataset
from .data.synthetic import PART_GROUPS
from .errors import ConfigError

logger = logging.getLogger(__name__)

ABLATION_AXES = ("decouple", "ppf", "pct", "ss")

# 组件关闭时的覆盖项
_AXIS_OFF = {
    "decouple": ["model.decouple=false"],
    "ppf": ["model.position.mode=none"],
    "pct": ["loss.triplet_mode=part_average"],
    "ss": ["loss.gamma_smooth=0"],
}
# 基础配置里该组件本来是关闭的，开启时使用的取值
_AXIS_DEFAULT_ON = {
    "decouple": ["model.decouple=true"],
    "ppf": [f"model.position.mode={PositionEncodingConfig().mode}"],
    "pct": ["loss.triplet_mode=pct"],
    "ss": [f"loss.gamma_smooth={LossConfig().gamma_smooth}"],
}


def axis_enabled(axis: str, config: RunConfig) -> bool:
    """基础配置中该组件是否开启"""
    if axis == "decouple":
        return config.model.decouple
    if axis == "ppf":
        return config.model.position.mode != "none"
    if axis == "pct":
        return config.loss.triplet_mode == "pct"
    return config.loss.gamma_smooth > 0


# 组件消融表的六行：基线 → 逐步加入各组件 → 完整模型
STEPWISE_ROWS = [
    (),
    ("decouple",),
    ("decouple", "ppf"),
    ("decouple", "ppf", "pct"),
    ("decouple", "ppf", "ss"),
    ("decouple", "ppf", "pct", "ss"),
]

LOSS_GRID = {
    "PCT": ["loss.triplet_mode=pct"],
    "Part-average triplet": ["loss.triplet_mode=part_average"],
    "Part-level HCT": ["loss.triplet_mode=part_hct"],
}

POSITION_GRID = {
    "none": ["model.position.mode=none"],
    "1D": ["model.position.mode=1d_height"],
    "2D": ["model.position.mode=2d"],
}

# 部件数对比：每个 K 都重新生成数据集
K_GRID = tuple(sorted(PART_GROUPS))


@dataclass
class AblationRow:
    name: str
    enabled: List[str]
    overrides: List[str]
    rank1: float = 0.0
    mAP: float = 0.0
    pixel_accuracy: float = 0.0
    loss_hp_smooth: float = 0.0
    checkpoint: Optional[str] = None


def parse_axes(axes) -> List[str]:
    """'decouple,ppf' → ['decouple', 'ppf']；未知组件报配置错误"""
    if isinstance(axes, str):
        axes = [a.strip() for a in axes.split(",") if a.strip()]
    unknown = [a for a in axes if a not in ABLATION_AXES]
    if unknown:
        raise ConfigError(f"未知的消融组件: {unknown}，可选 {list(ABLATION_AXES)}")
    return list(axes)


def axis_overrides(enabled: Sequence[str], axes: Sequence[str],
                   base: Optional[RunConfig] = None) -> List[str]:
    """
    被消融的组件按开关生成覆盖项；未参与消融的组件保持开启

    Args:
        enabled: 开启的组件
        axes: 参与消融的组件
        base: 基础配置；组件在其中已开启时沿用它的取值，否则使用默认开启值
    """
    overrides: List[str] = []
    for axis in ABLATION_AXES:
        if axis in axes and axis not in enabled:
            overrides.extend(_AXIS_OFF[axis])
        elif base is None or not axis_enabled(axis, base):
            overrides.extend(_AXIS_DEFAULT_ON[axis])
    return overrides


def component_grid(axes: Sequence[str], grid: str = "stepwise",
                   base: Optional[RunConfig] = None) -> List[AblationRow]:
    """
    组件消融的行

    Args:
        axes: 参与消融的组件
        grid: stepwise（六行表，限制在 axes 上并去重）或 full（2^|axes| 全组合）
        base: 基础配置（决定各组件开启时的取值）
    """
    axes = parse_axes(axes)
    if grid == "full":
        combos = [tuple(a for a, on in zip(axes, flags) if on)
                  for flags in itertools.product([False, True], repeat=len(axes))]
    elif grid == "stepwise":
        combos = []
        for row in STEPWISE_ROWS:
            combo = tuple(a for a in row if a in axes)
            if combo not in combos:
                combos.append(combo)
    else:
        raise ConfigError(f"未知的消融网格: {grid}")

    rows = []
    for combo in combos:
        name = "Baseline" if not combo else "+".join(combo)
        rows.append(AblationRow(name=name, enabled=list(combo), overrides=axis_overrides(combo, axes, base)))
    return rows


def named_grid(grid: Dict[str, List[str]]) -> List[AblationRow]:
    return [AblationRow(name=name, enabled=[], overrides=list(overrides)) for name, overrides in grid.items()]


def parse_part_counts(values) -> List[int]:
    """'3,4,8' → [3, 4, 8]；不支持的部件数报配置错误"""
    if isinstance(values, str):
        try:
            values = [int(v) for v in values.split(",") if v.strip()]
        except ValueError as e:
            raise ConfigError(f"部件数列表格式错误: {values!r}") from e
    counts = [int(v) for v in values]
    if not counts:
        raise ConfigError("部件数列表为空")
    unsupported = [k for k in counts if k not in PART_GROUPS]
    if unsupported:
        raise ConfigError(f"不支持的部件数: {unsupported}，可选 {list(K_GRID)}")
    return counts


def part_count_grid(counts=K_GRID) -> List[AblationRow]:
    """每个 K 一行，数据与模型的部件数同时覆盖"""
    return [AblationRow(name=f"K={k}", enabled=[], overrides=[f"data.num_parts={k}", f"model.num_parts={k}"])
            for k in parse_part_counts(counts)]


def run_ablation(config: RunConfig, rows: List[AblationRow], output_dir,
                 train_fn: Optional[Callable] = None, show_progress: bool = True) -> List[AblationRow]:
    """
    逐行训练并评估

    Args:
        config: 基础配置
        rows: 消融行
        output_dir: 每行的输出放在 output_dir/<序号>_<名称>
        train_fn: 训练函数（默认 trainer.train）

    Returns:
        list: 填好指标的行；覆盖了数据配置的行在 <行目录>/data 下重新生成数据集
    """
    if train_fn is None:
        from .trainer import train as train_fn

    output_dir = Path(output_dir)
    for i, row in enumerate(rows):
        row_config = config_with(config, row.overrides)
        slug = row.name.replace("+", "_").replace(" ", "_").replace("=", "")
        row_dir = output_dir / f"{i:02d}_{slug}"
        logger.info(f"消融 [{i + 1}/{len(rows)}] {row.name}: {row.overrides}")

        data_dir = None
        if row_config.data != config.data:
            data_dir = row_dir / "data"
            logger.info(f"重新生成数据集: {data_dir}")
            generate_dataset(row_config.data, data_dir, show_progress=show_progress)
        result = train_fn(row_config, data_dir=data_dir, output_dir=row_dir, show_progress=show_progress)

        history = result.get("history") or [{}]
        last = history[-1]
        evaluated = [h for h in history if "eval_mAP" in h]
        best = max(evaluated, key=lambda h: h["eval_mAP"]) if evaluated else {}
        row.rank1 = float(best.get("eval_rank1", 0.0))
        row.mAP = float(best.get("eval_mAP", 0.0))
        row.pixel_accuracy = float(last.get("pixel_accuracy", 0.0))
        row.loss_hp_smooth = float(last.get("loss_hp_smooth", 0.0))
        row.checkpoint = result.get("best_checkpoint") or result.get("last_checkpoint")
    return rows


def render_ablation(rows: Sequence[AblationRow], axes: Sequence[str] = (),
                    console: Optional[Console] = None, title: str = "消融实验") -> None:
    console = console or Console()
    table = Table(title=title)
    table.add_column("设置")
    for axis in axes:
        table.add_column(axis, justify="center")
    for column in ("R-1", "mAP", "解析准确率"):
        table.add_column(column, justify="right")
    for row in rows:
        marks = ["✓" if axis in row.enabled else "" for axis in axes]
        table.add_row(row.name, *marks, f"{row.rank1 * 100:.1f}", f"{row.mAP * 100:.1f}",
                      f"{row.pixel_accuracy * 100:.1f}")
    console.print(table)


def save_ablation(rows: Sequence[AblationRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump([asdict(r) for r in rows], f, ensure_ascii=False, indent=2)
    return path


def ablate(config: RunConfig, axes=ABLATION_AXES, grid: str = "stepwise", loss_grid: bool = False,
           position_grid: bool = False, k_grid=None, output_dir=None, train_fn: Optional[Callable] = None,
           show_progress: bool = True) -> Dict[str, List[AblationRow]]:
    """
    消融入口

    Args:
        k_grid: 要比较的部件数（如 "3,4,8" 或 [3, 4, 8]），None 表示不做部件数对比

    Returns:
        dict: {"components": [...], "loss": [...], "position": [...], "k": [...]}（只包含被请求的表）
    """
    output_dir = Path(output_dir or Path(config.paths.output_dir) / "ablation")
    if config.train.eval_every == 0:
        config = config_with(config, [f"train.eval_every={config.optimizer.epochs}"])

    axes = parse_axes(axes)
    part_counts = parse_part_counts(k_grid) if k_grid else []
    tables: Dict[str, List[AblationRow]] = {}
    if axes:
        tables["components"] = run_ablation(config, component_grid(axes, grid, base=config),
                                            output_dir / "components", train_fn, show_progress)
    if loss_grid:
        tables["loss"] = run_ablation(config, named_grid(LOSS_GRID), output_dir / "loss",
                                      train_fn, show_progress)
    if position_grid:
        tables["position"] = run_ablation(config, named_grid(POSITION_GRID), output_dir / "position",
                                          train_fn, show_progress)
    if part_counts:
        tables["k"] = run_ablation(config, part_count_grid(part_counts), output_dir / "k",
                                   train_fn, show_progress)

    save_ablation([r for rows in tables.values() for r in rows], output_dir / "ablation.json")
    return tables
