"""
ablate：组件消融
"""
from dataclasses import asdict
from typing import Any, Dict

from rich.console import Console

from ..ablation import ablate, parse_axes, parse_part_counts, render_ablation
from ..config import RunConfig
from .base_command import BaseCommand


class AblateCommand(BaseCommand):
    """消融实验"""

    def get_command_name(self) -> str:
        return "ablate"

    def get_command_description(self) -> str:
        return "按组件开关逐行训练并评估，输出对比表"

    def validate_input(self, data: Dict[str, Any]) -> bool:
        if not isinstance(data.get("config"), RunConfig):
            return False
        params = data.get("params", {})
        parse_axes(params.get("axes", ""))
        if params.get("k_grid"):
            parse_part_counts(params["k_grid"])
        return params.get("grid", "stepwise") in ("stepwise", "full")

    def process(self, data: Dict[str, Any]) -> Dict[str, Any]:
        config: RunConfig = data["config"]
        params = data.get("params", {})
        axes = parse_axes(params.get("axes", ""))
        tables = ablate(
            config,
            axes=axes,
            grid=params.get("grid", "stepwise"),
            loss_grid=params.get("loss_grid", False),
            position_grid=params.get("position_grid", False),
            k_grid=params.get("k_grid"),
            output_dir=params.get("output_dir"),
            show_progress=params.get("show_progress", True),
        )
        if params.get("render", True):
            titles = {"components": "组件消融", "loss": "三元组损失对比", "position": "位置编码对比",
                      "k": "部件数 K 对比"}
            for name, rows in tables.items():
                render_ablation(rows, axes if name == "components" else (), title=titles[name],
                                console=Console(stderr=True))
        return {name: [asdict(r) for r in rows] for name, rows in tables.items()}
