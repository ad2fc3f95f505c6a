"""
eval：评估检查点
"""
from typing import Any, Dict

from rich.console import Console

from ..config import RunConfig
from ..evaluator import evaluate_cmd
from ..retrieval import parse_mode
from .base_command import BaseCommand


class EvaluateCommand(BaseCommand):
    """检查点评估"""

    def get_command_name(self) -> str:
        return "eval"

    def get_command_description(self) -> str:
        return "在 query/gallery 上按检索模式计算 CMC 与 mAP"

    def validate_input(self, data: Dict[str, Any]) -> bool:
        params = data.get("params", {})
        if not isinstance(data.get("config"), RunConfig) or not params.get("checkpoint"):
            return False
        # 模式写错时提前报配置错误
        for mode in params.get("modes") or []:
            parse_mode(mode)
        return True

    def process(self, data: Dict[str, Any]) -> Dict[str, Any]:
        """
        Args:
            data:
                - params.checkpoint: 检查点路径
                - params.modes: 检索模式列表（空则使用检查点配置的 mode_grid）
                - params.plot: 是否输出 CMC 曲线与检索条带图

        Returns:
            dict: 评估报告
        """
        params = data["params"]
        plot = params.get("plot", True)
        report = evaluate_cmd(
            params["checkpoint"],
            data_dir=params.get("data_dir"),
            modes=params.get("modes") or None,
            output_dir=params.get("output_dir"),
            plot=plot,
            strips=plot,
            show_progress=params.get("show_progress", True),
        )
        if params.get("render", True):
            # 表格走 stderr，stdout 只输出响应 JSON
            report.render(Console(stderr=True))
        return report.to_dict()
