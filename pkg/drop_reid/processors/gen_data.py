"""
gen-data：生成合成数据集
"""
import logging
from pathlib import Path
from typing import Any, Dict

from ..config import RunConfig
from ..data import generate_dataset
from .base_command import BaseCommand

logger = logging.getLogger(__name__)


class GenDataCommand(BaseCommand):
    """合成数据集生成"""

    def get_command_name(self) -> str:
        return "gen-data"

    def get_command_description(self) -> str:
        return "按配置渲染合成行人数据集（图像、解析掩码、manifest）"

    def validate_input(self, data: Dict[str, Any]) -> bool:
        return isinstance(data.get("config"), RunConfig)

    def process(self, data: Dict[str, Any]) -> Dict[str, Any]:
        """
        Args:
            data:
                - config: RunConfig
                - params.out: 输出目录（默认 paths.data_dir）

        Returns:
            dict: 输出目录与各划分的图像数
        """
        config: RunConfig = data["config"]
        params = data.get("params", {})
        out_dir = Path(params.get("out") or config.paths.data_dir)

        rows = generate_dataset(config.data, out_dir, show_progress=params.get("show_progress", True))
        counts = {}
        for row in rows:
            counts[row.split] = counts.get(row.split, 0) + 1
        return {"data_dir": str(out_dir), "counts": counts, "total": len(rows)}
