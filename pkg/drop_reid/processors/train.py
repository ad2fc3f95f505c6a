"""
train：训练 DROP 模型
"""
from typing import Any, Dict

from ..config import RunConfig
from ..trainer import train
from .base_command import BaseCommand


class TrainCommand(BaseCommand):
    """模型训练"""

    def get_command_name(self) -> str:
        return "train"

    def get_command_description(self) -> str:
        return "在合成数据集上训练，按需周期评估并保存检查点"

    def validate_input(self, data: Dict[str, Any]) -> bool:
        return isinstance(data.get("config"), RunConfig)

    def process(self, data: Dict[str, Any]) -> Dict[str, Any]:
        config: RunConfig = data["config"]
        params = data.get("params", {})
        result = train(
            config,
            data_dir=params.get("data_dir"),
            output_dir=params.get("output_dir"),
            resume_from=params.get("resume"),
            show_progress=params.get("show_progress", True),
        )
        last = result["history"][-1] if result["history"] else {}
        return {
            "epochs": result["epochs"],
            "last_checkpoint": result["last_checkpoint"],
            "best_checkpoint": result["best_checkpoint"],
            "best_metric": result["best_metric"],
            "last_epoch": last,
        }
