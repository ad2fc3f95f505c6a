"""
export：导出检索嵌入索引
"""
from pathlib import Path
from typing import Any, Dict

from ..config import RunConfig
from ..evaluator import export_embeddings
from .base_command import BaseCommand


class ExportCommand(BaseCommand):
    """嵌入索引导出"""

    def get_command_name(self) -> str:
        return "export"

    def get_command_description(self) -> str:
        return "把 query/gallery 的检索嵌入追加写入 SQLite 索引文件"

    def validate_input(self, data: Dict[str, Any]) -> bool:
        params = data.get("params", {})
        return isinstance(data.get("config"), RunConfig) and bool(params.get("checkpoint"))

    def process(self, data: Dict[str, Any]) -> Dict[str, Any]:
        params = data["params"]
        out = params.get("out") or str(Path(params["checkpoint"]).with_suffix(".index.db"))
        counts = export_embeddings(
            params["checkpoint"],
            data_dir=params.get("data_dir"),
            out_path=out,
            splits=params.get("splits") or ("query", "gallery"),
            show_progress=params.get("show_progress", True),
        )
        return {"out": out, "counts": counts}
