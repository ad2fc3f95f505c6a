"""
日志配置
控制台 + 轮转文件两个处理器；format=json 时使用 JsonFormatter
指标日志单独写入 jsonl 文件（每轮一行）
"""
import json
import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Dict, List

from pythonjsonlogger.json import JsonFormatter

from .config import LoggingConfig

LOGGER_NAME = "drop_reid"
TEXT_FORMAT = '%(asctime)s [%(levelname)s] %(message)s'
JSON_FORMAT = '%(asctime)s %(levelname)s %(name)s %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def _make_formatter(fmt: str) -> logging.Formatter:
    if fmt == "json":
        return JsonFormatter(JSON_FORMAT, datefmt=DATE_FORMAT)
    return logging.Formatter(TEXT_FORMAT, datefmt=DATE_FORMAT)


def setup_logging(config: LoggingConfig, filename: str = "drop_reid.log") -> logging.Logger:
    """
    配置包日志

    Args:
        config: 日志配置
        filename: 日志文件名（位于 config.log_dir 下）

    Returns:
        logging.Logger: 包 logger
    """
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(config.level.upper())

    # 重复调用时先移除旧处理器，避免日志重复输出
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    formatter = _make_formatter(config.format)

    # 控制台处理器
    console_handler = logging.StreamHandler()
    console_handler.setLevel(config.level.upper())
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    # 确保日志目录存在
    log_dir = Path(config.log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)

    # 轮转文件处理器
    file_handler = RotatingFileHandler(
        filename=str(log_dir / filename),
        maxBytes=config.max_bytes,
        backupCount=config.backup_count,
        encoding='utf-8'
    )
    file_handler.setLevel(config.level.upper())
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)

    return logger


class MetricLog:
    """
    只追加的结构化指标日志（每条记录一行 JSON）
    """

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

        self._logger = logging.getLogger(f"{LOGGER_NAME}.metrics.{self.path.resolve()}")
        self._logger.setLevel(logging.INFO)
        self._logger.propagate = False
        for handler in list(self._logger.handlers):
            self._logger.removeHandler(handler)
            handler.close()

        self._handler = logging.FileHandler(str(self.path), mode="a", encoding="utf-8")
        self._handler.setFormatter(JsonFormatter('%(asctime)s %(message)s', datefmt=DATE_FORMAT))
        self._logger.addHandler(self._handler)

    def write(self, event: str, record: Dict[str, Any]) -> None:
        """
        写入一条记录

        Args:
            event: 事件名（写入 message 字段）
            record: 记录内容，键不能与 LogRecord 内置属性冲突
        """
        self._logger.info(event, extra={k: _to_builtin(v) for k, v in record.items()})
        self._handler.flush()

    def close(self) -> None:
        self._logger.removeHandler(self._handler)
        self._handler.close()


def _to_builtin(value: Any) -> Any:
    if hasattr(value, "item") and callable(value.item):
        return value.item()
    if isinstance(value, dict):
        return {k: _to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_builtin(v) for v in value]
    return value


def read_metric_log(path: Path) -> List[Dict[str, Any]]:
    """
    读取指标日志

    Args:
        path: jsonl 文件路径

    Returns:
        list: 按写入顺序排列的记录
    """
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
