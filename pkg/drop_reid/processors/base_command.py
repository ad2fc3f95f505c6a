"""
命令处理器基类
定义所有 CLI 子命令必须实现的标准接口
"""
from abc import ABC, abstractmethod
from typing import Any, Dict


class BaseCommand(ABC):
    """子命令处理器基类"""

    @abstractmethod
    def get_command_name(self) -> str:
        """
        返回子命令名称

        Returns:
            str: 命令行中使用的名称，如 "gen-data"
        """
        pass

    @abstractmethod
    def get_command_description(self) -> str:
        """
        返回子命令描述

        Returns:
            str: 功能描述
        """
        pass

    @abstractmethod
    def process(self, data: Dict[str, Any]) -> Dict[str, Any]:
        """
        核心处理方法

        Args:
            data: 输入数据字典
                - config: RunConfig - 校验后的运行配置
                - params: dict - 子命令参数

        Returns:
            dict: 处理结果（必须可 JSON 序列化）
        """
        pass

    @abstractmethod
    def validate_input(self, data: Dict[str, Any]) -> bool:
        """
        验证输入数据

        Args:
            data: 待验证的输入数据

        Returns:
            bool: 数据是否有效
        """
        pass
