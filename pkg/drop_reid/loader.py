"""
命令加载器
职责：注册子命令处理器 + 统一响应信封 + 退出码
"""
import logging
from datetime import datetime
from typing import Any, Dict, Optional

from .errors import ConfigError, DropError
from .processors import ALL_COMMANDS, BaseCommand

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

_EXIT_CODES = {"INVALID_INPUT": EXIT_CONFIG, ConfigError.error_code: EXIT_CONFIG}


def format_response(status: str, data: Any = None, error: str = None, error_code: str = None) -> Dict[str, Any]:
    """
    格式化统一响应

    Args:
        status: 状态 ("success" 或 "error")
        data: 响应数据
        error: 错误信息
        error_code: 错误代码

    Returns:
        dict: 格式化的响应
    """
    response = {
        "status": status,
        "timestamp": datetime.now().strftime("%Y-%m-%d %H:%M:%S")
    }

    if status == "success":
        response["data"] = data
    else:
        response["error"] = {
            "code": error_code or "UNKNOWN_ERROR",
            "message": error or "处理失败"
        }

    return response


def exit_code_for(response: Dict[str, Any]) -> int:
    """响应信封 → 进程退出码（0 成功，1 配置错误，2 运行错误）"""
    if response.get("status") == "success":
        return EXIT_OK
    return _EXIT_CODES.get(response.get("error", {}).get("code"), EXIT_RUNTIME)


def create_command_handler(command: BaseCommand):
    """
    为子命令创建处理函数

    Args:
        command: 处理器实例

    Returns:
        function: handler(config, params) -> 响应信封
    """

    def handler(config, params: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        data = {"config": config, "params": params or {}}
        try:
            if not command.validate_input(data):
                return format_response("error", error="输入数据验证失败", error_code="INVALID_INPUT")

            result = command.process(data)
            return format_response("success", data=result)

        except DropError as e:
            logger.error(f"{command.get_command_name()} 失败: {e}")
            return format_response("error", error=str(e), error_code=e.error_code)
        except Exception as e:
            logger.exception(f"{command.get_command_name()} 异常")
            return format_response("error", error=str(e), error_code="PROCESSING_FAILED")

    return handler


def get_all_commands() -> Dict[str, Dict[str, Any]]:
    """
    获取全部子命令

    Returns:
        dict: {命令名: {instance: 处理器实例, handler: 处理函数}}
    """
    commands = {}
    for command_class in ALL_COMMANDS:
        instance = command_class()
        commands[instance.get_command_name()] = {
            "instance": instance,
            "handler": create_command_handler(instance),
        }
    return commands
