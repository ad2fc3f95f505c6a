"""
异常定义
每个异常携带统一的错误码（写入响应信封）和进程退出码
"""
from typing import Optional


class DropError(Exception):
    """所有业务异常的基类"""

    error_code = "RUNTIME_ERROR"
    exit_code = 2


class ConfigError(DropError):
    """配置错误（键缺失、取值非法、维度与配置不符）"""

    error_code = "CONFIG_ERROR"
    exit_code = 1


class NumericalError(DropError):
    """数值错误：出现 NaN/Inf"""

    error_code = "NUMERICAL_ERROR"

    def __init__(self, message: str, term: Optional[str] = None,
                 stage: Optional[int] = None, batch_index: Optional[int] = None):
        super().__init__(message)
        self.term = term
        self.stage = stage
        self.batch_index = batch_index


class DimensionError(DropError):
    """张量维度不一致"""

    error_code = "DIMENSION_MISMATCH"


class LabelError(DropError):
    """标签越界（身份标签或解析标签）"""

    error_code = "LABEL_OUT_OF_RANGE"


class EmptyBankError(DropError):
    """记忆库为空时请求快照"""

    error_code = "EMPTY_BANK"


class DataError(DropError):
    """数据集/评估数据不满足协议"""

    error_code = "DATA_ERROR"
