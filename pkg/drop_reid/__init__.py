"""
DROP 遮挡行人重识别
解耦的人体解析分支与 ReID 分支 + 部件嵌入记忆库 + 可见性门控的部件检索
"""

__version__ = "0.1.0"
