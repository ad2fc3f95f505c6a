"""
子命令处理器
"""
from .ablate import AblateCommand
from .base_command import BaseCommand
from .evaluate import EvaluateCommand
from .export import ExportCommand
from .gen_data import GenDataCommand
from .train import TrainCommand

ALL_COMMANDS = [GenDataCommand, TrainCommand, EvaluateCommand, ExportCommand, AblateCommand]

__all__ = ["ALL_COMMANDS", "AblateCommand", "BaseCommand", "EvaluateCommand", "ExportCommand",
           "GenDataCommand", "TrainCommand"]
