"""
命令行入口
drop-reid [--config PATH] [--set key=value ...] <gen-data|train|eval|export|ablate> ...
"""
import json
import sys
from typing import Any, Dict

import click

from .config import load_config
from .errors import ConfigError
from .loader import EXIT_CONFIG, exit_code_for, format_response, get_all_commands
from .logging_utils import setup_logging


def _emit(response: Dict[str, Any]) -> None:
    click.echo(json.dumps(response, ensure_ascii=False, indent=2, default=str))
    code = exit_code_for(response)
    if code:
        sys.exit(code)


def common_options(func):
    """每个子命令也接受 --config 与 --set（子命令上的值优先）"""
    func = click.option("--set", "sub_overrides", multiple=True, help="覆盖配置项")(func)
    func = click.option("--config", "sub_config", default=None, help="配置文件路径")(func)
    return func


def _run(ctx: click.Context, command: str, params: Dict[str, Any], sub_config=None, sub_overrides=()) -> None:
    config_path = sub_config or ctx.obj["config_path"]
    overrides = ctx.obj["overrides"] + list(sub_overrides)
    try:
        config = load_config(config_path, overrides)
    except ConfigError as e:
        click.echo(json.dumps(format_response("error", error=str(e), error_code=e.error_code),
                              ensure_ascii=False, indent=2), err=True)
        sys.exit(EXIT_CONFIG)

    setup_logging(config.logging)
    params.setdefault("show_progress", not ctx.obj["quiet"])
    handler = get_all_commands()[command]["handler"]
    _emit(handler(config, params))


@click.group()
@click.option("--config", "config_path", default=None, help="配置文件路径（默认 DROP_CONFIG 或 config.yaml）")
@click.option("--set", "overrides", multiple=True, help="覆盖配置项，如 loss.lambda_hp=0.2")
@click.option("--quiet", is_flag=True, help="不显示进度条")
@click.pass_context
def main(ctx: click.Context, config_path, overrides, quiet):
    """DROP 遮挡行人重识别"""
    ctx.obj = {"config_path": config_path, "overrides": list(overrides), "quiet": quiet}


@main.command("gen-data")
@click.option("--out", default=None, help="输出目录（默认 paths.data_dir）")
@common_options
@click.pass_context
def gen_data(ctx, sub_config, sub_overrides, out):
    """生成合成数据集"""
    _run(ctx, "gen-data", {"out": out}, sub_config, sub_overrides)


@main.command()
@click.option("--data", "data_dir", default=None, help="数据集目录")
@click.option("--output", "output_dir", default=None, help="输出目录")
@click.option("--resume", default=None, help="从检查点恢复训练")
@common_options
@click.pass_context
def train(ctx, sub_config, sub_overrides, data_dir, output_dir, resume):
    """训练模型"""
    _run(ctx, "train", {"data_dir": data_dir, "output_dir": output_dir, "resume": resume},
         sub_config, sub_overrides)


@main.command("eval")
@click.option("--checkpoint", required=True, help="检查点路径")
@click.option("--data", "data_dir", default=None, help="数据集目录")
@click.option("--output", "output_dir", default=None, help="报告输出目录")
@click.option("--mode", "modes", multiple=True, help="检索模式，可重复，如 --mode F+P --mode P[5,6]")
@click.option("--no-plot", is_flag=True, help="不绘制 CMC 曲线与检索条带图")
@common_options
@click.pass_context
def evaluate(ctx, sub_config, sub_overrides, checkpoint, data_dir, output_dir, modes, no_plot):
    """评估检查点"""
    _run(ctx, "eval", {"checkpoint": checkpoint, "data_dir": data_dir, "output_dir": output_dir,
                       "modes": list(modes), "plot": not no_plot}, sub_config, sub_overrides)


@main.command()
@click.option("--checkpoint", required=True, help="检查点路径")
@click.option("--data", "data_dir", default=None, help="数据集目录")
@click.option("--out", default=None, help="索引文件路径（默认与检查点同名 .index.db）")
@click.option("--split", "splits", multiple=True, type=click.Choice(["train", "query", "gallery"]),
              help="导出的划分，默认 query 与 gallery")
@common_options
@click.pass_context
def export(ctx, sub_config, sub_overrides, checkpoint, data_dir, out, splits):
    """导出检索嵌入"""
    _run(ctx, "export", {"checkpoint": checkpoint, "data_dir": data_dir, "out": out, "splits": list(splits)},
         sub_config, sub_overrides)


@main.command()
@click.option("--axes", default="decouple,ppf,pct,ss", help="参与消融的组件，逗号分隔")
@click.option("--grid", type=click.Choice(["stepwise", "full"]), default="stepwise", help="六行表或全组合")
@click.option("--loss-grid", is_flag=True, help="额外比较三种三元组损失")
@click.option("--position-grid", is_flag=True, help="额外比较位置编码")
@click.option("--k-grid", default=None, help="额外比较部件数 K，逗号分隔，如 3,4,5,6,7,8（每个 K 重新生成数据）")
@click.option("--output", "output_dir", default=None, help="输出目录")
@common_options
@click.pass_context
def ablate(ctx, sub_config, sub_overrides, axes, grid, loss_grid, position_grid, k_grid, output_dir):
    """组件消融实验"""
    _run(ctx, "ablate", {"axes": axes, "grid": grid, "loss_grid": loss_grid, "position_grid": position_grid,
                         "k_grid": k_grid, "output_dir": output_dir}, sub_config, sub_overrides)


if __name__ == "__main__":
    main()
