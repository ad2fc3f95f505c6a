"""
默认桌面配置的验收：完整生成数据、训练、评估（慢测试）
"""
import pytest

from drop_reid.ablation import component_grid, run_ablation
from drop_reid.config import DEFAULT_CONFIG_PATH, config_with, load_config
from drop_reid.data import generate_dataset
from drop_reid.evaluator import evaluate_cmd
from drop_reid.trainer import train

pytestmark = pytest.mark.slow

RANK1_TARGET = 0.90
PIXEL_ACCURACY_TARGET = 0.85


@pytest.fixture(scope="module")
def desk_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    config = load_config(str(DEFAULT_CONFIG_PATH), [
        f"paths.data_dir={root / 'data'}",
        f"paths.output_dir={root / 'run'}",
        f"logging.log_dir={root / 'logs'}",
        "device=cpu",
    ])
    generate_dataset(config.data, config.paths.data_dir, show_progress=False)
    return config, root


@pytest.fixture(scope="module")
def desk_run(desk_dataset):
    config, root = desk_dataset
    result = train(config, output_dir=root / "run", show_progress=False)
    report = evaluate_cmd(result["last_checkpoint"], modes=["G", "F+P"], output_dir=root / "eval",
                          plot=False, strips=False, show_progress=False)
    return result, {row["mode"]: row for row in report.rows}


def test_default_config_parsing_accuracy(desk_run):
    result, _ = desk_run
    assert result["history"][-1]["pixel_accuracy"] >= PIXEL_ACCURACY_TARGET


def test_default_config_retrieval_targets(desk_run):
    _, rows = desk_run
    assert rows["F+P"]["rank1"] >= RANK1_TARGET
    assert rows["F+P"]["rank1"] >= rows["G"]["rank1"]


def test_decoupling_does_not_hurt(desk_dataset):
    config, root = desk_dataset
    short = config_with(config, ["optimizer.epochs=30", "optimizer.decay_epochs=[20]", "train.eval_every=30"])
    coupled, decoupled = run_ablation(short, component_grid(["decouple"], base=short), root / "ablation",
                                      show_progress=False)
    assert coupled.enabled == [] and decoupled.enabled == ["decouple"]
    assert decoupled.pixel_accuracy >= coupled.pixel_accuracy
    assert decoupled.mAP >= coupled.mAP
