"""
测试共用夹具：极小规模的配置与合成数据集

标记为 slow 的测试在默认配置上完整训练，需要 --run-slow 或环境变量 DROP_RUN_SLOW=1 才会运行
"""
import os

import pytest

from drop_reid.config import RunConfig, build_config
from drop_reid.data import generate_dataset

TINY_OVERRIDES = [
    "model.backbone.input_height=64",
    "model.backbone.input_width=32",
    "model.backbone.stage_channels=[8,16,32,64]",
    "model.dpu.reduced_channels=8",
    "model.embed_dim=16",
    "data.image_height=64",
    "data.image_width=32",
    "data.n_identities=6",
    "data.images_per_identity=10",
    "data.train_ratio=0.5",
    "data.query_per_identity=2",
    "data.num_workers=2",
    "data.color_separation=0.15",
    "sampler.identities_per_batch=2",
    "sampler.instances_per_identity=2",
    "optimizer.epochs=2",
    "optimizer.decay_epochs=[1]",
    "augment.pad=2",
    "train.eval_every=1",
    "memory_bank.capacity_batches=2",
]


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="运行完整训练的慢测试")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 在默认配置上完整训练（几分钟）")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow") or os.getenv("DROP_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="慢测试：加 --run-slow 或设置 DROP_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_tiny_config(tmp_path, extra=()) -> RunConfig:
    overrides = list(TINY_OVERRIDES) + [
        f"paths.data_dir={tmp_path / 'data'}",
        f"paths.output_dir={tmp_path / 'run'}",
        f"logging.log_dir={tmp_path / 'logs'}",
        "device=cpu",
    ] + list(extra)
    return build_config({}, overrides)


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    return make_tiny_config(tmp_path)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """(配置, 数据集目录)；整个测试会话只生成一次"""
    root = tmp_path_factory.mktemp("tiny")
    config = make_tiny_config(root)
    generate_dataset(config.data, config.paths.data_dir, show_progress=False)
    return config, root / "data"
