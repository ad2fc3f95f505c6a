import json

import numpy as np
import pytest
from PIL import Image
from rich.console import Console

from drop_reid.ablation import (ABLATION_AXES, K_GRID, ablate, axis_overrides, component_grid, parse_axes,
                                parse_part_counts, part_count_grid, render_ablation)
from drop_reid.config import config_with
from drop_reid.data import read_manifest
from drop_reid.errors import ConfigError


class FakeTrain:
    """记录每次调用的配置，按调用次数返回递增的指标"""

    def __init__(self):
        self.calls = []
        self.data_dirs = []

    def __call__(self, config, data_dir=None, output_dir=None, show_progress=True):
        self.calls.append((config, output_dir))
        self.data_dirs.append(data_dir)
        n = len(self.calls)
        history = [
            {"pixel_accuracy": 0.5, "loss_hp_smooth": 0.1, "eval_rank1": 0.1 * n, "eval_mAP": 0.05 * n},
            {"pixel_accuracy": 0.6, "loss_hp_smooth": 0.2, "eval_rank1": 0.05 * n, "eval_mAP": 0.01 * n},
        ]
        return {"history": history, "best_checkpoint": f"{output_dir}/best.pt", "last_checkpoint": None}


def test_parse_axes():
    assert parse_axes("decouple, ppf") == ["decouple", "ppf"]
    assert parse_axes("") == []
    with pytest.raises(ConfigError):
        parse_axes("decouple,dropout")


def test_stepwise_grid_has_six_rows():
    rows = component_grid(ABLATION_AXES, "stepwise")
    assert [r.name for r in rows] == ["Baseline", "decouple", "decouple+ppf", "decouple+ppf+pct",
                                      "decouple+ppf+ss", "decouple+ppf+pct+ss"]
    assert "model.decouple=false" in rows[0].overrides
    assert "loss.gamma_smooth=0" in rows[0].overrides
    assert "loss.triplet_mode=pct" in rows[-1].overrides


def test_stepwise_grid_restricted_to_axes():
    rows = component_grid(["pct", "ss"], "stepwise")
    assert [r.enabled for r in rows] == [[], ["pct"], ["ss"], ["pct", "ss"]]
    # 未参与消融的组件保持完整模型设置
    assert "model.decouple=true" in rows[0].overrides
    assert "model.position.mode=1d_height" in rows[0].overrides


def test_full_grid_is_power_set():
    rows = component_grid(["decouple", "ppf", "ss"], "full")
    assert len(rows) == 8
    assert len({tuple(r.enabled) for r in rows}) == 8


def test_unknown_grid():
    with pytest.raises(ConfigError):
        component_grid(["pct"], "half")


def test_axis_overrides_toggle():
    assert axis_overrides([], ["pct"]) == ["model.decouple=true", "model.position.mode=1d_height",
                                            "loss.triplet_mode=part_average", "loss.gamma_smooth=0.5"]


def test_ablate_runs_every_row(tiny_config, tmp_path):
    fake = FakeTrain()
    tables = ablate(tiny_config, axes="decouple,ss", grid="full", loss_grid=True, position_grid=True,
                    output_dir=tmp_path, train_fn=fake, show_progress=False)

    assert set(tables) == {"components", "loss", "position"}
    assert len(fake.calls) == 4 + 3 + 3
    first_config, first_dir = fake.calls[0]
    assert first_config.model.decouple is False
    assert first_config.loss.gamma_smooth == 0
    assert first_dir == tmp_path / "components" / "00_Baseline"

    loss_configs = [config.loss.triplet_mode for config, _ in fake.calls[4:7]]
    assert loss_configs == ["pct", "part_average", "part_hct"]
    position_modes = [config.model.position.mode for config, _ in fake.calls[7:]]
    assert position_modes == ["none", "1d_height", "2d"]

    row = tables["components"][1]
    # 取评估 mAP 最高的一轮，解析指标取最后一轮
    assert row.mAP == pytest.approx(0.1)
    assert row.rank1 == pytest.approx(0.2)
    assert row.pixel_accuracy == pytest.approx(0.6)
    assert row.checkpoint.endswith("best.pt")

    saved = json.loads((tmp_path / "ablation.json").read_text(encoding="utf-8"))
    assert len(saved) == 10


def test_ablate_turns_on_evaluation(tiny_config, tmp_path):
    fake = FakeTrain()
    config = config_with(tiny_config, ["train.eval_every=0"])
    ablate(config, axes="pct", output_dir=tmp_path, train_fn=fake, show_progress=False)
    assert all(c.train.eval_every == c.optimizer.epochs for c, _ in fake.calls)


def test_render_ablation():
    rows = component_grid(["pct"], "stepwise")
    console = Console(record=True, width=120)
    render_ablation(rows, ["pct"], console, title="组件消融")
    text = console.export_text()
    assert "Baseline" in text and "组件消融" in text


# ---------------------------------------------------------------- 基础配置决定开启值

def test_enabled_axes_keep_base_values(tiny_config):
    base = config_with(tiny_config, ["model.position.mode=2d", "loss.gamma_smooth=0.8"])
    full_model = component_grid(["ppf", "ss"], "stepwise", base=base)[-1]
    assert full_model.enabled == ["ppf", "ss"]
    assert full_model.overrides == []
    on = config_with(base, full_model.overrides)
    assert on.model.position.mode == "2d"
    assert on.loss.gamma_smooth == 0.8


def test_axes_off_in_base_use_default_on_value(tiny_config):
    base = config_with(tiny_config, ["loss.gamma_smooth=0", "model.position.mode=none",
                                     "loss.triplet_mode=part_hct", "model.decouple=false"])
    rows = component_grid(ABLATION_AXES, "stepwise", base=base)
    full_model = config_with(base, rows[-1].overrides)
    assert full_model.loss.gamma_smooth == 0.5
    assert full_model.model.position.mode == "1d_height"
    assert full_model.loss.triplet_mode == "pct"
    assert full_model.model.decouple is True
    baseline = config_with(base, rows[0].overrides)
    assert baseline.loss.gamma_smooth == 0
    assert baseline.loss.triplet_mode == "part_average"


def test_ablate_labels_match_trained_configs(tiny_config, tmp_path):
    fake = FakeTrain()
    base = config_with(tiny_config, ["loss.gamma_smooth=0", "model.position.mode=2d"])
    tables = ablate(base, axes="ss,ppf", grid="full", output_dir=tmp_path, train_fn=fake, show_progress=False)
    for row, (config, _) in zip(tables["components"], fake.calls):
        assert ("ss" in row.enabled) == (config.loss.gamma_smooth > 0)
        assert ("ppf" in row.enabled) == (config.model.position.mode != "none")
        if "ppf" in row.enabled:
            assert config.model.position.mode == "2d"


# ---------------------------------------------------------------- 部件数对比

def test_part_count_grid_rows():
    rows = part_count_grid()
    assert [r.name for r in rows] == [f"K={k}" for k in K_GRID]
    assert K_GRID == (3, 4, 5, 6, 7, 8)
    assert rows[0].overrides == ["data.num_parts=3", "model.num_parts=3"]


@pytest.mark.parametrize("bad", ["", "2", "3,9", "a,b"])
def test_bad_part_counts(bad):
    with pytest.raises(ConfigError):
        parse_part_counts(bad)


def test_k_grid_regenerates_data_per_k(tiny_config, tmp_path):
    fake = FakeTrain()
    tables = ablate(tiny_config, axes="", k_grid="3,8", output_dir=tmp_path, train_fn=fake, show_progress=False)

    assert [r.name for r in tables["k"]] == ["K=3", "K=8"]
    assert [c.model.num_parts for c, _ in fake.calls] == [3, 8]
    assert [c.data.num_parts for c, _ in fake.calls] == [3, 8]
    # K=3 需要新数据；K=8 与基础配置相同，沿用原数据目录
    assert fake.data_dirs[0] == tmp_path / "k" / "00_K3" / "data"
    assert fake.data_dirs[1] is None
    masks_max = [int(np.asarray(Image.open(fake.data_dirs[0] / row.mask_path)).max())
                 for row in read_manifest(fake.data_dirs[0])]
    assert max(masks_max) <= 3

    assert tables["k"][0].rank1 == pytest.approx(0.1)
    saved = json.loads((tmp_path / "ablation.json").read_text(encoding="utf-8"))
    assert [r["name"] for r in saved] == ["K=3", "K=8"]
