import json

import numpy as np
import pytest
import torch

from drop_reid.config import OptimizerConfig, config_with
from drop_reid.data.dataset import MANIFEST_NAME, write_manifest
from drop_reid.errors import DataError
from drop_reid.trainer import (BEST_CHECKPOINT, LAST_CHECKPOINT, METRIC_LOG, Trainer, build_optimizer,
                               lr_at_epoch, load_checkpoint, model_from_checkpoint, train)

FAST = ["train.eval_every=0", "train.max_batches_per_epoch=2"]


def make_trainer(tiny_dataset, tmp_path, extra=(), name="run"):
    config, data_dir = tiny_dataset
    config = config_with(config, FAST + list(extra))
    return Trainer(config, data_dir=data_dir, output_dir=tmp_path / name, show_progress=False)


# ---------------------------------------------------------------- 学习率

@pytest.mark.parametrize("epoch,expected", [(0, 3.5e-4), (39, 3.5e-4), (40, 3.5e-5), (69, 3.5e-5),
                                            (70, 3.5e-6), (119, 3.5e-6)])
def test_lr_schedule_closed_form(epoch, expected):
    config = OptimizerConfig(lr=3.5e-4, decay_factor=0.1, decay_epochs=[40, 70], epochs=120)
    assert lr_at_epoch(config, epoch) == pytest.approx(expected)


def test_scheduler_matches_closed_form():
    config = OptimizerConfig(lr=1e-3, decay_factor=0.5, decay_epochs=[2, 4], epochs=6)
    model = torch.nn.Linear(2, 2)
    optimizer, scheduler = build_optimizer(model, config)
    for epoch in range(config.epochs):
        assert optimizer.param_groups[0]["lr"] == pytest.approx(lr_at_epoch(config, epoch))
        optimizer.step()
        scheduler.step()


# ---------------------------------------------------------------- 单步

def test_train_step_reports_finite_losses(tiny_dataset, tmp_path):
    trainer = make_trainer(tiny_dataset, tmp_path)
    stats = trainer.train_epoch(0)
    assert stats.batches == 2
    # 每轮第一批记忆库为空
    assert stats.degenerate_batches >= 1
    for key in ("loss_total", "loss_reid", "loss_hp", "loss_hp_ce"):
        value = getattr(stats, key)
        assert value == value and value > 0
    assert 0.0 <= stats.pixel_accuracy <= 1.0
    assert len(trainer.bank) == 2 * trainer.config.sampler.batch_size


def test_same_seed_gives_identical_losses(tiny_dataset, tmp_path):
    a = make_trainer(tiny_dataset, tmp_path, name="a").train_epoch(0)
    b = make_trainer(tiny_dataset, tmp_path, name="b").train_epoch(0)
    assert a.batch_losses == pytest.approx(b.batch_losses, rel=1e-6)


def test_parsing_untouched_without_parsing_loss(tiny_dataset, tmp_path):
    trainer = make_trainer(tiny_dataset, tmp_path, ["loss.lambda_hp=0"])
    before = [p.detach().clone() for p in trainer.model.parsing_head_parameters()]
    trainer.train_epoch(0)
    for param, old in zip(trainer.model.parsing_head_parameters(), before):
        assert param.grad is None or torch.all(param.grad == 0)
        assert torch.equal(param.detach(), old)


def test_smoothing_disabled_reports_zero(tiny_dataset, tmp_path):
    stats = make_trainer(tiny_dataset, tmp_path, ["loss.gamma_smooth=0"]).train_epoch(0)
    assert stats.loss_hp_smooth == 0.0
    assert stats.loss_hp == pytest.approx(stats.loss_hp_ce)


@pytest.mark.parametrize("mode", ["part_average", "part_hct"])
def test_baseline_triplets_train(tiny_dataset, tmp_path, mode):
    trainer = make_trainer(tiny_dataset, tmp_path, [f"loss.triplet_mode={mode}"])
    stats = trainer.train_epoch(0)
    assert stats.batches == 2
    assert trainer.bank.is_empty()


def test_empty_training_split(tmp_path, tiny_config):
    data_dir = tmp_path / "empty"
    data_dir.mkdir()
    write_manifest([], data_dir / MANIFEST_NAME)
    with pytest.raises(DataError):
        Trainer(tiny_config, data_dir=data_dir, output_dir=tmp_path / "run", show_progress=False)


# ---------------------------------------------------------------- 完整训练与恢复

def test_fit_writes_checkpoints_and_metrics(tiny_dataset, tmp_path):
    config, data_dir = tiny_dataset
    config = config_with(config, ["train.max_batches_per_epoch=2", "train.eval_every=1"])
    result = train(config, data_dir=data_dir, output_dir=tmp_path / "run", show_progress=False)

    assert result["epochs"] == 2
    assert len(result["history"]) == 2
    assert (tmp_path / "run" / LAST_CHECKPOINT).exists()
    assert result["best_checkpoint"] == str(tmp_path / "run" / BEST_CHECKPOINT)
    assert 0.0 <= result["best_metric"] <= 1.0
    assert all("eval_mAP" in h for h in result["history"])
    assert result["history"][0]["lr"] == pytest.approx(3.5e-4)
    assert result["history"][1]["lr"] == pytest.approx(3.5e-5)

    lines = (tmp_path / "run" / METRIC_LOG).read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    assert json.loads(lines[1])["epoch"] == 2

    state = load_checkpoint(tmp_path / "run" / LAST_CHECKPOINT)
    assert state["epoch"] == 2
    model = model_from_checkpoint(state)
    assert not model.training


def test_resume_reproduces_uninterrupted_run(tiny_dataset, tmp_path):
    full = make_trainer(tiny_dataset, tmp_path, name="full").fit()

    first = make_trainer(tiny_dataset, tmp_path, name="part")
    first.train_epoch(0)
    first.scheduler.step()
    checkpoint = first.save(tmp_path / "part" / LAST_CHECKPOINT, epoch=1)

    resumed = make_trainer(tiny_dataset, tmp_path, name="resumed")
    assert resumed.resume(checkpoint) == 1
    stats = resumed.train_epoch(1)
    assert stats.lr == pytest.approx(full["history"][1]["lr"])
    assert stats.loss_total == pytest.approx(full["history"][1]["loss_total"], rel=1e-5)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "nope.pt")


def assert_same_state(a, b, where="state"):
    """逐项精确比较检查点内容（张量与数组逐元素相等）"""
    if isinstance(a, torch.Tensor):
        assert isinstance(b, torch.Tensor) and a.dtype == b.dtype and torch.equal(a, b), where
    elif isinstance(a, np.ndarray):
        assert np.array_equal(a, b), where
    elif isinstance(a, dict):
        assert set(a) == set(b), where
        for key in a:
            assert_same_state(a[key], b[key], f"{where}.{key}")
    elif isinstance(a, (list, tuple)):
        assert len(a) == len(b), where
        for i, (x, y) in enumerate(zip(a, b)):
            assert_same_state(x, y, f"{where}[{i}]")
    else:
        assert a == b, where


def test_checkpoint_save_load_save_is_exact(tiny_dataset, tmp_path):
    trainer = make_trainer(tiny_dataset, tmp_path, name="a")
    trainer.train_epoch(0)
    trainer.scheduler.step()
    first = trainer.save(tmp_path / "first.pt", epoch=1)

    restored = make_trainer(tiny_dataset, tmp_path, name="b")
    restored.resume(first)
    second = restored.save(tmp_path / "second.pt", epoch=1)

    a, b = load_checkpoint(first), load_checkpoint(second)
    assert a["optimizer"]["state"], "训练一轮后优化器应有动量状态"
    assert_same_state(a, b)
