import json

import numpy as np
import pytest
from rich.console import Console

from drop_reid.config import config_with
from drop_reid.errors import DataError
from drop_reid.evaluator import (CMC_PLOT_NAME, REPORT_NAME, STRIPS_NAME, EvaluationReport, evaluate_cmd,
                                 evaluate_indexes, export_embeddings)
from drop_reid.index_store import EmbeddingIndexStore
from drop_reid.retrieval import EmbeddingIndex
from drop_reid.trainer import train

MODE_GRID = ["G", "F", "P", "G+F", "F+P", "G+F+P"]


def separable_index(identities, cameras, k=4, c=6, seed=0, noise=0.0):
    """每个身份一个独立方向，所有部件可见"""
    rng = np.random.default_rng(seed)
    identities = np.asarray(identities)
    centers = np.eye(c)[identities] * 5.0
    jitter = rng.normal(scale=noise, size=(identities.size, c)) if noise else 0.0
    return EmbeddingIndex(
        global_emb=centers + jitter,
        foreground_emb=centers + jitter,
        part_embs=np.repeat((centers + jitter)[:, None, :], k, axis=1),
        visibility=np.ones((identities.size, k), dtype=bool),
        identities=identities,
        cameras=np.asarray(cameras),
    )


@pytest.fixture(scope="module")
def trained(tiny_dataset, tmp_path_factory):
    config, data_dir = tiny_dataset
    config = config_with(config, ["optimizer.epochs=1", "optimizer.decay_epochs=[]",
                                  "train.eval_every=0", "train.max_batches_per_epoch=2"])
    out = tmp_path_factory.mktemp("trained")
    result = train(config, data_dir=data_dir, output_dir=out, show_progress=False)
    return result["last_checkpoint"], data_dir


# ---------------------------------------------------------------- 已提取索引上的评估

def test_mode_grid_on_separable_index():
    queries = separable_index([0, 1, 2], [0, 0, 0], noise=0.01, seed=1)
    gallery = separable_index([0, 0, 1, 1, 2, 2], [1, 0, 1, 0, 1, 0], noise=0.01, seed=2)
    report, results = evaluate_indexes(queries, gallery, MODE_GRID)

    assert [row["mode"] for row in report.rows] == MODE_GRID
    assert set(results) == set(MODE_GRID)
    for row in report.rows:
        assert row["rank1"] == 1.0
        assert row["mAP"] == pytest.approx(1.0)
        assert row["mean_shared_parts"] == 4.0
    assert report.num_queries == 3 and report.num_gallery == 6
    assert report.part_visibility_rate == [1.0] * 4
    assert len(report.cmc["F+P"]) == 6


def test_visibility_rate_per_part():
    queries = separable_index([0, 1], [0, 0])
    queries.visibility[0, 3] = False
    gallery = separable_index([0, 1], [1, 1])
    report, _ = evaluate_indexes(queries, gallery, ["P"], names=["a", "b", "c", "d"])
    assert report.part_names == ["a", "b", "c", "d"]
    assert report.part_visibility_rate == [1.0, 1.0, 1.0, 0.5]
    # query 0 的 top-1 只与其共享三个可见部件
    assert report.rows[0]["mean_shared_parts"] == pytest.approx(3.5)


def test_no_queries():
    empty = separable_index(np.zeros(0, dtype=int), np.zeros(0, dtype=int))
    with pytest.raises(DataError):
        evaluate_indexes(empty, separable_index([0], [1]), ["G"])


def test_report_save_and_render(tmp_path):
    queries = separable_index([0, 1], [0, 0])
    gallery = separable_index([0, 1], [1, 1])
    report, _ = evaluate_indexes(queries, gallery, ["G", "F+P"])
    path = report.save(tmp_path / "nested" / "report.json")
    assert json.loads(path.read_text(encoding="utf-8")) == report.to_dict()

    console = Console(record=True, width=120)
    report.render(console)
    text = console.export_text()
    assert "F+P" in text and "100.0" in text


# ---------------------------------------------------------------- 检查点评估与导出

def test_evaluate_checkpoint_writes_artifacts(trained, tmp_path):
    checkpoint, data_dir = trained
    report = evaluate_cmd(checkpoint, data_dir=data_dir, modes=MODE_GRID, output_dir=tmp_path,
                          show_progress=False)
    assert isinstance(report, EvaluationReport)
    assert [row["mode"] for row in report.rows] == MODE_GRID
    assert report.num_queries == 12 and report.num_gallery == 18
    for row in report.rows:
        assert 0.0 <= row["mAP"] <= 1.0
        assert row["rank1"] <= row["rank5"] <= row["rank10"]
    for name in (REPORT_NAME, CMC_PLOT_NAME, STRIPS_NAME):
        assert (tmp_path / name).exists()


def test_evaluation_is_deterministic(trained, tmp_path):
    checkpoint, data_dir = trained
    first = evaluate_cmd(checkpoint, data_dir=data_dir, modes=["F+P"], output_dir=tmp_path / "a",
                         plot=False, strips=False, show_progress=False)
    second = evaluate_cmd(checkpoint, data_dir=data_dir, modes=["F+P"], output_dir=tmp_path / "b",
                          plot=False, strips=False, show_progress=False)
    assert first.rows == second.rows
    assert not (tmp_path / "a" / CMC_PLOT_NAME).exists()


def test_exported_index_reproduces_evaluation(trained, tmp_path):
    checkpoint, data_dir = trained
    out = tmp_path / "index.db"
    counts = export_embeddings(checkpoint, data_dir=data_dir, out_path=out, show_progress=False)
    assert counts == {"query": 12, "gallery": 18, "total": 30}

    store = EmbeddingIndexStore(out)
    queries, gallery = store.load("query"), store.load("gallery")
    report, _ = evaluate_indexes(queries, gallery, ["F+P"])
    direct = evaluate_cmd(checkpoint, data_dir=data_dir, modes=["F+P"], output_dir=tmp_path / "eval",
                          plot=False, strips=False, show_progress=False)
    assert report.rows[0]["mAP"] == pytest.approx(direct.rows[0]["mAP"], abs=1e-6)
    assert report.rows[0]["rank1"] == pytest.approx(direct.rows[0]["rank1"])


def test_export_appends(trained, tmp_path):
    checkpoint, data_dir = trained
    out = tmp_path / "index.db"
    export_embeddings(checkpoint, data_dir=data_dir, out_path=out, splits=["query"], show_progress=False)
    counts = export_embeddings(checkpoint, data_dir=data_dir, out_path=out, splits=["gallery"],
                               show_progress=False)
    assert counts["total"] == 30
