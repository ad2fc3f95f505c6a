"""
训练流程
每个批次：骨干 → 解析 → P_reid → 嵌入 → 写入 PEMB → L_reid + L_pct + λ·L_hp → 优化器更新
"""
import logging
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from .config import OptimizerConfig, RunConfig
from .data.dataset import (IdentityBalancedSampler, ManifestDataset, build_label_map,
                           read_manifest)
from .errors import ConfigError, DataError, NumericalError
from .logging_utils import MetricLog
from .losses import (LossDiagnostics, baseline_losses, parsing_loss_terms, parsing_pixel_accuracy,
                     pct_loss_from_bank, reid_ce_loss, total_loss)
from .memory_bank import PartsMemoryBank
from .models.network import DROPNet
from .retrieval import EmbeddingIndex

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LAST_CHECKPOINT = "last.pt"
BEST_CHECKPOINT = "best.pt"
METRIC_LOG = "metrics.jsonl"


def set_determinism(seed: int) -> None:
    """固定 python / numpy / torch 随机源；DROP_NUM_THREADS 控制 CPU 线程数"""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    threads = os.getenv("DROP_NUM_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    torch.use_deterministic_algorithms(True, warn_only=True)


def lr_at_epoch(config: OptimizerConfig, epoch: int) -> float:
    """闭式学习率：lr · decay_factor^{#(decay_epochs ≤ epoch)}"""
    decays = sum(1 for e in config.decay_epochs if e <= epoch)
    return config.lr * config.decay_factor ** decays


def build_optimizer(model: torch.nn.Module, config: OptimizerConfig):
    """
    Adam + MultiStepLR

    Returns:
        (optimizer, scheduler)
    """
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.lr, betas=tuple(config.betas),
                                 weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=list(config.decay_epochs),
                                                     gamma=config.decay_factor)
    return optimizer, scheduler


def _rng_state() -> dict:
    return {
        "python": random.getstate(),
        "numpy": np.random.get_state(),
        "torch": torch.get_rng_state(),
    }


def _restore_rng(state: dict) -> None:
    random.setstate(state["python"])
    np.random.set_state(state["numpy"])
    torch.set_rng_state(state["torch"])


def save_checkpoint(path, model: DROPNet, optimizer, scheduler, epoch: int,
                    config: RunConfig, extra: Optional[dict] = None) -> Path:
    """
    保存检查点

    Args:
        path: 输出文件
        model: 网络
        optimizer: 优化器
        scheduler: 学习率调度器
        epoch: 已完成的轮数
        config: 运行配置（以 model_dump 形式保存）
        extra: 其他需要保存的信息（如训练身份映射、评估指标）
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {
        "format_version": CHECKPOINT_VERSION,
        "model": model.state_dict(),
        "num_classes": model.num_classes,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "epoch": epoch,
        "config": config.model_dump(),
        "rng": _rng_state(),
        "extra": extra or {},
    }
    torch.save(state, path)
    return path


def load_checkpoint(path, map_location="cpu") -> dict:
    """
    读取检查点

    Raises:
        DataError: 文件不存在或版本不受支持
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"检查点不存在: {path}")
    state = torch.load(path, map_location=map_location, weights_only=False)
    if state.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"检查点版本 {state.get('format_version')} 不受支持")
    return state


def model_from_checkpoint(state: dict, device: str = "cpu") -> DROPNet:
    config = RunConfig.model_validate(state["config"])
    model = DROPNet(config.model, state["num_classes"])
    model.load_state_dict(state["model"])
    return model.to(device).eval()


@dataclass
class EpochStats:
    """一轮训练的平均损失与统计"""

    epoch: int
    lr: float
    loss_total: float = 0.0
    loss_reid: float = 0.0
    loss_pct: float = 0.0
    loss_hp: float = 0.0
    loss_hp_ce: float = 0.0
    loss_hp_smooth: float = 0.0
    pixel_accuracy: float = 0.0
    degenerate_batches: int = 0
    batches: int = 0
    batch_losses: List[float] = field(default_factory=list)

    def record(self) -> Dict[str, float]:
        data = {k: v for k, v in self.__dict__.items() if k != "batch_losses"}
        return data


class Trainer:
    """
    训练器

    Args:
        config: 运行配置
        data_dir: 数据集目录（默认 config.paths.data_dir）
        output_dir: 检查点与指标日志目录（默认 config.paths.output_dir）
        show_progress: 是否显示进度条
    """

    def __init__(self, config: RunConfig, data_dir=None, output_dir=None, show_progress: bool = True):
        self.config = config
        self.data_dir = Path(data_dir or config.paths.data_dir)
        self.output_dir = Path(output_dir or config.paths.output_dir)
        self.show_progress = show_progress
        self.device = torch.device(config.device)

        set_determinism(config.seed)

        rows = read_manifest(self.data_dir)
        train_rows = [r for r in rows if r.split == "train"]
        if not train_rows:
            raise DataError(f"数据集 {self.data_dir} 没有训练样本")
        self.rows = rows
        self.label_map = build_label_map(train_rows)
        num_classes = len(self.label_map)

        self.train_set = ManifestDataset(
            self.data_dir, "train", config.model.num_parts,
            mask_stride=config.model.backbone.stem_stride,
            augment_config=config.augment, label_map=self.label_map,
            seed=config.seed, rows=rows,
        )
        self.sampler = IdentityBalancedSampler(
            self.train_set.labels, config.sampler.identities_per_batch,
            config.sampler.instances_per_identity, seed=config.seed,
        )
        self.loader = DataLoader(self.train_set, batch_sampler=self.sampler,
                                 num_workers=config.train.num_workers)

        self.model = DROPNet(config.model, num_classes).to(self.device)
        self.optimizer, self.scheduler = build_optimizer(self.model, config.optimizer)
        self.bank = PartsMemoryBank(config.memory_bank.capacity_batches, config.sampler.batch_size)
        self.start_epoch = 0
        self.best_metric = -1.0

        self.metric_log = MetricLog(self.output_dir / METRIC_LOG)

    # ---------------------------------------------------------------- 检查点

    def save(self, path, epoch: int, extra: Optional[dict] = None) -> Path:
        payload = {"label_map": self.label_map, "best_metric": self.best_metric}
        payload.update(extra or {})
        return save_checkpoint(path, self.model, self.optimizer, self.scheduler, epoch, self.config, payload)

    def resume(self, path) -> int:
        """
        从检查点恢复模型、优化器、调度器与随机状态

        Returns:
            int: 下一轮的序号
        """
        state = load_checkpoint(path, map_location=self.device)
        if state["num_classes"] != self.model.num_classes:
            raise ConfigError(f"检查点身份数 {state['num_classes']} 与数据集 {self.model.num_classes} 不一致")
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])
        _restore_rng(state["rng"])
        self.best_metric = state["extra"].get("best_metric", -1.0)
        self.start_epoch = state["epoch"]
        logger.info(f"已从 {path} 恢复，继续第 {self.start_epoch + 1} 轮")
        return self.start_epoch

    # ---------------------------------------------------------------- 训练

    def _triplet_loss(self, part_embs: torch.Tensor, visibility: torch.Tensor,
                      labels: torch.Tensor) -> tuple:
        mode = self.config.loss.triplet_mode
        margin = self.config.loss.margin
        if mode != "pct":
            return baseline_losses(part_embs, labels, mode=mode, margin=margin)

        skip = self.bank.is_empty()
        self.bank.push_batch(part_embs, visibility, labels)
        if skip:
            # 本轮第一批：记忆库为空，不计算 PCT
            return part_embs.sum() * 0.0, LossDiagnostics(degenerate=True)
        return pct_loss_from_bank(self.bank.snapshot(), margin)

    def train_step(self, batch: Dict[str, torch.Tensor], batch_index: int) -> Dict[str, float]:
        """
        单个批次的前向、反向与参数更新

        Returns:
            dict: 各损失项与统计
        """
        loss_cfg = self.config.loss
        images = batch["image"].to(self.device)
        masks = batch["mask"].to(self.device)
        labels = batch["label"].to(self.device)

        try:
            output = self.model(images)
        except NumericalError as e:
            e.batch_index = batch_index
            raise

        l_reid = reid_ce_loss(output.logits, labels, loss_cfg.epsilon_ls, loss_cfg.reid_reduction)
        visibility = output.parsing.visibility_scores.detach() > self.config.model.visibility_threshold
        l_pct, diagnostics = self._triplet_loss(output.embeddings.part_embs, visibility, labels)
        hp_terms = parsing_loss_terms(output.parsing.part_probs, masks, loss_cfg.epsilon_ls, loss_cfg.gamma_smooth)
        loss = total_loss(l_reid, l_pct, hp_terms.total, loss_cfg.lambda_hp, batch_index=batch_index)

        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()

        return {
            "loss_total": float(loss.detach()),
            "loss_reid": float(l_reid.detach()),
            "loss_pct": float(l_pct.detach()),
            "loss_hp": float(hp_terms.total.detach()),
            "loss_hp_ce": float(hp_terms.cross_entropy.detach()),
            "loss_hp_smooth": float(hp_terms.smooth.detach()),
            "pixel_accuracy": parsing_pixel_accuracy(output.parsing.part_probs.detach(), masks),
            "degenerate": int(diagnostics.degenerate),
        }

    def train_epoch(self, epoch: int) -> EpochStats:
        self.model.train()
        self.sampler.set_epoch(epoch)
        self.train_set.set_epoch(epoch)
        if self.config.memory_bank.reset_each_epoch or epoch == self.start_epoch:
            self.bank.reset()

        stats = EpochStats(epoch=epoch + 1, lr=self.optimizer.param_groups[0]["lr"])
        limit = self.config.train.max_batches_per_epoch
        total = len(self.sampler) if limit is None else min(limit, len(self.sampler))
        sums: Dict[str, float] = {}
        progress = tqdm(self.loader, total=total, desc=f"epoch {epoch + 1}", disable=not self.show_progress)
        for batch_index, batch in enumerate(progress):
            if limit is not None and batch_index >= limit:
                break
            step = self.train_step(batch, batch_index)
            stats.batches += 1
            stats.degenerate_batches += step.pop("degenerate")
            stats.batch_losses.append(step["loss_total"])
            for key, value in step.items():
                sums[key] = sums.get(key, 0.0) + value
            progress.set_postfix(loss=f"{step['loss_total']:.4f}")

        for key, value in sums.items():
            setattr(stats, key, value / max(stats.batches, 1))
        return stats

    def fit(self, resume_from=None) -> Dict[str, object]:
        """
        完整训练

        Args:
            resume_from: 检查点路径（可选）

        Returns:
            dict: {epochs, last_checkpoint, best_checkpoint, best_metric, history}
        """
        from .evaluator import evaluate_model

        if resume_from is not None:
            self.resume(resume_from)

        cfg = self.config
        history = []
        best_path = None
        for epoch in range(self.start_epoch, cfg.optimizer.epochs):
            stats = self.train_epoch(epoch)
            self.scheduler.step()
            record = stats.record()

            if cfg.train.eval_every and (epoch + 1) % cfg.train.eval_every == 0:
                report = evaluate_model(self.model, self.data_dir, cfg, modes=[cfg.train.best_mode],
                                        rows=self.rows, show_progress=False)
                metric = report.rows[0]["mAP"]
                record["eval_mode"] = cfg.train.best_mode
                record["eval_rank1"] = report.rows[0]["rank1"]
                record["eval_mAP"] = metric
                if metric > self.best_metric:
                    self.best_metric = metric
                    best_path = self.save(self.output_dir / BEST_CHECKPOINT, epoch + 1)

            self.metric_log.write("epoch", record)
            logger.info(
                f"第 {epoch + 1}/{cfg.optimizer.epochs} 轮: loss={stats.loss_total:.4f} "
                f"reid={stats.loss_reid:.4f} pct={stats.loss_pct:.4f} hp={stats.loss_hp:.4f} "
                f"acc={stats.pixel_accuracy:.3f} lr={stats.lr:.2e}"
            )
            history.append(record)
            self.save(self.output_dir / LAST_CHECKPOINT, epoch + 1)

        self.metric_log.close()
        return {
            "epochs": cfg.optimizer.epochs,
            "last_checkpoint": str(self.output_dir / LAST_CHECKPOINT),
            "best_checkpoint": str(best_path) if best_path else None,
            "best_metric": self.best_metric,
            "history": history,
        }


def train(config: RunConfig, data_dir=None, output_dir=None, resume_from=None,
          show_progress: bool = True) -> Dict[str, object]:
    """训练入口"""
    trainer = Trainer(config, data_dir=data_dir, output_dir=output_dir, show_progress=show_progress)
    return trainer.fit(resume_from=resume_from)


@torch.no_grad()
def extract_index(model: DROPNet, dataset: ManifestDataset, device="cpu",
                  batch_size: int = 64, show_progress: bool = False) -> EmbeddingIndex:
    """
    在评估模式下提取一个划分的检索嵌入（BN 之后）

    Args:
        model: 网络
        dataset: 划分数据集（不增强）
        device: 设备
        batch_size: 批大小

    Returns:
        EmbeddingIndex
    """
    was_training = model.training
    model.eval()
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    parts = {"global": [], "foreground": [], "parts": [], "visibility": [], "identity": [], "camera": []}
    for batch in tqdm(loader, desc=f"提取 {dataset.split}", disable=not show_progress):
        emb = model.extract(batch["image"].to(device))
        parts["global"].append(emb.global_emb.cpu().numpy())
        parts["foreground"].append(emb.foreground_emb.cpu().numpy())
        parts["parts"].append(emb.part_embs.cpu().numpy())
        parts["visibility"].append(emb.visibility.cpu().numpy())
        parts["identity"].append(batch["identity"].numpy())
        parts["camera"].append(batch["camera"].numpy())
    model.train(was_training)

    if not parts["global"]:
        raise DataError(f"划分 {dataset.split} 为空")
    return EmbeddingIndex(
        global_emb=np.concatenate(parts["global"]),
        foreground_emb=np.concatenate(parts["foreground"]),
        part_embs=np.concatenate(parts["parts"]),
        visibility=np.concatenate(parts["visibility"]),
        identities=np.concatenate(parts["identity"]),
        cameras=np.concatenate(parts["camera"]),
        image_paths=[r.image_path for r in dataset.rows],
    )
