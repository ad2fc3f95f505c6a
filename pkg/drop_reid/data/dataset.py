"""
数据集落盘与加载
图像目录 + 掩码目录 + manifest.csv（字段顺序固定，见 MANIFEST_FIELDS）
"""
import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import torch
import yaml
from PIL import Image
from torch.utils.data import Dataset, Sampler
from tqdm import tqdm

from ..config import AugmentConfig, SyntheticConfig
from ..errors import DataError
from .synthetic import (IdentityAppearance, Occlusion, Pose, Sample, augment, flip_label_table,
                        generate_identities, part_names, render_sample)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
META_NAME = "dataset.yaml"
MANIFEST_FIELDS = ["image_path", "mask_path", "identity", "camera", "split", "occluded"]
SPLITS = ("train", "query", "gallery")


@dataclass
class ManifestRow:
    image_path: str
    mask_path: str
    identity: int
    camera: int
    split: str
    occluded: bool


@dataclass
class _Plan:
    identity: int
    index: int
    split: str
    camera: int
    occlusion_prob: float


def split_plan(config: SyntheticConfig) -> List[_Plan]:
    """
    每张图像的划分、相机与遮挡概率

    训练身份的前 n_train 张用于训练（相机交替）；其余为评估图像：
    前 query_per_identity 张为 query（相机 0），其余为 gallery（第一张必为相机 1）。
    留出身份的全部图像都用于评估。
    """
    n_train = int(round(config.images_per_identity * config.train_ratio))
    n_train_ids = config.n_identities - config.holdout_identities
    plans = []
    for identity in range(config.n_identities):
        first_eval = n_train if identity < n_train_ids else 0
        for index in range(config.images_per_identity):
            if index < first_eval:
                plans.append(_Plan(identity, index, "train", index % 2, config.occlusion_prob))
                continue
            e = index - first_eval
            if e < config.query_per_identity:
                plans.append(_Plan(identity, index, "query", 0, config.query_occlusion_prob))
            else:
                camera = 1 if (e - config.query_per_identity) % 2 == 0 else 0
                plans.append(_Plan(identity, index, "gallery", camera, config.occlusion_prob))
    return plans


def render_planned(plan: _Plan, appearance: IdentityAppearance, config: SyntheticConfig) -> Sample:
    """按计划渲染一张样本（随机源只依赖 (种子, 身份, 序号)）"""
    rng = np.random.default_rng([config.rng_seed, plan.identity, plan.index, 1])
    pose = Pose.sample(rng)
    occlusion = Occlusion.sample(rng, plan.occlusion_prob, config.occluder_kind)
    return render_sample(appearance, pose, occlusion, config, camera=plan.camera, rng=rng)


def save_sample(sample: Sample, image_path: Path, mask_path: Path) -> None:
    """图像存为 RGB PNG，掩码存为单通道标签 PNG"""
    image_path.parent.mkdir(parents=True, exist_ok=True)
    mask_path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.round(sample.image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(image_path)
    Image.fromarray(sample.mask.astype(np.uint8)).save(mask_path)


def generate_dataset(config: SyntheticConfig, out_dir, show_progress: bool = True) -> List[ManifestRow]:
    """
    生成合成数据集并写入磁盘

    Args:
        config: 合成数据配置
        out_dir: 输出目录
        show_progress: 是否显示进度条

    Returns:
        list: manifest 记录（按身份、序号排序）
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    identities = generate_identities(config)
    plans = split_plan(config)

    def work(plan: _Plan) -> ManifestRow:
        sample = render_planned(plan, identities[plan.identity], config)
        name = f"{plan.identity:04d}_c{plan.camera}_{plan.index:03d}.png"
        image_rel = Path("images") / plan.split / name
        mask_rel = Path("masks") / plan.split / name
        save_sample(sample, out_dir / image_rel, out_dir / mask_rel)
        return ManifestRow(image_rel.as_posix(), mask_rel.as_posix(), plan.identity,
                           plan.camera, plan.split, sample.occluded)

    with ThreadPoolExecutor(max_workers=config.num_workers, thread_name_prefix="render") as executor:
        rows = list(tqdm(executor.map(work, plans), total=len(plans),
                         desc="生成样本", disable=not show_progress))

    write_manifest(rows, out_dir / MANIFEST_NAME)
    meta = {
        "synthetic": config.model_dump(),
        "part_names": part_names(config.num_parts),
        "num_train_identities": config.n_identities - config.holdout_identities,
        "counts": {split: sum(r.split == split for r in rows) for split in SPLITS},
    }
    with open(out_dir / META_NAME, "w", encoding="utf-8") as f:
        yaml.safe_dump(meta, f, allow_unicode=True, sort_keys=False)

    logger.info(f"数据集已生成: {out_dir} ({meta['counts']})")
    return rows


def write_manifest(rows: Sequence[ManifestRow], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        for row in rows:
            record = asdict(row)
            record["occluded"] = int(row.occluded)
            writer.writerow(record)


def read_manifest(data_dir) -> List[ManifestRow]:
    """
    读取 manifest

    Raises:
        DataError: 文件缺失或字段不符
    """
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"数据集 manifest 不存在: {path}（先运行 gen-data）")
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise DataError(f"manifest 字段应为 {MANIFEST_FIELDS}，实际为 {reader.fieldnames}")
        return [
            ManifestRow(r["image_path"], r["mask_path"], int(r["identity"]), int(r["camera"]),
                        r["split"], bool(int(r["occluded"])))
            for r in reader
        ]


def downsample_mask(mask: np.ndarray, factor: int, num_classes: int) -> np.ndarray:
    """
    按 factor×factor 块取众数下采样标签图（并列时取较小标签）

    Args:
        mask: [H, W]
        factor: 下采样倍数（H、W 需整除）
        num_classes: K+1
    """
    if factor == 1:
        return mask
    h, w = mask.shape
    blocks = mask.reshape(h // factor, factor, w // factor, factor)
    counts = np.eye(num_classes, dtype=np.int32)[blocks].sum(axis=(1, 3))
    return counts.argmax(axis=-1).astype(mask.dtype)


class ManifestDataset(Dataset):
    """
    按 manifest 读取某个划分

    Args:
        data_dir: 数据集目录
        split: train / query / gallery
        num_parts: K
        mask_stride: 掩码下采样倍数（等于 backbone 的 stem_stride）
        augment_config: 训练集增强配置（None 表示不增强）
        label_map: 全局身份 → 训练标签
        seed: 增强随机种子
    """

    def __init__(self, data_dir, split: str, num_parts: int, mask_stride: int = 1,
                 augment_config: Optional[AugmentConfig] = None,
                 label_map: Optional[Dict[int, int]] = None, seed: int = 0,
                 rows: Optional[Sequence[ManifestRow]] = None):
        self.data_dir = Path(data_dir)
        self.split = split
        self.num_parts = num_parts
        self.mask_stride = mask_stride
        self.augment_config = augment_config
        self.seed = seed
        self.epoch = 0
        self.flip_table = flip_label_table(num_parts)

        all_rows = rows if rows is not None else read_manifest(self.data_dir)
        self.rows = [r for r in all_rows if r.split == split]
        self.label_map = label_map if label_map is not None else build_label_map(self.rows)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def labels(self) -> List[int]:
        return [self.label_map[r.identity] for r in self.rows]

    def load_sample(self, index: int) -> Sample:
        row = self.rows[index]
        image = np.asarray(Image.open(self.data_dir / row.image_path).convert("RGB"), dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(self.data_dir / row.mask_path), dtype=np.uint8)
        if int(mask.max()) > self.num_parts:
            raise DataError(f"{row.mask_path} 的标签超过 K={self.num_parts}")
        return Sample(image.transpose(2, 0, 1).copy(), mask.copy(), row.identity, row.camera, row.occluded)

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        sample = self.load_sample(index)
        if self.augment_config is not None:
            rng = np.random.default_rng([self.seed, self.epoch, index, 2])
            sample = augment(sample, self.augment_config, rng, self.flip_table)

        mask = downsample_mask(sample.mask, self.mask_stride, self.num_parts + 1)
        return {
            "image": torch.from_numpy(np.ascontiguousarray(sample.image, dtype=np.float32)),
            "mask": torch.from_numpy(mask.astype(np.int64)),
            "label": torch.tensor(self.label_map[sample.identity], dtype=torch.long),
            "identity": torch.tensor(sample.identity, dtype=torch.long),
            "camera": torch.tensor(sample.camera, dtype=torch.long),
            "index": torch.tensor(index, dtype=torch.long),
        }


def build_label_map(rows: Sequence[ManifestRow]) -> Dict[int, int]:
    """全局身份 → 连续训练标签（按身份号升序）"""
    return {pid: i for i, pid in enumerate(sorted({r.identity for r in rows}))}


class IdentityBalancedSampler(Sampler):
    """
    P×I 批采样器：每批 P 个不同身份、每个身份 I 张图像
    实例不足 I 张的身份有放回抽样；每轮的批次顺序只由 (seed, epoch) 决定
    """

    def __init__(self, labels: Sequence[int], identities_per_batch: int,
                 instances_per_identity: int, seed: int = 0):
        self.labels = list(labels)
        self.p = identities_per_batch
        self.i = instances_per_identity
        self.seed = seed
        self.epoch = 0
        self._by_label: Dict[int, List[int]] = {}
        for idx, label in enumerate(self.labels):
            self._by_label.setdefault(label, []).append(idx)
        if len(self._by_label) < self.p:
            raise DataError(f"训练身份数 {len(self._by_label)} 少于每批身份数 {self.p}")

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    @property
    def batch_size(self) -> int:
        return self.p * self.i

    def _batches(self, epoch: int) -> List[List[int]]:
        rng = np.random.default_rng([self.seed, epoch, 3])
        chunks: Dict[int, List[List[int]]] = {}
        for label in sorted(self._by_label):
            indices = list(self._by_label[label])
            if len(indices) < self.i:
                indices = list(rng.choice(indices, size=self.i, replace=True))
            indices = [int(x) for x in rng.permutation(indices)]
            usable = len(indices) - len(indices) % self.i
            chunks[label] = [indices[k:k + self.i] for k in range(0, usable, self.i)]

        batches = []
        available = [label for label in sorted(chunks) if chunks[label]]
        while len(available) >= self.p:
            chosen = [int(x) for x in rng.choice(available, size=self.p, replace=False)]
            batch = []
            for label in chosen:
                batch.extend(chunks[label].pop(0))
                if not chunks[label]:
                    available.remove(label)
            batches.append(batch)
        return batches

    def __iter__(self) -> Iterator[List[int]]:
        return iter(self._batches(self.epoch))

    def __len__(self) -> int:
        return len(self._batches(self.epoch))
