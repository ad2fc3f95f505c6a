"""
合成行人数据
火柴人渲染 + 精确部件掩码 + 可控遮挡；所有随机量由 (rng_seed, 身份, 图像序号) 派生，与并行顺序无关
"""
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from ..config import AugmentConfig, SyntheticConfig
from ..errors import ConfigError

# 细粒度部件（标签 1..8），按从上到下排列
FINE_PARTS = [
    "head", "torso", "right_arm", "left_arm",
    "right_leg", "left_leg", "right_foot", "left_foot",
]

# K 个部件的分组：每组由细粒度部件名组成
PART_GROUPS: Dict[int, List[Tuple[str, Tuple[str, ...]]]] = {
    3: [("head", ("head",)),
        ("upper_body", ("torso", "right_arm", "left_arm")),
        ("lower_body", ("right_leg", "left_leg", "right_foot", "left_foot"))],
    4: [("head", ("head",)),
        ("upper_body", ("torso", "right_arm", "left_arm")),
        ("legs", ("right_leg", "left_leg")),
        ("feet", ("right_foot", "left_foot"))],
    5: [("head", ("head",)),
        ("torso", ("torso",)),
        ("arms", ("right_arm", "left_arm")),
        ("legs", ("right_leg", "left_leg")),
        ("feet", ("right_foot", "left_foot"))],
    6: [("head", ("head",)),
        ("torso", ("torso",)),
        ("right_arm", ("right_arm",)),
        ("left_arm", ("left_arm",)),
        ("legs", ("right_leg", "left_leg")),
        ("feet", ("right_foot", "left_foot"))],
    7: [("head", ("head",)),
        ("torso", ("torso",)),
        ("right_arm", ("right_arm",)),
        ("left_arm", ("left_arm",)),
        ("right_leg", ("right_leg",)),
        ("left_leg", ("left_leg",)),
        ("feet", ("right_foot", "left_foot"))],
    8: [(name, (name,)) for name in FINE_PARTS],
}

STRIPED_PARTS = ("torso", "right_leg", "left_leg")
MAX_IDENTITY_ATTEMPTS = 2000

# 两个虚拟相机：(对比度, 亮度偏移)
CAMERA_TRANSFORMS = {0: (1.0, 0.0), 1: (0.8, -0.06)}


def part_names(num_parts: int) -> List[str]:
    """K 个部件的名称（标签 1..K 依次对应）"""
    if num_parts not in PART_GROUPS:
        raise ConfigError(f"不支持的部件数 K={num_parts}，可选 {sorted(PART_GROUPS)}")
    return [name for name, _ in PART_GROUPS[num_parts]]


def fine_to_group_table(num_parts: int) -> np.ndarray:
    """细粒度标签 0..8 → K 分组标签 0..K 的查找表"""
    part_names(num_parts)
    table = np.zeros(len(FINE_PARTS) + 1, dtype=np.uint8)
    for group_label, (_, members) in enumerate(PART_GROUPS[num_parts], start=1):
        for member in members:
            table[FINE_PARTS.index(member) + 1] = group_label
    return table


def flip_label_table(num_parts: int) -> np.ndarray:
    """水平翻转时的标签置换表：right_* 与 left_* 互换，其余不变"""
    names = part_names(num_parts)
    table = np.arange(num_parts + 1, dtype=np.uint8)
    for i, name in enumerate(names, start=1):
        if name.startswith("right_"):
            j = names.index("left_" + name[len("right_"):]) + 1
            table[i], table[j] = j, i
    return table


@dataclass
class IdentityAppearance:
    """
    一个身份的外观参数

    colors / stripe_colors: [8, 3]，按细粒度部件
    """

    index: int
    colors: np.ndarray
    stripe_colors: np.ndarray
    stripe_period: np.ndarray   # [8]，条纹周期（像素），0 表示纯色
    width_scale: float
    head_scale: float

    def color_distance(self, other: "IdentityAppearance") -> float:
        """各部件主色欧氏距离的最大值"""
        return float(np.sqrt(((self.colors - other.colors) ** 2).sum(axis=1)).max())


def _draw_identity(rng: np.random.Generator, index: int) -> IdentityAppearance:
    colors = rng.uniform(0.05, 0.95, size=(len(FINE_PARTS), 3))
    shade = rng.uniform(0.55, 0.8)
    periods = np.zeros(len(FINE_PARTS), dtype=np.int64)
    for name in STRIPED_PARTS:
        if rng.random() < 0.5:
            periods[FINE_PARTS.index(name)] = int(rng.integers(3, 8))
    return IdentityAppearance(
        index=index,
        colors=colors,
        stripe_colors=colors * shade,
        stripe_period=periods,
        width_scale=float(rng.uniform(0.85, 1.15)),
        head_scale=float(rng.uniform(0.9, 1.1)),
    )


def generate_identity(seed: int, index: int, config: SyntheticConfig,
                      previous: Sequence[IdentityAppearance] = ()) -> IdentityAppearance:
    """
    生成一个身份的外观

    Args:
        seed: 全局随机种子
        index: 身份序号
        config: 合成数据配置
        previous: 已生成的身份（新身份至少有一个部件颜色与它们相差 color_separation）

    Returns:
        IdentityAppearance
    """
    for attempt in range(MAX_IDENTITY_ATTEMPTS):
        rng = np.random.default_rng([seed, index, attempt, 0])
        candidate = _draw_identity(rng, index)
        if all(candidate.color_distance(p) >= config.color_separation for p in previous):
            return candidate
    raise ConfigError(
        f"在 color_separation={config.color_separation} 下无法生成第 {index} 个身份，"
        f"请减少 n_identities 或降低颜色间隔"
    )


def generate_identities(config: SyntheticConfig) -> List[IdentityAppearance]:
    identities: List[IdentityAppearance] = []
    for index in range(config.n_identities):
        identities.append(generate_identity(config.rng_seed, index, config, identities))
    return identities


@dataclass
class Pose:
    dx: float = 0.0       # 水平平移（占宽度比例）
    dy: float = 0.0       # 垂直平移（占高度比例）
    scale: float = 1.0
    arm_swing: float = 0.0

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "Pose":
        return cls(dx=float(rng.uniform(-0.06, 0.06)), dy=float(rng.uniform(-0.02, 0.02)),
                   scale=float(rng.uniform(0.95, 1.05)), arm_swing=float(rng.uniform(-0.03, 0.03)))


@dataclass
class Occlusion:
    kind: str = "none"          # none / box / second_person
    top: float = 0.45           # 遮挡物上沿（占高度比例）
    color: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    shift: float = 0.4          # second_person 的水平偏移
    seed: int = 0

    @classmethod
    def sample(cls, rng: np.random.Generator, prob: float, kind: str) -> "Occlusion":
        if rng.random() >= prob:
            return cls()
        return cls(kind=kind, top=float(rng.uniform(0.40, 0.48)),
                   color=tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3)),
                   shift=float(rng.choice([-1.0, 1.0]) * rng.uniform(0.3, 0.45)),
                   seed=int(rng.integers(0, 2 ** 31)))


@dataclass
class Sample:
    """
    image: [3, H, W] float32，取值 [0, 1]
    mask: [H, W] uint8，0 为背景，1..K 为部件
    """

    image: np.ndarray
    mask: np.ndarray
    identity: int
    camera: int
    occluded: bool


def _layout(appearance: IdentityAppearance, pose: Pose, height: int, width: int) -> List[Tuple[str, str, tuple]]:
    """
    计算各部件的绘制图元，按绘制顺序返回 (部件名, 图元类型, 像素坐标)
    """
    cx = width * (0.5 + pose.dx)
    ws = appearance.width_scale

    def y(frac: float) -> float:
        return height * (0.5 + (frac - 0.5) * pose.scale + pose.dy)

    def x(offset: float) -> float:
        return cx + width * offset

    torso_half = 0.16 * ws
    head_r = 0.07 * appearance.head_scale
    swing = pose.arm_swing
    return [
        ("right_leg", "rect", (x(-0.13 * ws), y(0.52), x(-0.015), y(0.88))),
        ("left_leg", "rect", (x(0.015), y(0.52), x(0.13 * ws), y(0.88))),
        ("right_foot", "rect", (x(-0.15 * ws), y(0.885), x(-0.015), y(0.95))),
        ("left_foot", "rect", (x(0.015), y(0.885), x(0.15 * ws), y(0.95))),
        ("torso", "rect", (x(-torso_half), y(0.19), x(torso_half), y(0.52))),
        ("right_arm", "rect", (x(-torso_half - 0.1 + swing), y(0.2), x(-torso_half - 0.01 + swing), y(0.5))),
        ("left_arm", "rect", (x(torso_half + 0.01 - swing), y(0.2), x(torso_half + 0.1 - swing), y(0.5))),
        ("head", "ellipse", (cx - width * head_r * 1.6, y(0.11 - head_r), cx + width * head_r * 1.6, y(0.11 + head_r))),
    ]


def render_figure(appearance: IdentityAppearance, pose: Pose, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    渲染单个人物

    Returns:
        (rgb [H, W, 3] float32, fine_labels [H, W] uint8)；背景像素 rgb 为 0
    """
    label_img = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(label_img)
    for name, shape, box in _layout(appearance, pose, height, width):
        fill = FINE_PARTS.index(name) + 1
        if shape == "rect":
            draw.rectangle(box, fill=fill)
        else:
            draw.ellipse(box, fill=fill)
    labels = np.asarray(label_img, dtype=np.uint8)

    palette = np.zeros((len(FINE_PARTS) + 1, 3), dtype=np.float32)
    stripe_palette = np.zeros_like(palette)
    palette[1:] = appearance.colors
    stripe_palette[1:] = appearance.stripe_colors

    rgb = palette[labels]
    periods = np.zeros(len(FINE_PARTS) + 1, dtype=np.int64)
    periods[1:] = appearance.stripe_period
    row_period = periods[labels]
    rows = np.arange(height).reshape(-1, 1).repeat(width, axis=1)
    striped = (row_period > 0) & ((rows // np.maximum(row_period, 1)) % 2 == 1)
    rgb = np.where(striped[..., None], stripe_palette[labels], rgb)
    return rgb.astype(np.float32), labels


def apply_camera(image: np.ndarray, camera: int) -> np.ndarray:
    """虚拟相机的亮度/对比度变换（相机 0 为恒等变换）"""
    contrast, brightness = CAMERA_TRANSFORMS[camera]
    if contrast == 1.0 and brightness == 0.0:
        return image
    return np.clip((image - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0).astype(np.float32)


def _occluder_person(occlusion: Occlusion, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(occlusion.seed)
    other = _draw_identity(rng, -1)
    pose = Pose(dx=occlusion.shift, dy=occlusion.top - 0.3, scale=1.0)
    return render_figure(other, pose, height, width)


def render_sample(appearance: IdentityAppearance, pose: Pose, occlusion: Occlusion,
                  config: SyntheticConfig, camera: int = 0,
                  rng: Optional[np.random.Generator] = None) -> Sample:
    """
    渲染一张样本

    Args:
        appearance: 身份外观
        pose: 姿态抖动
        occlusion: 遮挡抽样结果
        config: 合成数据配置
        camera: 虚拟相机编号
        rng: 背景噪声的随机源（None 时背景为纯灰）

    Returns:
        Sample：遮挡物像素在掩码中标为背景
    """
    height, width = config.image_height, config.image_width
    rgb, labels = render_figure(appearance, pose, height, width)

    if rng is None:
        background = np.full((height, width, 3), 0.5, dtype=np.float32)
    else:
        base = rng.uniform(0.2, 0.8, size=3)
        background = np.clip(base + rng.normal(0.0, 0.03, size=(height, width, 3)), 0.0, 1.0)
    image = np.where(labels[..., None] > 0, rgb, background).astype(np.float32)

    labels = labels.copy()
    if occlusion.kind == "box":
        top = int(np.floor(height * occlusion.top))
        image[top:] = np.asarray(occlusion.color, dtype=np.float32)
        labels[top:] = 0
    elif occlusion.kind == "second_person":
        other_rgb, other_labels = _occluder_person(occlusion, height, width)
        covered = other_labels > 0
        image[covered] = other_rgb[covered]
        labels[covered] = 0

    image = apply_camera(image, camera)
    mask = fine_to_group_table(config.num_parts)[labels]
    return Sample(
        image=np.ascontiguousarray(image.transpose(2, 0, 1)),
        mask=mask,
        identity=appearance.index,
        camera=camera,
        occluded=occlusion.kind != "none",
    )


# ==================== 数据增强 ====================

def hflip(sample: Sample, flip_table: np.ndarray) -> Sample:
    """水平翻转；掩码同时交换左右部件标签"""
    return replace(sample,
                   image=np.ascontiguousarray(sample.image[:, :, ::-1]),
                   mask=flip_table[sample.mask[:, ::-1]])


def pad_crop(sample: Sample, pad: int, offset: Tuple[int, int]) -> Sample:
    """
    四周补零 pad 像素后按 offset 裁回原尺寸；offset=(pad, pad) 为中心裁剪
    """
    _, h, w = sample.image.shape
    oy, ox = offset
    image = np.pad(sample.image, ((0, 0), (pad, pad), (pad, pad)))
    mask = np.pad(sample.mask, ((pad, pad), (pad, pad)))
    return replace(sample, image=image[:, oy:oy + h, ox:ox + w].copy(), mask=mask[oy:oy + h, ox:ox + w].copy())


def erase_region(sample: Sample, top: int, left: int, eh: int, ew: int,
                 fill: np.ndarray) -> Sample:
    """随机擦除的确定性部分：图像填充，掩码置背景"""
    image = sample.image.copy()
    mask = sample.mask.copy()
    image[:, top:top + eh, left:left + ew] = fill.reshape(-1, 1, 1)
    mask[top:top + eh, left:left + ew] = 0
    return replace(sample, image=image, mask=mask)


def random_erase(sample: Sample, config: AugmentConfig, rng: np.random.Generator) -> Sample:
    _, h, w = sample.image.shape
    area = h * w
    for _ in range(100):
        target = rng.uniform(*config.erase_area) * area
        aspect = np.exp(rng.uniform(np.log(config.erase_aspect[0]), np.log(config.erase_aspect[1])))
        eh = int(round(np.sqrt(target * aspect)))
        ew = int(round(np.sqrt(target / aspect)))
        if 0 < eh < h and 0 < ew < w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            fill = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
            return erase_region(sample, top, left, eh, ew, fill)
    return sample


def augment(sample: Sample, config: AugmentConfig, rng: np.random.Generator,
            flip_table: np.ndarray) -> Sample:
    """
    训练集增强：水平翻转 → 补边随机裁剪 → 随机擦除

    Args:
        sample: 原样本
        config: 增强配置
        rng: 随机源
        flip_table: flip_label_table(K)

    Returns:
        Sample: 新样本
    """
    if rng.random() < config.flip_prob:
        sample = hflip(sample, flip_table)
    if config.pad > 0:
        offset = (int(rng.integers(0, 2 * config.pad + 1)), int(rng.integers(0, 2 * config.pad + 1)))
        sample = pad_crop(sample, config.pad, offset)
    if rng.random() < config.erase_prob:
        sample = random_erase(sample, config, rng)
    return sample
