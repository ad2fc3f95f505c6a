"""
合成数据与加载
"""
from .dataset import (MANIFEST_FIELDS, IdentityBalancedSampler, ManifestDataset, ManifestRow,
                      build_label_map, generate_dataset, read_manifest)
from .synthetic import (IdentityAppearance, Sample, augment, generate_identities, generate_identity,
                        part_names, render_sample)

__all__ = [
    "MANIFEST_FIELDS", "IdentityBalancedSampler", "ManifestDataset", "ManifestRow",
    "build_label_map", "generate_dataset", "read_manifest",
    "IdentityAppearance", "Sample", "augment", "generate_identities", "generate_identity",
    "part_names", "render_sample",
]
