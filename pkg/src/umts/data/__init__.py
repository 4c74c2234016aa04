from .augment import AugmentConfig, augment
from .dataset import IdentityDataset, Record, load_dataset, save_dataset
from .sampling import (SamplerConfig, ShotGroup, anchored_group, build_shot_group,
                       concat_channels, pk_batches)
from .synthetic import SyntheticNoise, generate_synthetic_reid

__all__ = [
    "AugmentConfig", "IdentityDataset", "Record", "SamplerConfig", "ShotGroup",
    "SyntheticNoise", "anchored_group", "augment", "build_shot_group", "concat_channels",
    "generate_synthetic_reid", "load_dataset", "pk_batches", "save_dataset",
]
