"""K-shot groups and identity-balanced (P x K) batches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import IdentityDataset


@dataclass
class SamplerConfig:
    P: int = 16
    K: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.P < 2:
            raise ValueError(f"P must be >= 2, got {self.P}")
        if self.K < 2:
            raise ValueError(f"K must be >= 2, got {self.K}")

    @property
    def batch_size(self) -> int:
        return self.P * self.K


@dataclass
class ShotGroup:
    identity_id: int
    shots: np.ndarray           # K x H x W x 3
    teacher_input: np.ndarray   # H x W x 3K
    indices: np.ndarray         # dataset record index of each shot

    @property
    def K(self) -> int:
        return len(self.shots)


def concat_channels(images) -> np.ndarray:
    """Stack K H x W x 3 images along the channel axis, preserving order."""
    images = [np.asarray(im) for im in images]
    if not images:
        raise ValueError("need at least one image")
    shape = images[0].shape
    for im in images:
        if im.shape != shape:
            raise ValueError(f"shape mismatch: {im.shape} vs {shape}")
    if len(shape) != 3:
        raise ValueError(f"expected H x W x C images, got {shape}")
    return np.concatenate(images, axis=-1)


def make_group(dataset: IdentityDataset, indices) -> ShotGroup:
    indices = np.asarray(indices, dtype=np.int64)
    pids = np.unique(dataset.identity_ids[indices])
    if len(pids) != 1:
        raise ValueError(f"shots span several identities: {pids.tolist()}")
    shots = dataset.images[indices]
    return ShotGroup(int(pids[0]), shots, concat_channels(shots), indices)


def build_shot_group(dataset: IdentityDataset, identity_id: int, K: int, rng: np.random.Generator,
                     split: str = "train") -> ShotGroup:
    """Draw K distinct images of one identity, in sampled order."""
    pool = dataset.indices_of(identity_id, split)
    if len(pool) < K:
        raise ValueError(f"identity {identity_id} has {len(pool)} images, need {K}")
    return make_group(dataset, rng.choice(pool, size=K, replace=False))


def anchored_group(dataset: IdentityDataset, index: int, K: int, rng: np.random.Generator,
                   splits=None) -> ShotGroup:
    """Group led by ``index`` plus K-1 other images of its identity.

    Used to give every evaluation image its multi-shot companions from the
    ground-truth identity labels.
    """
    pid = dataset.identity_ids[index]
    mask = dataset.identity_ids == pid
    if splits is not None:
        mask &= np.isin(dataset.splits, list(splits))
    others = np.flatnonzero(mask)
    others = others[others != index]
    if len(others) < K - 1:
        raise ValueError(f"identity {pid} has too few images for a {K}-shot group")
    picks = rng.choice(others, size=K - 1, replace=False)
    return make_group(dataset, np.concatenate([[index], picks]))


def epoch_identities(dataset: IdentityDataset, P: int, rng: np.random.Generator,
                     split: str = "train") -> list[np.ndarray]:
    """Partition shuffled identities into chunks of P.

    The final short chunk is topped up with identities drawn from the rest,
    so every identity appears at least once per epoch.
    """
    pids = dataset.identities(split)
    if len(pids) < P:
        raise ValueError(f"need at least P={P} identities, dataset has {len(pids)}")
    order = rng.permutation(pids)
    chunks = [order[i:i + P] for i in range(0, len(order), P)]
    if len(chunks[-1]) < P:
        tail = chunks[-1]
        rest = np.setdiff1d(pids, tail)
        fill = rng.choice(rest, size=P - len(tail), replace=False)
        chunks[-1] = np.concatenate([tail, fill])
    return chunks


def pk_batches(dataset: IdentityDataset, config: SamplerConfig, epoch_rng: np.random.Generator,
               split: str = "train") -> list[list[ShotGroup]]:
    """One epoch of batches, each holding P ShotGroups of K images."""
    dataset.check_shots(config.K, split)
    return [
        [build_shot_group(dataset, int(pid), config.K, epoch_rng, split) for pid in chunk]
        for chunk in epoch_identities(dataset, config.P, epoch_rng, split)
    ]
