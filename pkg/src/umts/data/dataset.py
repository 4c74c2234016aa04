"""Identity-annotated image collections and their on-disk layout."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

SPLITS = ("train", "query", "gallery")
MANIFEST_NAME = "manifest.tsv"
MANIFEST_FIELDS = ("path", "identity_id", "camera_id", "split", "occluded", "blurred")


@dataclass(frozen=True)
class Record:
    image: np.ndarray
    identity_id: int
    camera_id: int
    split: str


class IdentityDataset:
    """Immutable set of H x W x 3 images in [0, 1] with identity/camera/split tags.

    ``occluded`` and ``blurred`` are optional per-record flags (the synthetic
    generator fills them; real data leaves them False).
    """

    def __init__(self, images, identity_ids, camera_ids, splits, occluded=None, blurred=None):
        images = np.asarray(images, dtype=np.float32)
        n = len(images)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ValueError(f"images must be N x H x W x 3, got {images.shape}")
        ids = np.asarray(identity_ids, dtype=np.int64)
        cams = np.asarray(camera_ids, dtype=np.int64)
        splits = np.asarray(splits, dtype=object)
        if not (len(ids) == len(cams) == len(splits) == n):
            raise ValueError("per-record arrays must have one entry per image")
        if n and (ids.min() < 0 or cams.min() < 0):
            raise ValueError("identity_id and camera_id must be nonnegative")
        if n and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        bad = set(splits.tolist()) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags: {sorted(bad)}")
        occluded = np.zeros(n, bool) if occluded is None else np.asarray(occluded, bool)
        blurred = np.zeros(n, bool) if blurred is None else np.asarray(blurred, bool)
        for a in (images, ids, cams, occluded, blurred):
            a.setflags(write=False)
        self.images = images
        self.identity_ids = ids
        self.camera_ids = cams
        self.splits = splits
        self.occluded = occluded
        self.blurred = blurred
        self._by_identity: dict[tuple[str, int], np.ndarray] = {}

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> Record:
        return Record(self.images[i], int(self.identity_ids[i]), int(self.camera_ids[i]),
                      str(self.splits[i]))

    @property
    def image_shape(self) -> tuple[int, int]:
        return tuple(self.images.shape[1:3])

    def split_indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def identities(self, split: str = "train") -> np.ndarray:
        return np.unique(self.identity_ids[self.split_indices(split)])

    def indices_of(self, identity_id: int, split: str = "train") -> np.ndarray:
        key = (split, int(identity_id))
        if key not in self._by_identity:
            mask = (self.identity_ids == identity_id) & (self.splits == split)
            self._by_identity[key] = np.flatnonzero(mask)
        return self._by_identity[key]

    def label_map(self, split: str = "train") -> dict[int, int]:
        """Identity id -> contiguous class index for the classification head."""
        return {int(pid): i for i, pid in enumerate(self.identities(split))}

    def channel_mean(self, split: str = "train") -> np.ndarray:
        idx = self.split_indices(split)
        src = self.images[idx] if len(idx) else self.images
        return src.reshape(-1, 3).mean(axis=0)

    def check_shots(self, k: int, split: str = "train"):
        for pid in self.identities(split):
            n = len(self.indices_of(pid, split))
            if n < k:
                raise ValueError(f"identity {pid} has {n} {split} images, need at least {k}")

    def subset(self, indices) -> "IdentityDataset":
        idx = np.asarray(indices)
        return IdentityDataset(self.images[idx], self.identity_ids[idx], self.camera_ids[idx],
                               self.splits[idx], self.occluded[idx], self.blurred[idx])


def save_dataset(dataset: IdentityDataset, root) -> Path:
    """Write PNG images plus a tab-separated manifest under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / MANIFEST_NAME, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for i in range(len(dataset)):
            rel = f"images/{i:06d}_{dataset.identity_ids[i]:05d}_c{dataset.camera_ids[i]}.png"
            pixels = np.rint(dataset.images[i] * 255.0).astype(np.uint8)
            Image.fromarray(pixels, mode="RGB").save(root / rel, optimize=False)
            w.writerow([rel, int(dataset.identity_ids[i]), int(dataset.camera_ids[i]),
                        dataset.splits[i], int(dataset.occluded[i]), int(dataset.blurred[i])])
    return root


def load_dataset(root) -> IdentityDataset:
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} under {root}")
    images, ids, cams, splits, occ, blur = [], [], [], [], [], []
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        missing = set(MANIFEST_FIELDS[:4]) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"manifest lacks columns {sorted(missing)}")
        for row in reader:
            with Image.open(root / row["path"]) as im:
                images.append(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
            ids.append(int(row["identity_id"]))
            cams.append(int(row["camera_id"]))
            splits.append(row["split"])
            occ.append(bool(int(row.get("occluded") or 0)))
            blur.append(bool(int(row.get("blurred") or 0)))
    return IdentityDataset(np.stack(images), ids, cams, splits, occ, blur)
