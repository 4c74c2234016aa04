"""Procedural re-id dataset: identities are coloured figures with a pattern and a mark.

Identity appearance is drawn from a small shared palette, so identities
overlap in individual attributes and are told apart by their combination.
Shots of an identity differ by an affine "viewpoint" jitter, and optionally by
an occluding rectangle and a Gaussian blur.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataset import IdentityDataset

PALETTE = np.array([
    [0.85, 0.15, 0.15], [0.15, 0.65, 0.20], [0.15, 0.30, 0.85], [0.90, 0.80, 0.15],
    [0.60, 0.20, 0.70], [0.10, 0.70, 0.75], [0.95, 0.55, 0.10], [0.92, 0.92, 0.92],
    [0.20, 0.20, 0.20], [0.55, 0.35, 0.20],
], dtype=np.float64)
BACKGROUNDS = np.array([[0.45, 0.45, 0.45], [0.35, 0.40, 0.30], [0.50, 0.45, 0.38]])
PATTERNS = ("plain", "hstripe", "vstripe", "check")
# train and test identities draw from disjoint index ranges
TEST_ID_OFFSET = 100_000


@dataclass
class SyntheticNoise:
    occlusion_prob: float = 0.0
    blur_prob: float = 0.0
    viewpoint_jitter: float = 0.5

    def __post_init__(self):
        for name in ("occlusion_prob", "blur_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability in [0, 1], got {v}")
        if not 0.0 <= self.viewpoint_jitter <= 1.0:
            raise ValueError(f"viewpoint_jitter must lie in [0, 1], got {self.viewpoint_jitter}")


@dataclass
class Appearance:
    background: np.ndarray
    head: np.ndarray
    top: np.ndarray
    bottom: np.ndarray
    pattern: str
    pattern_color: np.ndarray
    mark_color: np.ndarray
    mark_pos: tuple[float, float]
    build: float


def _appearance(rng: np.random.Generator) -> Appearance:
    top, bottom, pat, mark = rng.choice(len(PALETTE), size=4, replace=False)
    return Appearance(
        background=BACKGROUNDS[rng.integers(len(BACKGROUNDS))],
        head=PALETTE[rng.integers(len(PALETTE))],
        top=PALETTE[top],
        bottom=PALETTE[bottom],
        pattern=PATTERNS[rng.integers(len(PATTERNS))],
        pattern_color=PALETTE[pat],
        mark_color=PALETTE[mark],
        mark_pos=(float(rng.choice([0.32, 0.45, 0.68, 0.80])), float(rng.choice([0.35, 0.65]))),
        build=float(rng.choice([0.55, 0.7])),
    )


def render_template(app: Appearance, height: int, width: int) -> np.ndarray:
    """Draw the canonical (unjittered) figure in normalised coordinates."""
    y, x = np.mgrid[0:height, 0:width]
    v = (y + 0.5) / height
    u = (x + 0.5) / width
    img = np.empty((height, width, 3))
    img[:] = app.background
    half = app.build / 2
    torso = (v >= 0.24) & (v < 0.56) & (np.abs(u - 0.5) < half)
    legs = (v >= 0.56) & (v < 0.94) & (np.abs(u - 0.5) < half * 0.8)
    head = ((v - 0.13) / 0.10) ** 2 + ((u - 0.5) / 0.2) ** 2 < 1.0
    img[torso] = app.top
    if app.pattern == "hstripe":
        sel = torso & (np.floor(v * 20) % 2 == 0)
    elif app.pattern == "vstripe":
        sel = torso & (np.floor(u * 8) % 2 == 0)
    elif app.pattern == "check":
        sel = torso & ((np.floor(v * 14) + np.floor(u * 6)) % 2 == 0)
    else:
        sel = np.zeros_like(torso)
    img[sel] = app.pattern_color
    img[legs] = app.bottom
    img[head] = app.head
    mv, mu = app.mark_pos
    mark = (np.abs(v - mv) < 0.06) & (np.abs(u - mu) < 0.12)
    img[mark] = app.mark_color
    return img


def _jitter(img: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    if strength <= 0:
        return img
    h, w = img.shape[:2]
    angle = np.deg2rad(rng.uniform(-8, 8) * strength)
    scale = 1.0 + rng.uniform(-0.12, 0.12) * strength
    shift = np.array([rng.uniform(-0.08, 0.08) * h, rng.uniform(-0.12, 0.12) * w]) * strength
    # output coords -> input coords about the image centre
    c, s = np.cos(angle), np.sin(angle)
    mat = np.array([[c, -s * w / h], [s * h / w, c]]) / scale
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - mat @ centre - shift
    out = np.empty_like(img)
    for ch in range(3):
        out[..., ch] = ndimage.affine_transform(img[..., ch], mat, offset=offset, order=1,
                                                mode="nearest")
    return out


def _occlude(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    area = rng.uniform(0.2, 0.4) * h * w
    ratio = rng.uniform(0.5, 2.0)
    oh = int(np.clip(round(np.sqrt(area * ratio)), 2, h - 1))
    ow = int(np.clip(round(np.sqrt(area / ratio)), 2, w - 1))
    top = int(rng.integers(int(0.15 * h), max(int(0.15 * h) + 1, h - oh + 1)))
    left = int(rng.integers(0, w - ow + 1))
    out = img.copy()
    out[top:top + oh, left:left + ow] = PALETTE[rng.integers(len(PALETTE))] * rng.uniform(0.6, 1.0)
    return out


def _blur(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    sigma = rng.uniform(0.8, 1.4)
    return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")


def render_shot(app: Appearance, height, width, noise: SyntheticNoise, rng):
    """One shot of an identity; returns ``(uint8 image, occluded, blurred)``."""
    img = _jitter(render_template(app, height, width), noise.viewpoint_jitter, rng)
    occluded = bool(noise.occlusion_prob > 0 and rng.random() < noise.occlusion_prob)
    if occluded:
        img = _occlude(img, rng)
    blurred = bool(noise.blur_prob > 0 and rng.random() < noise.blur_prob)
    if blurred:
        img = _blur(img, rng)
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8), occluded, blurred


def generate_synthetic_reid(num_ids: int, shots_per_id: int, noise: SyntheticNoise | None = None,
                            seed: int = 0, *, num_test_ids: int = 0, query_per_id: int = 2,
                            height: int = 32, width: int = 16, num_cameras: int = 4
                            ) -> IdentityDataset:
    """Render ``num_ids`` training identities and optionally ``num_test_ids`` disjoint test ones.

    Test identities get their first ``query_per_id`` shots tagged ``query`` and
    the rest ``gallery``. Camera ids are assigned round-robin over the shots of
    each identity. The output is a deterministic function of the arguments.
    """
    noise = noise or SyntheticNoise()
    if num_ids < 2:
        raise ValueError(f"num_ids must be >= 2, got {num_ids}")
    if shots_per_id < 2:
        raise ValueError(f"shots_per_id must be >= 2, got {shots_per_id}")
    if num_test_ids and not 0 < query_per_id < shots_per_id:
        raise ValueError("query_per_id must leave at least one gallery shot per identity")
    if num_cameras < 1:
        raise ValueError("num_cameras must be positive")

    pixels, ids, cams, splits, occ, blur = [], [], [], [], [], []
    plan = [(i, "train") for i in range(num_ids)]
    plan += [(TEST_ID_OFFSET + i, "test") for i in range(num_test_ids)]
    for pid, role in plan:
        app = _appearance(np.random.default_rng([seed, pid, 0]))
        shot_rng = np.random.default_rng([seed, pid, 1])
        for k in range(shots_per_id):
            img, o, b = render_shot(app, height, width, noise, shot_rng)
            pixels.append(img)
            ids.append(pid)
            cams.append(k % num_cameras)
            occ.append(o)
            blur.append(b)
            if role == "train":
                splits.append("train")
            else:
                splits.append("query" if k < query_per_id else "gallery")
    images = np.stack(pixels).astype(np.float32) / 255.0
    return IdentityDataset(images, ids, cams, splits, occ, blur)
