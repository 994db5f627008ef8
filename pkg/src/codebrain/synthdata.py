"""Synthetic multi-modal phantoms, scenario masks and the on-disk dataset format.

Every modality of a subject is rendered from one shared anatomy map through a
strictly monotone contrast transfer, so edges line up across modalities while
intensities differ. Per-instance style (gain, gamma, bias field) is shared by
the modalities of a subject; per-modality jitter of the transfer shape makes
each (subject, modality) pair carry information of its own.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import PhantomConfig, TransferSpec, config_hash, phantom_from_dict, to_dict

TISSUE_LEVELS = (0.15, 0.35, 0.75, 0.95)
DATASET_FORMAT = "codebrain-phantom/1"
U16 = 65535


@dataclass
class ModalityStack:
    subject_id: str
    modality_names: tuple[str, ...]
    images: np.ndarray  # (N, H, W) float32 in [0, 1]

    def __post_init__(self):
        if self.images.ndim != 3 or self.images.shape[0] != len(self.modality_names):
            raise ValueError(f"images must be (N, H, W) with N={len(self.modality_names)}, got {self.images.shape}")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError(f"subject {self.subject_id}: intensities outside [0, 1]")

    @property
    def n_modalities(self) -> int:
        return len(self.modality_names)


@dataclass(frozen=True)
class ScenarioMask:
    available: tuple[bool, ...]
    anchor: int

    def __post_init__(self):
        n = len(self.available)
        k = n - sum(self.available)
        if not 0 < k < n:
            raise ValueError(f"need 0 < masked < {n}, got {k} masked of {self.available}")
        if not 0 <= self.anchor < n or self.available[self.anchor]:
            raise ValueError(f"anchor {self.anchor} must be a masked modality of {self.available}")

    @property
    def n_modalities(self) -> int:
        return len(self.available)

    @property
    def missing(self) -> tuple[int, ...]:
        return tuple(i for i, a in enumerate(self.available) if not a)

    @classmethod
    def from_available(cls, available_idx, n: int, anchor: int | None = None) -> "ScenarioMask":
        avail = tuple(i in set(available_idx) for i in range(n))
        if anchor is None:
            anchor = next((i for i in range(n) if not avail[i]), 0)
        return cls(avail, anchor)


# ---------------------------------------------------------------------------
# phantom rendering


def apply_transfer(a: np.ndarray, spec: TransferSpec, param: float | None = None) -> np.ndarray:
    p = spec.param if param is None else param
    if spec.kind == "identity":
        return a
    if spec.kind == "power":
        return a**p
    if spec.kind == "rpower":
        return 1.0 - (1.0 - a) ** p
    if spec.kind == "inverse":
        return 1.0 - a**p
    if spec.kind == "logistic":
        lo, hi = _sigmoid(-p / 2), _sigmoid(p / 2)
        return (_sigmoid(p * (a - 0.5)) - lo) / (hi - lo)
    raise ValueError(f"unknown transfer {spec.kind!r}")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _soft_ellipse(x, y, cx, cy, rx, ry, theta, sharpness):
    c, s = np.cos(theta), np.sin(theta)
    u = ((x - cx) * c + (y - cy) * s) / rx
    v = (-(x - cx) * s + (y - cy) * c) / ry
    r = np.sqrt(u * u + v * v)
    return _sigmoid((1.0 - r) * sharpness)


def _anatomy(rng: np.random.Generator, cfg: PhantomConfig, x, y):
    """Shared anatomy map in [0, 1] and the soft head mask."""
    head = _soft_ellipse(
        x, y, rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
        rng.uniform(0.72, 0.88), rng.uniform(0.8, 0.95), rng.uniform(-0.3, 0.3), 30.0,
    )
    anatomy = np.full_like(x, rng.uniform(0.45, 0.6))
    n_blobs = int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))
    for _ in range(n_blobs):
        rad, ang = 0.55 * np.sqrt(rng.uniform()), rng.uniform(0, 2 * np.pi)
        alpha = _soft_ellipse(
            x, y, rad * np.cos(ang), rad * np.sin(ang),
            rng.uniform(0.08, 0.3), rng.uniform(0.08, 0.3), rng.uniform(0, np.pi), 12.0,
        )
        level = TISSUE_LEVELS[int(rng.integers(len(TISSUE_LEVELS)))]
        anatomy = anatomy * (1.0 - alpha) + level * alpha
    return anatomy, head


def gen_subject(seed: int, cfg: PhantomConfig, subject_id: str | None = None) -> ModalityStack:
    """Render one subject deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    n = cfg.image_size
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    y, x = np.meshgrid(coords, coords, indexing="ij")
    anatomy, head = _anatomy(rng, cfg, x, y)

    gain = rng.uniform(*cfg.gain_range)
    gamma = rng.uniform(*cfg.gamma_range)
    amp = rng.uniform(*cfg.bias_amplitude)
    cx, cy, cxy = rng.uniform(-1, 1, size=3)
    bias = 1.0 + amp * (cx * x + cy * y + cxy * x * y) / (abs(cx) + abs(cy) + abs(cxy) + 1e-12)

    jitter = np.exp(rng.uniform(-cfg.transfer_jitter, cfg.transfer_jitter, size=cfg.n_modalities))
    images = []
    for m, spec in enumerate(cfg.transfers):
        contrast = apply_transfer(anatomy, spec, spec.param * jitter[m])
        img = gain * (head * contrast) ** gamma * bias
        noise = rng.normal(0.0, 1.0, size=img.shape) * cfg.noise_std
        images.append(np.clip(img + noise, 0.0, 1.0))
    return ModalityStack(
        subject_id=subject_id or f"seed-{seed}",
        modality_names=tuple(cfg.modality_names),
        images=np.stack(images).astype(np.float32),
    )


def edge_map(img: np.ndarray, quantile: float = 0.85) -> np.ndarray:
    gy, gx = np.gradient(img.astype(np.float64))
    mag = np.hypot(gx, gy)
    return mag > np.quantile(mag, quantile)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


# ---------------------------------------------------------------------------
# scenarios


def sample_scenario(rng: np.random.Generator, n: int) -> ScenarioMask:
    """k ~ U{1..N-1} masked channels, a uniform size-k subset, and a uniform anchor among them."""
    if n < 2:
        raise ValueError(f"need at least 2 modalities, got {n}")
    k = int(rng.integers(1, n))
    masked = rng.choice(n, size=k, replace=False)
    anchor = int(rng.choice(masked))
    masked_set = set(int(i) for i in masked)
    return ScenarioMask(tuple(i not in masked_set for i in range(n)), anchor)


def enumerate_scenarios(n: int) -> list[tuple[tuple[int, ...], int]]:
    """All (available set, target) pairs, ordered by set size, then lexicographically."""
    if n < 2:
        raise ValueError(f"need at least 2 modalities, got {n}")
    pairs = []
    for size in range(1, n):
        for avail in itertools.combinations(range(n), size):
            pairs.extend((avail, t) for t in range(n) if t not in avail)
    return pairs


def availability_patterns(n: int) -> list[tuple[int, ...]]:
    return list(dict.fromkeys(a for a, _ in enumerate_scenarios(n)))


def mask_batch(images: torch.Tensor, available: torch.Tensor, indicators: bool = True) -> torch.Tensor:
    """Zero-fill unavailable channels of ``(B, N, H, W)`` and append N indicator planes."""
    if images.dim() != 4 or available.shape != images.shape[:2]:
        raise ValueError(f"images {tuple(images.shape)} and availability {tuple(available.shape)} disagree")
    avail = available.to(images.dtype)[:, :, None, None]
    masked = images * avail
    if not indicators:
        return masked
    return torch.cat([masked, avail.expand_as(images)], dim=1)


def apply_mask(stack: ModalityStack, mask: ScenarioMask, indicators: bool = True) -> np.ndarray:
    if mask.n_modalities != stack.n_modalities:
        raise ValueError(f"mask covers {mask.n_modalities} modalities, stack has {stack.n_modalities}")
    out = mask_batch(
        torch.from_numpy(stack.images[None]), torch.tensor([mask.available]), indicators
    )
    return out[0].numpy()


# ---------------------------------------------------------------------------
# datasets


@dataclass
class PhantomDataset:
    config: PhantomConfig
    subject_ids: list[str]
    images: np.ndarray  # (S, N, H, W) float32, on the 16-bit grid
    splits: dict[str, list[int]]

    @property
    def modality_names(self) -> tuple[str, ...]:
        return tuple(self.config.modality_names)

    def split(self, name: str) -> np.ndarray:
        idx = self.splits[name]
        if not idx:
            raise ValueError(f"split {name!r} is empty")
        return self.images[idx]

    def stack(self, i: int) -> ModalityStack:
        return ModalityStack(self.subject_ids[i], self.modality_names, self.images[i])


def subject_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, dtype=np.uint64)[0] >> 1)


def to_u16(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * U16).astype(np.uint16)


def from_u16(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float64) / U16).astype(np.float32)


def split_by_hash(subject_ids: list[str], fractions) -> dict[str, list[int]]:
    """Order subjects by sha256 of their id, then cut 80/10/10 (exact counts)."""
    order = sorted(range(len(subject_ids)), key=lambda i: hashlib.sha256(subject_ids[i].encode()).hexdigest())
    n = len(order)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train:n_train + n_val]),
        "test": sorted(order[n_train + n_val:]),
    }


def generate_dataset(cfg: PhantomConfig) -> PhantomDataset:
    ids = [f"sub-{i:04d}" for i in range(cfg.n_subjects)]
    images = np.stack([gen_subject(subject_seed(cfg.seed, i), cfg, ids[i]).images for i in range(cfg.n_subjects)])
    images = from_u16(to_u16(images))
    return PhantomDataset(cfg, ids, images, split_by_hash(ids, cfg.split_fractions))


class DatasetError(ValueError):
    pass


def write_dataset(ds: PhantomDataset, root: str | Path) -> Path:
    from PIL import Image

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, sid in enumerate(ds.subject_ids):
        sub = root / sid
        sub.mkdir(exist_ok=True)
        for m, name in enumerate(ds.modality_names):
            Image.fromarray(to_u16(ds.images[i, m])).save(sub / f"{name}.png")
    manifest = {
        "format": DATASET_FORMAT,
        "modalities": list(ds.modality_names),
        "image_size": ds.config.image_size,
        "bit_depth": 16,
        "normalization": {"min": 0.0, "max": 1.0, "scale": U16},
        "seed": ds.config.seed,
        "config": to_dict(ds.config),
        "config_hash": config_hash(ds.config),
        "subjects": ds.subject_ids,
        "splits": {k: [ds.subject_ids[i] for i in v] for k, v in ds.splits.items()},
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return root


def read_png16(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.array(im)
    return arr.astype(np.uint16)


def read_dataset(root: str | Path) -> PhantomDataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"{mpath}: manifest not found")
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{mpath}: corrupt manifest ({e})") from e
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{mpath}: unsupported format {manifest.get('format')!r}")
    cfg = phantom_from_dict(manifest["config"])
    if config_hash(cfg) != manifest.get("config_hash"):
        raise DatasetError(f"{mpath}: config hash mismatch ({config_hash(cfg)} != {manifest.get('config_hash')})")
    if list(cfg.modality_names) != manifest["modalities"]:
        raise DatasetError(f"{mpath}: modality list disagrees with config")
    ids = list(manifest["subjects"])
    size = manifest["image_size"]
    images = np.empty((len(ids), len(cfg.modality_names), size, size), dtype=np.float32)
    for i, sid in enumerate(ids):
        for m, name in enumerate(cfg.modality_names):
            p = root / sid / f"{name}.png"
            if not p.is_file():
                raise DatasetError(f"subject {sid}: missing modality {name} ({p})")
            try:
                arr = read_png16(p)
            except Exception as e:  # PIL raises a zoo of exception types
                raise DatasetError(f"subject {sid}: unreadable modality {name} ({p}): {e}") from e
            if arr.shape != (size, size):
                raise DatasetError(f"subject {sid}: {p} has shape {arr.shape}, expected {(size, size)}")
            images[i, m] = from_u16(arr)
    index = {sid: i for i, sid in enumerate(ids)}
    try:
        splits = {k: sorted(index[s] for s in v) for k, v in manifest["splits"].items()}
    except KeyError as e:
        raise DatasetError(f"{mpath}: split lists unknown subject {e}") from e
    return PhantomDataset(cfg, ids, images, splits)
