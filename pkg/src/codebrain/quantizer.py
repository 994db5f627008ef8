"""Finite scalar quantization and the ordinal (grading) code machinery.

Code tensors keep their channel/spatial axes last: a code grid is ``(..., C, h, w)``
and its ordinal bit decomposition is ``(..., L-1, C, h, w)``, i.e. the bit axis
sits immediately before the channel axis.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

BIT_AXIS = -4


@dataclass(frozen=True)
class QuantizerConfig:
    levels: int = 5
    code_dim: int = 4

    def __post_init__(self):
        check_levels(self.levels)
        if self.code_dim < 1:
            raise ValueError(f"code_dim must be >= 1, got {self.code_dim}")

    @property
    def half(self) -> int:
        return self.levels // 2


class NonFiniteLatent(ValueError):
    pass


def check_levels(levels: int) -> int:
    if levels < 3 or levels % 2 == 0:
        raise ValueError(f"levels must be odd and >= 3, got {levels}")
    return levels // 2


def bound(features: torch.Tensor, levels: int) -> torch.Tensor:
    """Squash latent features into the open interval (-L//2, L//2) with a scaled tanh."""
    half = check_levels(levels)
    if not torch.isfinite(features).all():
        n_bad = int((~torch.isfinite(features)).sum())
        raise NonFiniteLatent(f"bound() received {n_bad} non-finite latent values")
    return half * torch.tanh(features)


def round_half_away(z: torch.Tensor) -> torch.Tensor:
    """Round to the nearest integer, ties away from zero (torch.round ties to even)."""
    # z - trunc(z) is exact in floating point, so ties are detected exactly;
    # floor(|z| + 0.5) would misround the largest float below each tie
    t = torch.trunc(z)
    tie = (z - t).abs() == 0.5
    return torch.where(tie, t + torch.sign(z), torch.round(z))


def quantize(z: torch.Tensor, offset: torch.Tensor | None = None) -> torch.Tensor:
    """Straight-through rounding: forward value is round(z), backward is identity.

    ``offset`` freezes the stop-gradient term ``round(z) - z`` at a previously
    recorded value; the result is then ``z + offset``. Finite-difference checks
    use this to probe the exact function whose gradient the estimator reports.
    """
    if offset is None:
        offset = (round_half_away(z) - z).detach()
    return z + offset


def ste_offset(z: torch.Tensor) -> torch.Tensor:
    return (round_half_away(z) - z).detach()


def to_codes(z: torch.Tensor) -> torch.Tensor:
    """Integer code grid (int64) for a bounded latent."""
    return round_half_away(z.detach()).to(torch.int64)


def ordinal_encode(codes: torch.Tensor, levels: int) -> torch.Tensor:
    """Threshold bits: bit j of class y = code + L//2 is 1 iff j < y."""
    half = check_levels(levels)
    if codes.dim() < 3:
        raise ValueError(f"code grid must be (..., C, h, w), got shape {tuple(codes.shape)}")
    if codes.is_floating_point() and not torch.equal(codes, torch.round(codes)):
        raise ValueError("ordinal_encode expects integer codes")
    y = codes.to(torch.int64) + half
    if (y < 0).any() or (y > levels - 1).any():
        raise ValueError(f"codes outside [-{half}, {half}] for L={levels}")
    j = torch.arange(levels - 1).view(-1, 1, 1, 1)
    return (j < y.unsqueeze(BIT_AXIS)).to(torch.float32)


def ordinal_decode(bits: torch.Tensor, levels: int, mode: str = "threshold") -> torch.Tensor:
    """Map bit probabilities back to codes.

    ``threshold`` counts bits above 0.5, which inverts ``ordinal_encode`` exactly and
    tolerates non-monotone predictions. ``expectation`` rounds the expected class
    (the sum of probabilities) instead.
    """
    half = check_levels(levels)
    if bits.dim() < 4 or bits.shape[BIT_AXIS] != levels - 1:
        raise ValueError(f"expected bit axis of size {levels - 1} at dim -4, got shape {tuple(bits.shape)}")
    if mode == "threshold":
        y = (bits > 0.5).sum(dim=BIT_AXIS)
    elif mode == "expectation":
        y = round_half_away(bits.sum(dim=BIT_AXIS)).to(torch.int64)
    else:
        raise ValueError(f"unknown decode mode {mode!r}")
    return y.to(torch.int64) - half


def decode_logits(logits: torch.Tensor, levels: int, mode: str = "threshold") -> torch.Tensor:
    return ordinal_decode(torch.sigmoid(logits), levels, mode)


def grading_loss(logits: torch.Tensor, target_codes: torch.Tensor, levels: int) -> torch.Tensor:
    """Mean binary cross-entropy between sigmoid(logits) and the ordinal bits of the target."""
    target_bits = ordinal_encode(target_codes, levels).to(logits.dtype)
    if logits.shape != target_bits.shape:
        raise ValueError(
            f"logits shape {tuple(logits.shape)} does not match ordinal targets {tuple(target_bits.shape)}"
        )
    return F.binary_cross_entropy_with_logits(logits, target_bits, reduction="mean")


def class_loss(logits: torch.Tensor, target_codes: torch.Tensor, levels: int) -> torch.Tensor:
    """Plain L-way cross-entropy; class logits live on the same axis as the bits."""
    half = check_levels(levels)
    if logits.shape[BIT_AXIS] != levels or logits.shape[:BIT_AXIS] + logits.shape[BIT_AXIS + 1:] != target_codes.shape:
        raise ValueError(f"class logits {tuple(logits.shape)} incompatible with codes {tuple(target_codes.shape)}")
    y = target_codes.to(torch.int64) + half
    if (y < 0).any() or (y >= levels).any():
        raise ValueError(f"codes outside [-{half}, {half}] for L={levels}")
    return F.cross_entropy(logits.movedim(BIT_AXIS, 0).flatten(1).T, y.flatten(), reduction="mean")


def decode_classes(logits: torch.Tensor, levels: int) -> torch.Tensor:
    return logits.argmax(dim=BIT_AXIS) - check_levels(levels)


def code_space_size(levels: int, code_dim: int) -> int:
    """Number of distinct code vectors per site, L**d (Python ints never overflow)."""
    check_levels(levels)
    if code_dim < 1:
        raise ValueError("code_dim must be >= 1")
    return levels**code_dim


def log_code_space_size(levels: int, code_dim: int) -> float:
    check_levels(levels)
    return code_dim * math.log(levels)


# ---------------------------------------------------------------------------
# export


def codes_to_json(codes, levels: int) -> dict:
    arr = np.asarray(codes.cpu() if isinstance(codes, torch.Tensor) else codes).astype(np.int64)
    half = check_levels(levels)
    if arr.ndim != 3:
        raise ValueError(f"code grid must be (d, h, w), got shape {arr.shape}")
    if arr.min() < -half or arr.max() > half:
        raise ValueError(f"codes outside [-{half}, {half}]")
    return {"levels": levels, "shape": list(arr.shape), "codes": arr.tolist()}


def codes_from_json(obj: dict) -> tuple[np.ndarray, int]:
    arr = np.asarray(obj["codes"], dtype=np.int64)
    if list(arr.shape) != list(obj["shape"]):
        raise ValueError(f"code array shape {arr.shape} disagrees with header {obj['shape']}")
    half = check_levels(int(obj["levels"]))
    if arr.min() < -half or arr.max() > half:
        raise ValueError("codes outside level range")
    return arr, int(obj["levels"])


def save_codes_json(codes, levels: int, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(codes_to_json(codes, levels), f)


def level_palette(levels: int) -> np.ndarray:
    """Fixed (L, 3) uint8 palette: diverging blue-white-red, code 0 maps to white-ish."""
    from matplotlib import colormaps

    cmap = colormaps["RdBu_r"]
    return (np.array([cmap(t)[:3] for t in np.linspace(0.0, 1.0, levels)]) * 255).round().astype(np.uint8)


def save_code_heatmaps(codes, levels: int, out_dir: str | Path, prefix: str, scale: int = 8) -> list[Path]:
    """One RGB PNG per code channel, nearest-upscaled by ``scale``."""
    from PIL import Image

    arr, _ = codes_from_json(codes_to_json(codes, levels))
    palette = level_palette(levels)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for c, channel in enumerate(arr):
        rgb = palette[channel + levels // 2]
        rgb = rgb.repeat(scale, axis=0).repeat(scale, axis=1)
        p = out_dir / f"{prefix}_ch{c}.png"
        Image.fromarray(rgb, mode="RGB").save(p)
        paths.append(p)
    return paths
