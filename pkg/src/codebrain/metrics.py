"""PSNR / SSIM / MAE, scenario-level evaluation and code-map coherence."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .synthdata import PhantomDataset, enumerate_scenarios

PSNR_CAP = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y) -> float:
    """PSNR in dB at data range 1; identical images give the 100 dB cap."""
    x, y = _pair(x, y)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def mae(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean(np.abs(x - y)))


def _gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the last two axes."""
    k = len(g)
    rows = sum(g[i] * img[..., i:img.shape[-2] - k + 1 + i, :] for i in range(k))
    return sum(g[i] * rows[..., :, i:rows.shape[-1] - k + 1 + i] for i in range(k))


def ssim(x, y, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian (sigma 1.5) windows."""
    x, y = _pair(x, y)
    if x.ndim != 2:
        raise ValueError(f"ssim expects a 2-D image, got shape {x.shape}")
    if min(x.shape) < SSIM_WIN:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    g = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    vx = _filter_valid(x * x, g) - mx * mx
    vy = _filter_valid(y * y, g) - my * my
    cov = _filter_valid(x * y, g) - mx * my
    s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


# ---------------------------------------------------------------------------
# code maps


def code_map_coherence(codes) -> float:
    """Fraction of 4-neighbour site pairs whose full code vectors agree; codes are (d, h, w)."""
    c = np.asarray(codes)
    if c.ndim == 2:
        c = c[None]
    if c.ndim != 3 or c.shape[1] < 2 or c.shape[2] < 2:
        raise ValueError(f"code grid must be (d, h, w) with h, w >= 2, got {c.shape}")
    horiz = np.all(c[:, :, 1:] == c[:, :, :-1], axis=0)
    vert = np.all(c[:, 1:, :] == c[:, :-1, :], axis=0)
    return float((horiz.sum() + vert.sum()) / (horiz.size + vert.size))


def permuted_coherence(codes, rng: np.random.Generator, n_perm: int = 20) -> float:
    """Coherence after shuffling sites uniformly at random, averaged over permutations."""
    c = np.asarray(codes)
    if c.ndim == 2:
        c = c[None]
    d, h, w = c.shape
    flat = c.reshape(d, h * w)
    vals = [code_map_coherence(flat[:, rng.permutation(h * w)].reshape(d, h, w)) for _ in range(n_perm)]
    return float(np.mean(vals))


def level_histogram(codes, levels: int) -> np.ndarray:
    """(d, L) counts of each level per code dimension."""
    c = np.asarray(codes)
    half = levels // 2
    return np.stack([np.bincount((ch + half).ravel(), minlength=levels) for ch in c])


# ---------------------------------------------------------------------------
# evaluation

METHODS = ("imputation", "reconstruction", "zero")


@dataclass
class MetricsReport:
    modality_names: tuple[str, ...]
    scenarios: list[tuple[tuple[int, ...], int]]
    # method -> (n_pairs, n_subjects, 3) array of psnr, ssim, mae
    values: dict[str, np.ndarray] = field(default_factory=dict)
    subject_ids: list[str] = field(default_factory=list)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    def cell(self, method: str, pair: int) -> dict[str, float]:
        v = self.values[method][pair].mean(axis=0)
        return {"psnr": float(v[0]), "ssim": float(v[1]), "mae": float(v[2])}

    def _group(self, kind: str) -> list[int]:
        if kind == "O->O":
            return [i for i, (a, _) in enumerate(self.scenarios) if len(a) == 1]
        if kind == "M->O":
            return [i for i, (a, _) in enumerate(self.scenarios) if len(a) >= 2]
        return list(range(len(self.scenarios)))

    def aggregate(self, method: str, kind: str = "ALL") -> dict[str, float]:
        """Unweighted mean over (scenario, target, subject) triples in the group."""
        idx = self._group(kind)
        if not idx:
            return {"psnr": float("nan"), "ssim": float("nan"), "mae": float("nan")}
        v = self.values[method][idx].reshape(-1, 3).mean(axis=0)
        return {"psnr": float(v[0]), "ssim": float(v[1]), "mae": float(v[2])}

    def pattern_name(self, avail) -> str:
        return "+".join(self.modality_names[i] for i in avail)

    def to_dict(self) -> dict:
        names = self.modality_names
        cells = []
        for i, (a, t) in enumerate(self.scenarios):
            row = {"available": [names[j] for j in a], "target": names[t], "kind": "O->O" if len(a) == 1 else "M->O"}
            for m in self.values:
                c = self.cell(m, i)
                row[m] = {"psnr_db": c["psnr"], "ssim_pct": 100 * c["ssim"], "mae_x1000": 1000 * c["mae"]}
            cells.append(row)
        agg = {
            m: {
                k: {"psnr_db": v["psnr"], "ssim_pct": 100 * v["ssim"], "mae_x1000": 1000 * v["mae"]}
                for k in ("O->O", "M->O", "ALL")
                for v in [self.aggregate(m, k)]
            }
            for m in self.values
        }
        return {
            "modalities": list(names),
            "n_subjects": self.n_subjects,
            "subjects": self.subject_ids,
            "n_patterns": len({a for a, _ in self.scenarios}),
            "cells": cells,
            "aggregates": agg,
        }

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "metrics.json", "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        self.write_table(out_dir / "metrics.csv")

    def write_table(self, path) -> None:
        """Rows are (method, availability pattern); columns are per-target PSNR/SSIM/MAE."""
        names = self.modality_names
        patterns = list(dict.fromkeys(a for a, _ in self.scenarios))
        header = ["method", "available"] + [f"{t}_{k}" for t in names for k in ("PSNR_dB", "SSIM_pct", "MAE_x1000")]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            for m in self.values:
                for a in patterns:
                    row = [m, self.pattern_name(a)]
                    for t in range(len(names)):
                        if t in a:
                            row += ["N/A"] * 3
                        else:
                            c = self.cell(m, self.scenarios.index((a, t)))
                            row += [f"{c['psnr']:.4f}", f"{100 * c['ssim']:.4f}", f"{1000 * c['mae']:.4f}"]
                    w.writerow(row)
                for kind in ("O->O", "M->O", "ALL"):
                    v = self.aggregate(m, kind)
                    w.writerow([m, f"mean {kind}", f"{v['psnr']:.4f}", f"{100 * v['ssim']:.4f}", f"{1000 * v['mae']:.4f}"])


def _score(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return np.array([[psnr(p, t), ssim(p, t), mae(p, t)] for p, t in zip(pred, truth)])


def evaluate(
    data: PhantomDataset,
    model,
    split: str = "test",
    scenarios=None,
    methods=METHODS,
    decode: str = "threshold",
) -> MetricsReport:
    """Score stage-2 imputation, stage-1 oracle-code reconstruction and zero filling on every scenario."""
    from .training import impute_batch, reconstruct_batch

    idx = data.splits.get(split) or []
    if not idx:
        raise ValueError(f"split {split!r} is empty")
    n = data.images.shape[1]
    scenarios = list(scenarios) if scenarios is not None else enumerate_scenarios(n)
    images = torch.from_numpy(np.ascontiguousarray(data.images[idx]))
    truth_all = data.images[idx].astype(np.float64)
    values = {m: np.zeros((len(scenarios), len(idx), 3)) for m in methods}
    cache = {}
    for i, (avail, target) in enumerate(scenarios):
        available = tuple(j in avail for j in range(n))
        truth = truth_all[:, target]
        if "imputation" in methods:
            if available not in cache:
                cache[available] = {k: v.numpy() for k, v in impute_batch(model, images, available, decode).items()}
            values["imputation"][i] = _score(cache[available][target], truth)
        if "reconstruction" in methods:
            values["reconstruction"][i] = _score(reconstruct_batch(model, images, available, target).numpy(), truth)
        if "zero" in methods:
            values["zero"][i] = _score(np.zeros_like(truth), truth)
    return MetricsReport(
        modality_names=tuple(data.modality_names),
        scenarios=scenarios,
        values=values,
        subject_ids=[data.subject_ids[i] for i in idx],
    )
