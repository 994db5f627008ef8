"""Finite-difference verification of autograd gradients.

Straight-through rounding is checked on the function it actually differentiates:
the stop-gradient term ``round(z) - z`` is recorded once at the base point and
held fixed while parameters are perturbed, so central differences probe the same
surrogate that backpropagation sees.
"""
from __future__ import annotations

import copy

import numpy as np
import torch

from . import quantizer as Q
from .nets import CodeBrain, stage1_loss, stage2_loss
from .synthdata import mask_batch, sample_scenario


class NonDeterministicOp(ValueError):
    pass


def grad_check(
    fn,
    params: list[torch.Tensor],
    n_coords: int = 32,
    eps: float = 1e-6,
    seed: int = 0,
    corrupt: float = 1.0,
    floor: float = 1e-6,
    return_details: bool = False,
):
    """Worst relative error between autograd and central differences.

    ``fn`` is a zero-argument callable returning a scalar that depends on
    ``params``. Coordinates are drawn uniformly over all parameter entries. The
    relative error is ``|g_auto - g_fd| / max(|g_fd|, floor)``; ``corrupt``
    scales the autograd gradient (a negative control).
    """
    params = list(params)
    with torch.no_grad():
        f0, f1 = fn(), fn()
    if not torch.equal(f0, f1):
        raise NonDeterministicOp(f"op is not deterministic: {f0.item()!r} vs {f1.item()!r}")
    out = fn()
    grads = torch.autograd.grad(out, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat_ids = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    analytic, numeric = [], []
    with torch.no_grad():
        for fid in flat_ids:
            k = int(np.searchsorted(bounds, fid, side="right"))
            i = int(fid - (bounds[k - 1] if k else 0))
            flat = params[k].view(-1)
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            numeric.append((fp - fm) / (2 * eps))
            analytic.append(corrupt * grads[k].view(-1)[i].item())
    a, n = np.array(analytic), np.array(numeric)
    rel = np.abs(a - n) / np.maximum(np.abs(n), floor)
    worst = float(rel.max())
    if return_details:
        return worst, {"analytic": a, "numeric": n, "relative": rel}
    return worst


# ---------------------------------------------------------------------------
# named ops


def ste_case(levels: int = 5, shape=(4, 8, 8), seed: int = 0):
    """A smooth function of quantize(bound(F)) with the rounding offset frozen."""
    g = torch.Generator().manual_seed(seed)
    feats = torch.randn(shape, generator=g, dtype=torch.float64).requires_grad_(True)
    w1 = torch.randn(shape, generator=g, dtype=torch.float64)
    w2 = torch.rand(shape, generator=g, dtype=torch.float64)
    with torch.no_grad():
        offset = Q.ste_offset(Q.bound(feats, levels))

    def fn():
        q = Q.quantize(Q.bound(feats, levels), offset)
        return (w1 * q + 0.5 * w2 * q**2).sum()

    return fn, [feats]


def _inputs(model: CodeBrain, batch: int, seed: int):
    cfg = model.cfg
    g = torch.Generator().manual_seed(seed)
    images = torch.rand(batch, cfg.n_modalities, cfg.image_size, cfg.image_size, generator=g, dtype=torch.float64)
    rng = np.random.default_rng(seed)
    masks = [sample_scenario(rng, cfg.n_modalities) for _ in range(batch)]
    avail = torch.tensor([m.available for m in masks])
    masked = mask_batch(images, avail, cfg.indicators)
    anchor = images[torch.arange(batch), [m.anchor for m in masks]].unsqueeze(1)
    return images, masked, anchor


def stage1_case(model: CodeBrain, gan_weight: float = 1.0, batch: int = 2, seed: int = 0):
    """Full stage-1 objective w.r.t. the generator parameters (float64 copy of ``model``)."""
    model = copy.deepcopy(model).double()
    _, masked, anchor = _inputs(model, batch, seed)
    with torch.no_grad():
        z = Q.bound(model.forward_posterior(anchor), model.cfg.levels)
        offset = Q.ste_offset(z) if model.cfg.quant_mode == "discrete" else None

    def fn():
        return stage1_loss(model, anchor, masked, gan_weight, offset)[0]

    return fn, model.stage1_parameters()


def stage2_case(model: CodeBrain, batch: int = 2, seed: int = 0):
    """Stage-2 objective w.r.t. the prior parameters against random valid targets."""
    model = copy.deepcopy(model).double()
    cfg = model.cfg
    _, masked, _ = _inputs(model, batch, seed)
    g = torch.Generator().manual_seed(seed + 1)
    shape = (batch, cfg.n_modalities * cfg.code_dim, cfg.latent_size, cfg.latent_size)
    half = cfg.levels // 2
    if cfg.quant_mode == "continuous":
        targets = (torch.rand(shape, generator=g, dtype=torch.float64) * 2 - 1) * half
    else:
        targets = torch.randint(-half, half + 1, shape, generator=g)

    def fn():
        return stage2_loss(model, masked, targets)

    return fn, list(model.prior.parameters())


OPS = {"ste": ste_case, "stage1": stage1_case, "stage2": stage2_case}


def check_op(op: str, model: CodeBrain | None = None, n_coords: int = 32, seed: int = 0, **kw) -> float:
    if op not in OPS:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(OPS)}")
    fn, params = OPS[op](seed=seed) if op == "ste" else OPS[op](model, seed=seed)
    return grad_check(fn, params, n_coords=n_coords, seed=seed, **kw)
