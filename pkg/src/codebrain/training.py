"""Two-stage training, the cosine LR schedule, checkpoint I/O and the inference path."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import NetConfig, TrainConfig, config_hash, net_from_dict, to_dict, train_from_dict
from .quantizer import NonFiniteLatent
from .nets import CodeBrain, build_model, lsgan_discriminator_loss, reinit_module, stage1_loss, stage2_loss
from .synthdata import ModalityStack, PhantomDataset, ScenarioMask, mask_batch, sample_scenario

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class IncompatibleCheckpoint(ValueError):
    pass


def lr_schedule(step: int, total_steps: int, lr: float, min_lr: float) -> float:
    """Cosine decay from ``lr`` at step 0 to ``min_lr`` at ``total_steps``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class TrainReport:
    stage: int
    epochs: int
    curves: dict[str, list[float]] = field(default_factory=dict)
    validation: dict[str, list[float]] = field(default_factory=dict)
    final_checkpoint: str | None = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        # wall time is kept out of the report so reruns are byte-identical
        d = dataclasses.asdict(self)
        d.pop("wall_time")
        return d

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "report.json", "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        names = list(self.curves) + [f"val_{k}" for k in self.validation]
        with open(out_dir / "loss_curves.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", *names])
            for e in range(self.epochs):
                row = [self.curves[k][e] for k in self.curves] + [self.validation[k][e] for k in self.validation]
                w.writerow([e + 1, *[repr(v) for v in row]])
        with open(out_dir / "timing.json", "w") as f:
            json.dump({"wall_time_s": self.wall_time}, f)


# ---------------------------------------------------------------------------
# state (de)serialization


def _module_tensors(model: CodeBrain, names) -> dict[str, torch.Tensor]:
    out = {}
    for name in names:
        for k, v in getattr(model, name).state_dict().items():
            out[f"{name}.{k}"] = v
    return out


def _optimizer_tensors(prefix: str, opt: torch.optim.Optimizer):
    tensors, steps = {}, {}
    state = opt.state_dict()["state"]
    # numeric order: after a resume the state dict is rebuilt from JSON (string-sorted) keys
    for i in sorted(state, key=int):
        st = state[i]
        tensors[f"{prefix}.{i}.exp_avg"] = st["exp_avg"]
        tensors[f"{prefix}.{i}.exp_avg_sq"] = st["exp_avg_sq"]
        steps[str(i)] = float(st["step"])
    return tensors, steps


def _restore_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors, steps: dict) -> None:
    sd = opt.state_dict()
    sd["state"] = {
        int(i): {
            "step": torch.tensor(s, dtype=torch.float32),
            "exp_avg": tensors[f"{prefix}.{i}.exp_avg"].clone(),
            "exp_avg_sq": tensors[f"{prefix}.{i}.exp_avg_sq"].clone(),
        }
        for i, s in sorted(steps.items(), key=lambda kv: int(kv[0]))
    }
    opt.load_state_dict(sd)


def _load_modules(model: CodeBrain, names, tensors) -> None:
    for name in names:
        mod = getattr(model, name)
        prefix = f"{name}."
        sd = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        try:
            mod.load_state_dict(sd, strict=True)
        except RuntimeError as e:
            raise IncompatibleCheckpoint(f"cannot load {name}: {e}") from e


STAGE1_MODULES = ("posterior", "source", "decoder", "discriminator")


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)


def _meta(kind, model, cfg, epoch, step, rng, report, **extra):
    return {
        "kind": kind,
        "net": to_dict(model.cfg),
        "net_hash": config_hash(model.cfg),
        "train": to_dict(cfg),
        "train_hash": config_hash(cfg),
        "epoch": epoch,
        "step": step,
        "rng": rng.bit_generator.state,
        "curves": report.curves,
        "validation": report.validation,
        **extra,
    }


def load_stage1(path: str | Path, net_cfg: NetConfig | None = None) -> CodeBrain:
    """Model with stage-1 weights from ``path`` (prior left at its seeded init)."""
    tensors, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "stage1":
        raise IncompatibleCheckpoint(f"{path}: expected a stage-1 checkpoint, found {meta.get('kind')!r}")
    stored = net_from_dict(meta["net"])
    if net_cfg is not None and _stage1_view(net_cfg) != _stage1_view(stored):
        raise IncompatibleCheckpoint(
            f"{path}: network config hash {config_hash(_stage1_view(stored))} "
            f"!= expected {config_hash(_stage1_view(net_cfg))}"
        )
    model = build_model(net_cfg or stored, seed=0)
    _load_modules(model, STAGE1_MODULES, tensors)
    model.trained_stages = {1}
    model.modality_names = tuple(meta.get("modalities", ()))
    model.stage1_digest = ckpt.file_digest(path)
    return model


def load_models(stage1_path, stage2_path=None) -> CodeBrain:
    """Full inference model from a stage-1 and (optionally) a stage-2 checkpoint."""
    if stage2_path is None:
        return load_stage1(stage1_path)
    tensors, meta = ckpt.load_checkpoint(stage2_path)
    if meta.get("kind") != "stage2":
        raise IncompatibleCheckpoint(f"{stage2_path}: expected a stage-2 checkpoint, found {meta.get('kind')!r}")
    digest = ckpt.file_digest(stage1_path)
    if meta["stage1_digest"] != digest:
        raise IncompatibleCheckpoint(
            f"{stage2_path} was trained on stage-1 checkpoint {meta['stage1_digest']}, got {digest}"
        )
    model = load_stage1(stage1_path, net_from_dict(meta["net"]))
    _load_modules(model, ("prior",), tensors)
    model.trained_stages = {1, 2}
    return model


def _stage1_view(cfg: NetConfig) -> NetConfig:
    # the prior head does not influence stage-1 weights
    return dataclasses.replace(cfg, prior_head="regression" if cfg.quant_mode == "continuous" else "grading")


# ---------------------------------------------------------------------------
# batching


def _batch(images: torch.Tensor, idx, rng, n: int, indicators: bool):
    masks = [sample_scenario(rng, n) for _ in idx]
    x = images[idx]
    avail = torch.tensor([m.available for m in masks])
    anchor = torch.tensor([m.anchor for m in masks])
    masked = mask_batch(x, avail, indicators)
    return x, masked, anchor


def _fixed_val_masks(seed: int, count: int, n: int) -> list[ScenarioMask]:
    rng = np.random.default_rng([seed, 7919])
    return [sample_scenario(rng, n) for _ in range(count)]


def _split_tensor(data: PhantomDataset, name: str) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(data.split(name)))


def _check_data(data: PhantomDataset, cfg: NetConfig) -> None:
    if data.images.shape[1] != cfg.n_modalities or data.images.shape[-1] != cfg.image_size:
        raise ValueError(
            f"dataset is {data.images.shape[1]} modalities at {data.images.shape[-1]}px, "
            f"model expects {cfg.n_modalities} at {cfg.image_size}px"
        )


def _steps_per_epoch(n_train: int, batch: int) -> int:
    return max(1, math.ceil(n_train / batch))


# ---------------------------------------------------------------------------
# stage 1


def train_stage1(
    data: PhantomDataset,
    net_cfg: NetConfig,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    stop_after: int | None = None,
) -> tuple[CodeBrain, TrainReport]:
    """Train posterior encoder, source encoder, decoder and discriminator.

    ``stop_after`` ends the run after that many epochs (used to emulate an
    interruption); ``resume_from`` continues from a stage-1 checkpoint.
    """
    if cfg.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 TrainConfig")
    _check_data(data, net_cfg)
    t0 = time.perf_counter()
    out_dir = Path(out_dir) if out_dir is not None else None
    images = _split_tensor(data, "train")
    val = _split_tensor(data, "val") if data.splits.get("val") else None
    n = net_cfg.n_modalities
    model = build_model(net_cfg, cfg.seed)
    opt_g = _adam(model.stage1_parameters(), cfg)
    opt_d = _adam(model.discriminator.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(stage=1, epochs=cfg.epochs)
    names = ["total", "psnr"] + (["gan", "disc"] if cfg.gan_weight > 0 else [])
    report.curves = {k: [] for k in names}
    report.validation = {"psnr_db": []}
    start_epoch, step = 0, 0

    if resume_from is not None:
        tensors, meta = ckpt.load_checkpoint(resume_from)
        _check_resume(meta, "stage1", model.cfg, cfg, resume_from)
        _load_modules(model, STAGE1_MODULES, tensors)
        _restore_optimizer("opt_g", opt_g, tensors, meta["opt_steps"]["opt_g"])
        _restore_optimizer("opt_d", opt_d, tensors, meta["opt_steps"]["opt_d"])
        rng.bit_generator.state = meta["rng"]
        report.curves, report.validation = meta["curves"], meta["validation"]
        start_epoch, step = meta["epoch"], meta["step"]

    steps_per_epoch = _steps_per_epoch(len(images), cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    val_masks = _fixed_val_masks(cfg.seed, len(val), n) if val is not None else None
    end_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)

    def save(epoch, tag):
        tensors = _module_tensors(model, STAGE1_MODULES)
        tg, sg = _optimizer_tensors("opt_g", opt_g)
        td, sd = _optimizer_tensors("opt_d", opt_d)
        meta = _meta(
            "stage1", model, cfg, epoch, step, rng, report,
            opt_steps={"opt_g": sg, "opt_d": sd}, modalities=list(data.modality_names),
        )
        return ckpt.save_checkpoint(out_dir / f"stage1_{tag}.ckpt", {**tensors, **tg, **td}, meta)

    for epoch in range(start_epoch, end_epoch):
        perm = rng.permutation(len(images))
        sums = dict.fromkeys(names, 0.0)
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x, masked, anchor = _batch(images, idx, rng, n, net_cfg.indicators)
            target = x[torch.arange(len(idx)), anchor].unsqueeze(1)
            lr = lr_schedule(step, total_steps, cfg.lr, cfg.min_lr)
            for opt in (opt_g, opt_d):
                for g in opt.param_groups:
                    g["lr"] = lr
            try:
                total, l_psnr, l_gan, pred, _ = stage1_loss(model, target, masked, cfg.gan_weight)
                bad = None if torch.isfinite(total) else f"loss became {total.item()}"
            except NonFiniteLatent as e:
                bad = str(e)
            if bad:
                if out_dir is not None:
                    save(epoch, "diverged")
                raise TrainingDiverged(f"stage 1 diverged at epoch {epoch + 1}, step {step}: {bad}")
            opt_g.zero_grad(set_to_none=True)
            total.backward()
            opt_g.step()
            w = len(idx)
            sums["total"] += total.item() * w
            sums["psnr"] += l_psnr.item() * w
            if cfg.gan_weight > 0:
                disc = model.discriminator
                l_disc = lsgan_discriminator_loss(disc(target), disc(pred.detach()))
                opt_d.zero_grad(set_to_none=True)
                l_disc.backward()
                opt_d.step()
                sums["gan"] += l_gan.item() * w
                sums["disc"] += l_disc.item() * w
            step += 1
        for k in names:
            report.curves[k].append(sums[k] / len(images))
        if val is not None:
            report.validation["psnr_db"].append(_val_psnr(model, val, val_masks))
        log.info("stage1 epoch %d/%d %s", epoch + 1, cfg.epochs, {k: round(v[-1], 4) for k, v in report.curves.items()})
        done = epoch + 1
        if out_dir is not None and (done % cfg.checkpoint_every == 0 or done == cfg.epochs):
            save(done, f"epoch{done:03d}")
            if done == cfg.epochs:
                report.final_checkpoint = save(done, "final").name

    model.trained_stages = {1}
    if out_dir is not None and report.final_checkpoint:
        model.stage1_digest = ckpt.file_digest(out_dir / report.final_checkpoint)
    report.wall_time = time.perf_counter() - t0
    return model, report


def _check_resume(meta, kind, net_cfg, cfg, path):
    if meta.get("kind") != kind:
        raise IncompatibleCheckpoint(f"{path}: expected {kind} checkpoint, found {meta.get('kind')!r}")
    if meta["net_hash"] != config_hash(net_cfg):
        raise IncompatibleCheckpoint(f"{path}: net config hash {meta['net_hash']} != {config_hash(net_cfg)}")
    if meta["train_hash"] != config_hash(cfg):
        raise IncompatibleCheckpoint(f"{path}: train config hash {meta['train_hash']} != {config_hash(cfg)}")


@torch.no_grad()
def _val_psnr(model: CodeBrain, val: torch.Tensor, masks) -> float:
    avail = torch.tensor([m.available for m in masks])
    anchor = torch.tensor([m.anchor for m in masks])
    target = val[torch.arange(len(val)), anchor].unsqueeze(1)
    pred, _, _ = model.reconstruct(target, mask_batch(val, avail, model.cfg.indicators))
    mse = ((pred - target) ** 2).flatten(1).mean(1).double()
    return float((10 * torch.log10(1.0 / mse.clamp_min(1e-10))).mean())


# ---------------------------------------------------------------------------
# stage 2


@torch.no_grad()
def stage2_targets(model: CodeBrain, images: torch.Tensor, batch: int = 64) -> torch.Tensor:
    """Frozen stage-1 targets for every modality: (S, N*d, h, w) codes, or bounded latents if continuous."""
    s, n = images.shape[:2]
    out = []
    for i in range(0, s, batch):
        x = images[i:i + batch]
        flat = x.reshape(-1, 1, *x.shape[2:])
        z, code = model.latent(model.forward_posterior(flat))
        t = code if model.cfg.quant_mode == "discrete" else z
        out.append(t.reshape(x.shape[0], n * model.cfg.code_dim, *t.shape[2:]))
    return torch.cat(out)


def with_prior_head(model: CodeBrain, prior_head: str) -> CodeBrain:
    """Copy of ``model`` sharing its stage-1 weights but with a different prior head."""
    if prior_head == model.cfg.prior_head:
        return model
    new = CodeBrain(dataclasses.replace(model.cfg, prior_head=prior_head))
    for name in STAGE1_MODULES:
        getattr(new, name).load_state_dict(getattr(model, name).state_dict())
    new.trained_stages = set(getattr(model, "trained_stages", set())) - {2}
    new.stage1_digest = getattr(model, "stage1_digest", None)
    new.modality_names = getattr(model, "modality_names", ())
    return new


def train_stage2(
    data: PhantomDataset,
    stage1: CodeBrain,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    stop_after: int | None = None,
    prior_head: str | None = None,
) -> tuple[CodeBrain, TrainReport]:
    """Train the prior encoder to predict all N modalities' stage-1 codes from a masked stack."""
    if cfg.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 TrainConfig")
    if 1 not in getattr(stage1, "trained_stages", set()):
        raise IncompatibleCheckpoint("stage-2 training needs a trained stage-1 model")
    model = with_prior_head(stage1, prior_head or stage1.cfg.prior_head)
    _check_data(data, model.cfg)
    t0 = time.perf_counter()
    out_dir = Path(out_dir) if out_dir is not None else None
    reinit_module(model.prior, cfg.seed)
    for p in model.parameters():
        p.requires_grad_(False)
    for p in model.prior.parameters():
        p.requires_grad_(True)

    images = _split_tensor(data, "train")
    targets = stage2_targets(model, images)
    val = _split_tensor(data, "val") if data.splits.get("val") else None
    val_targets = stage2_targets(model, val) if val is not None else None
    n = model.cfg.n_modalities
    opt = _adam(model.prior.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    loss_name = {"grading": "grading", "cls": "cls", "regression": "l2"}[model.cfg.prior_head]
    report = TrainReport(stage=2, epochs=cfg.epochs)
    report.curves = {"total": [], loss_name: []}
    val_keys = ["mse"] if model.cfg.quant_mode == "continuous" else ["code_acc_available", "code_acc_missing"]
    report.validation = {k: [] for k in val_keys}
    start_epoch, step = 0, 0
    digest = getattr(stage1, "stage1_digest", None)

    if resume_from is not None:
        tensors, meta = ckpt.load_checkpoint(resume_from)
        _check_resume(meta, "stage2", model.cfg, cfg, resume_from)
        if meta["stage1_digest"] != digest:
            raise IncompatibleCheckpoint(f"{resume_from}: stage-1 digest {meta['stage1_digest']} != {digest}")
        _load_modules(model, ("prior",), tensors)
        _restore_optimizer("opt", opt, tensors, meta["opt_steps"]["opt"])
        rng.bit_generator.state = meta["rng"]
        report.curves, report.validation = meta["curves"], meta["validation"]
        start_epoch, step = meta["epoch"], meta["step"]

    steps_per_epoch = _steps_per_epoch(len(images), cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    val_masks = _fixed_val_masks(cfg.seed, len(val), n) if val is not None else None
    end_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)

    def save(epoch, tag):
        tensors = _module_tensors(model, ("prior",))
        to, so = _optimizer_tensors("opt", opt)
        meta = _meta(
            "stage2", model, cfg, epoch, step, rng, report,
            opt_steps={"opt": so}, stage1_digest=digest, modalities=list(data.modality_names),
        )
        return ckpt.save_checkpoint(out_dir / f"stage2_{tag}.ckpt", {**tensors, **to}, meta)

    for epoch in range(start_epoch, end_epoch):
        perm = rng.permutation(len(images))
        total_sum = 0.0
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            _, masked, _ = _batch(images, idx, rng, n, model.cfg.indicators)
            for g in opt.param_groups:
                g["lr"] = lr_schedule(step, total_steps, cfg.lr, cfg.min_lr)
            loss = stage2_loss(model, masked, targets[idx])
            if not torch.isfinite(loss):
                if out_dir is not None:
                    save(epoch, "diverged")
                raise TrainingDiverged(f"stage-2 loss became {loss.item()} at epoch {epoch + 1}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total_sum += loss.item() * len(idx)
            step += 1
        mean = total_sum / len(images)
        report.curves["total"].append(mean)
        report.curves[loss_name].append(mean)
        if val is not None:
            for k, v in _val_codes(model, val, val_targets, val_masks).items():
                report.validation[k].append(v)
        log.info("stage2 epoch %d/%d loss %.5f", epoch + 1, cfg.epochs, mean)
        done = epoch + 1
        if out_dir is not None and (done % cfg.checkpoint_every == 0 or done == cfg.epochs):
            save(done, f"epoch{done:03d}")
            if done == cfg.epochs:
                report.final_checkpoint = save(done, "final").name

    for p in model.parameters():
        p.requires_grad_(True)
    model.trained_stages = {1, 2}
    report.wall_time = time.perf_counter() - t0
    return model, report


@torch.no_grad()
def _val_codes(model: CodeBrain, val, targets, masks) -> dict[str, float]:
    avail = torch.tensor([m.available for m in masks])
    masked = mask_batch(val, avail, model.cfg.indicators)
    pred = model.predict_codes(masked)
    if model.cfg.quant_mode == "continuous":
        return {"mse": float(((pred - targets) ** 2).mean())}
    d = model.cfg.code_dim
    hit = (pred == targets).float().view(len(val), model.cfg.n_modalities, d, -1).mean(dim=(2, 3))
    a = avail.float()
    return {
        "code_acc_available": float((hit * a).sum() / a.sum()),
        "code_acc_missing": float((hit * (1 - a)).sum() / (1 - a).sum()),
    }


# ---------------------------------------------------------------------------
# inference


def _require(model: CodeBrain, stages) -> None:
    have = getattr(model, "trained_stages", set())
    missing = set(stages) - have
    if missing:
        raise IncompatibleCheckpoint(f"model lacks trained stage(s) {sorted(missing)}")


@torch.no_grad()
def impute_batch(model: CodeBrain, images: torch.Tensor, available, decode: str = "threshold") -> dict[int, torch.Tensor]:
    """Synthesize every missing modality of ``(B, N, H, W)`` under one availability pattern.

    Only the masked stack reaches the networks.
    """
    _require(model, (1, 2))
    avail = torch.tensor([list(available)] * images.shape[0], dtype=torch.bool)
    masked = mask_batch(images, avail, model.cfg.indicators)
    common = model.forward_source(masked)
    codes = model.predict_codes(masked, decode)
    return {
        m: model.forward_decoder(model.code_slice(codes, m), common)[:, 0]
        for m in range(images.shape[1])
        if not available[m]
    }


@torch.no_grad()
def reconstruct_batch(model: CodeBrain, images: torch.Tensor, available, target: int) -> torch.Tensor:
    """Oracle-code variant: the target's own stage-1 code with common features from the masked stack."""
    _require(model, (1,))
    avail = torch.tensor([list(available)] * images.shape[0], dtype=torch.bool)
    masked = mask_batch(images, avail, model.cfg.indicators)
    pred, _, _ = model.reconstruct(images[:, target:target + 1], masked)
    return pred[:, 0]


def impute(stack: ModalityStack, mask: ScenarioMask | tuple, model: CodeBrain, decode: str = "threshold") -> ModalityStack:
    """Complete a subject; available modalities are returned untouched."""
    available = mask.available if isinstance(mask, ScenarioMask) else tuple(mask)
    if len(available) != stack.n_modalities:
        raise ValueError(f"mask covers {len(available)} modalities, stack has {stack.n_modalities}")
    if all(available):
        raise ValueError("nothing to impute: every modality is available")
    if not any(available):
        raise ValueError("at least one modality must be available")
    x = torch.from_numpy(np.ascontiguousarray(stack.images))[None]
    synth = impute_batch(model, x, available, decode)
    out = stack.images.copy()
    for m, img in synth.items():
        out[m] = img[0].numpy()
    return ModalityStack(stack.subject_id, stack.modality_names, out)
