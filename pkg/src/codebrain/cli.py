"""``codebrain`` command line: gen-data, train, evaluate, impute, export-codes.

Exit status: 0 on success, 1 on validation errors (bad config, flags, inputs or
incompatible checkpoints), 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import re
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import quantizer as Q
from .checkpoint import CheckpointError
from .config import ExperimentConfig, experiment_from_dict, load_config, to_dict
from .metrics import code_map_coherence, evaluate, level_histogram, permuted_coherence
from .synthdata import (
    DatasetError, ModalityStack, enumerate_scenarios, from_u16, generate_dataset, read_dataset, read_png16,
    to_u16, write_dataset,
)
from .training import (
    IncompatibleCheckpoint, impute, impute_batch, load_models, load_stage1, stage2_targets, train_stage1,
    train_stage2,
)

log = logging.getLogger("codebrain")

ERROR_SCALE = 0.3


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers


def _load_cfg(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else experiment_from_dict({})


def _prepare_out(args, allow_existing: bool = False) -> Path:
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not (args.force or allow_existing):
        raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, cfg: ExperimentConfig, args, **extra) -> None:
    run = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    with open(out / "resolved_config.json", "w") as f:
        json.dump({"version": __version__, "run": run, "config": to_dict(cfg), **extra}, f, indent=2, sort_keys=True)


def _data_path(args, cfg_path: str | None) -> Path:
    path = args.data or cfg_path
    if not path:
        raise UsageError("no dataset given: pass --data or set the dataset field of the training config")
    return Path(path)


def _save_gray(img: np.ndarray, path: Path) -> None:
    from PIL import Image

    Image.fromarray(to_u16(img)).save(path)


def _save_error_map(err: np.ndarray, path: Path) -> None:
    from matplotlib import colormaps
    from PIL import Image

    rgb = colormaps["magma"](np.clip(err / ERROR_SCALE, 0.0, 1.0))[..., :3]
    Image.fromarray((rgb * 255).round().astype(np.uint8), mode="RGB").save(path)


def _save_panel(truth, pred, path: Path) -> None:
    """truth | prediction | error, side by side on one RGB canvas."""
    from matplotlib import colormaps
    from PIL import Image

    gray = lambda x: np.repeat(np.clip(x, 0, 1)[..., None], 3, axis=2)  # noqa: E731
    err = colormaps["magma"](np.clip(np.abs(pred - truth) / ERROR_SCALE, 0, 1))[..., :3]
    canvas = np.concatenate([gray(truth), gray(pred), err], axis=1)
    Image.fromarray((canvas * 255).round().astype(np.uint8), mode="RGB").save(path)


def _parse_available(text: str, names) -> tuple[bool, ...]:
    wanted = [t.strip() for t in text.split(",") if t.strip()]
    unknown = [w for w in wanted if w not in names]
    if unknown:
        raise UsageError(f"unknown modalities {unknown}; expected a subset of {list(names)}")
    return tuple(n in wanted for n in names)


def _modality_names(model, fallback) -> tuple[str, ...]:
    names = tuple(getattr(model, "modality_names", ()) or ())
    return names or tuple(fallback)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, phantom=dataclasses.replace(cfg.phantom, seed=args.seed))
    out = _prepare_out(args)
    ds = generate_dataset(cfg.phantom)
    write_dataset(ds, out)
    _snapshot(out, cfg, args)
    counts = {k: len(v) for k, v in ds.splits.items()}
    print(f"wrote {len(ds.subject_ids)} subjects x {len(ds.modality_names)} modalities to {out}")
    print("splits: " + " / ".join(f"{k} {v}" for k, v in counts.items()))
    return 0


def _latest_checkpoint(out: Path, stage: int) -> Path | None:
    found = sorted(out.glob(f"stage{stage}_epoch*.ckpt"), key=lambda p: int(re.findall(r"\d+", p.stem)[-1]))
    return found[-1] if found else None


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    stage = args.stage
    tcfg = cfg.stage1 if stage == 1 else cfg.stage2
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    cfg = dataclasses.replace(cfg, **{f"stage{stage}": tcfg})
    if stage == 2 and not args.stage1_checkpoint:
        raise UsageError("stage 2 training requires --stage1-checkpoint")
    data_path = _data_path(args, tcfg.dataset)
    out = _prepare_out(args, allow_existing=args.resume)
    data = read_dataset(data_path)
    resume_from = _latest_checkpoint(out, stage) if args.resume else None
    if args.resume and resume_from is None:
        log.warning("--resume: no checkpoint in %s, starting from scratch", out)
    _snapshot(out, cfg, args, dataset=str(data_path))
    if stage == 1:
        model, report = train_stage1(data, cfg.net, tcfg, out_dir=out, resume_from=resume_from, stop_after=args.stop_after)
    else:
        stage1 = load_stage1(args.stage1_checkpoint, cfg.net)
        model, report = train_stage2(
            data, stage1, tcfg, out_dir=out, resume_from=resume_from, stop_after=args.stop_after,
            prior_head=cfg.net.prior_head,
        )
    if args.stop_after is not None and args.stop_after < tcfg.epochs:
        print(f"stopped after epoch {args.stop_after} of {tcfg.epochs}; continue with --resume")
        return 0
    report.write(out)
    print(f"stage {stage}: {tcfg.epochs} epochs, final loss {report.curves['total'][-1]:.5f}, "
          f"checkpoint {out / report.final_checkpoint}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    if not args.stage1_checkpoint or not args.stage2_checkpoint:
        raise UsageError("evaluate requires --stage1-checkpoint and --stage2-checkpoint")
    data = read_dataset(_data_path(args, cfg.stage2.dataset))
    out = _prepare_out(args)
    model = load_models(args.stage1_checkpoint, args.stage2_checkpoint)
    names = _modality_names(model, data.modality_names)
    if list(names) != list(data.modality_names):
        raise IncompatibleCheckpoint(f"checkpoint modalities {list(names)} != dataset modalities {list(data.modality_names)}")
    _snapshot(out, cfg, args, net=to_dict(model.cfg))
    report = evaluate(data, model, split=args.split, decode=args.decode)
    report.write(out)

    samples = out / "samples"
    samples.mkdir(exist_ok=True)
    first = data.splits[args.split][:1]
    images = torch.from_numpy(np.ascontiguousarray(data.images[first]))
    truth = data.images[first[0]]
    for avail in dict.fromkeys(a for a, _ in report.scenarios):
        available = tuple(j in avail for j in range(len(names)))
        synth = impute_batch(model, images, available, args.decode)
        for t, img in synth.items():
            pred = img[0].numpy()
            stem = f"{report.pattern_name(avail)}_to_{names[t]}"
            _save_gray(pred, samples / f"{stem}_imputed.png")
            _save_error_map(np.abs(pred - truth[t]), samples / f"{stem}_error.png")
            _save_panel(truth[t], pred, samples / f"{stem}_panel.png")

    for kind in ("O->O", "M->O", "ALL"):
        a, z = report.aggregate("imputation", kind), report.aggregate("zero", kind)
        print(f"{kind:5s} PSNR {a['psnr']:.2f} dB (zero fill {z['psnr']:.2f})  SSIM {100 * a['ssim']:.2f}%  "
              f"MAE {1000 * a['mae']:.2f}")
    return 0


def cmd_impute(args) -> int:
    if not args.stage1_checkpoint or not args.stage2_checkpoint:
        raise UsageError("impute requires --stage1-checkpoint and --stage2-checkpoint")
    model = load_models(args.stage1_checkpoint, args.stage2_checkpoint)
    names = _modality_names(model, [])
    if not names:
        raise IncompatibleCheckpoint("checkpoint does not record modality names")
    available = _parse_available(args.available, names)
    if all(available):
        raise UsageError("nothing to impute: every modality is declared available")
    if not any(available):
        raise UsageError("declare at least one available modality")
    src = Path(args.input)
    size = model.cfg.image_size
    images = np.zeros((len(names), size, size), dtype=np.float32)
    for m, name in enumerate(names):
        if not available[m]:
            continue
        p = src / f"{name}.png"
        if not p.is_file():
            raise DatasetError(f"declared-available modality {name} missing: {p}")
        arr = read_png16(p)
        if arr.shape != (size, size):
            raise DatasetError(f"{p} has shape {arr.shape}, model expects {(size, size)}")
        images[m] = from_u16(arr)
    out = _prepare_out(args)
    cfg = _load_cfg(args)
    _snapshot(out, cfg, args, net=to_dict(model.cfg))
    result = impute(ModalityStack(src.name, names, images), available, model, decode=args.decode)
    for m, name in enumerate(names):
        if available[m]:
            shutil.copyfile(src / f"{name}.png", out / f"{name}.png")
        else:
            _save_gray(result.images[m], out / f"{name}.png")
    made = [n for n, a in zip(names, available) if not a]
    print(f"synthesized {', '.join(made)} from {', '.join(n for n, a in zip(names, available) if a)} into {out}")
    return 0


def cmd_export_codes(args) -> int:
    if not args.stage1_checkpoint:
        raise UsageError("export-codes requires --stage1-checkpoint")
    cfg = _load_cfg(args)
    data = read_dataset(_data_path(args, cfg.stage1.dataset))
    out = _prepare_out(args)
    model = load_models(args.stage1_checkpoint, args.stage2_checkpoint)
    if model.cfg.quant_mode != "discrete":
        raise IncompatibleCheckpoint("code export needs a discrete (quantized) model")
    names = _modality_names(model, data.modality_names)
    L, d = model.cfg.levels, model.cfg.code_dim
    idx = data.splits[args.split]
    if not idx:
        raise UsageError(f"split {args.split!r} is empty")
    images = torch.from_numpy(np.ascontiguousarray(data.images[idx]))
    h = model.cfg.latent_size
    post = stage2_targets(model, images).to(torch.int64).numpy().reshape(len(idx), len(names), d, h, h)
    pred = None
    available = _parse_available(args.available or names[0], names)
    if args.stage2_checkpoint:
        if all(available):
            raise UsageError("--available must leave at least one modality missing")
        from .synthdata import mask_batch

        masked = mask_batch(images, torch.tensor([available] * len(idx)), model.cfg.indicators)
        with torch.no_grad():
            pred = model.predict_codes(masked).to(torch.int64).numpy().reshape(len(idx), len(names), d, h, h)
    _snapshot(out, cfg, args, net=to_dict(model.cfg))

    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    maps, acc = [], {n: [] for n in names}
    for s, i in enumerate(idx):
        sid = data.subject_ids[i]
        for m, name in enumerate(names):
            for kind, grid in (("posterior", post), ("prior", pred)):
                if grid is None:
                    continue
                codes = grid[s, m]
                Q.save_codes_json(codes, L, _mk(out / "codes" / sid) / f"{name}_{kind}.json")
                Q.save_code_heatmaps(codes, L, out / "heatmaps" / sid, f"{name}_{kind}")
                coh, base = code_map_coherence(codes), permuted_coherence(codes, rng)
                maps.append({
                    "subject": sid, "modality": name, "source": kind,
                    "coherence": coh, "permuted_baseline": base, "exceeds_baseline": coh > base,
                    "level_histogram": level_histogram(codes, L).tolist(),
                })
            if pred is not None:
                acc[name].append(float(np.all(pred[s, m] == post[s, m], axis=0).mean()))
    post_maps = [m for m in maps if m["source"] == "posterior"]
    summary = {
        "levels": L, "code_dim": d, "grid": [h, h],
        "available": [n for n, a in zip(names, available) if a] if pred is not None else None,
        "posterior_exceeds_baseline_fraction": float(np.mean([m["exceeds_baseline"] for m in post_maps])),
        "prediction_site_accuracy": {n: float(np.mean(v)) for n, v in acc.items()} if pred is not None else None,
        "maps": maps,
    }
    with open(out / "codes_summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    print(f"exported {len(maps)} code maps ({h}x{h}, d={d}); posterior maps above permuted baseline: "
          f"{100 * summary['posterior_exceeds_baseline_fraction']:.1f}%")
    if pred is not None:
        print("prior/posterior site agreement: " + ", ".join(f"{n} {v:.3f}" for n, v in summary["prediction_site_accuracy"].items()))
    return 0


def _mk(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (phantom/net/stage1/stage2 sections)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="seed override")
    common.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="codebrain", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="generate a phantom dataset")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="train stage 1 or stage 2")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True)
    s.add_argument("--data", help="dataset directory (overrides the config)")
    s.add_argument("--stage1-checkpoint", help="stage-1 checkpoint (required for stage 2)")
    s.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    s.add_argument("--epochs", type=int, help="epoch override")
    s.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="full scenario sweep on a split")
    s.add_argument("--data")
    s.add_argument("--stage1-checkpoint")
    s.add_argument("--stage2-checkpoint")
    s.add_argument("--split", default="test")
    s.add_argument("--decode", choices=("threshold", "expectation"), default="threshold")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("impute", parents=[common], help="complete one subject directory")
    s.add_argument("--input", required=True, help="directory with <modality>.png files")
    s.add_argument("--available", required=True, help="comma-separated available modalities, e.g. T1,T2")
    s.add_argument("--stage1-checkpoint")
    s.add_argument("--stage2-checkpoint")
    s.add_argument("--decode", choices=("threshold", "expectation"), default="threshold")
    s.set_defaults(func=cmd_impute)

    s = sub.add_parser("export-codes", parents=[common], help="export code maps and coherence statistics")
    s.add_argument("--data")
    s.add_argument("--stage1-checkpoint")
    s.add_argument("--stage2-checkpoint")
    s.add_argument("--split", default="test")
    s.add_argument("--available", help="available modalities for prior predictions (default: the first)")
    s.set_defaults(func=cmd_export_codes)
    return p


def main(argv=None) -> int:
    threads = os.environ.get("CODEBRAIN_THREADS")
    try:
        if threads:
            torch.set_num_threads(max(1, int(threads)))
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except (UsageError, ValueError, CheckpointError, DatasetError, IncompatibleCheckpoint, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - top-level runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
