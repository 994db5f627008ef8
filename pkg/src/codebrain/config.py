"""Dataclass configs for phantoms, networks and training, plus JSON (de)serialization."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass(frozen=True)
class TransferSpec:
    """Monotone contrast transfer from the anatomy map to one modality.

    kind is one of identity, power, rpower, inverse, logistic; ``param`` is the
    shape parameter (ignored for identity).
    """

    kind: str = "identity"
    param: float = 1.0

    def __post_init__(self):
        if self.kind not in TRANSFER_KINDS:
            raise ValueError(f"unknown transfer kind {self.kind!r}; expected one of {TRANSFER_KINDS}")
        if self.kind != "identity" and not self.param > 0:
            raise ValueError(f"transfer param must be > 0, got {self.param}")


TRANSFER_KINDS = ("identity", "power", "rpower", "inverse", "logistic")

DEFAULT_TRANSFERS = (
    TransferSpec("power", 1.6),
    TransferSpec("inverse", 1.3),
    TransferSpec("logistic", 5.0),
)


@dataclass(frozen=True)
class PhantomConfig:
    n_modalities: int = 3
    modality_names: tuple[str, ...] = ("T1", "T2", "PD")
    image_size: int = 64
    n_subjects: int = 250
    blob_count: tuple[int, int] = (4, 9)
    transfers: tuple[TransferSpec, ...] = DEFAULT_TRANSFERS
    # per-subject, per-modality log-uniform jitter of the transfer shape parameter
    transfer_jitter: float = 0.25
    gain_range: tuple[float, float] = (0.8, 1.0)
    gamma_range: tuple[float, float] = (0.85, 1.15)
    bias_amplitude: tuple[float, float] = (0.0, 0.15)
    noise_std: float = 0.015
    seed: int = 1234
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.n_modalities < 2:
            raise ValueError(f"n_modalities must be >= 2 for imputation, got {self.n_modalities}")
        if len(self.modality_names) != self.n_modalities:
            raise ValueError("modality_names must have n_modalities entries")
        if len(set(self.modality_names)) != self.n_modalities:
            raise ValueError("modality_names must be unique")
        if len(self.transfers) != self.n_modalities:
            raise ValueError("transfers must have n_modalities entries")
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        lo, hi = self.blob_count
        if lo < 1 or hi < lo:
            raise ValueError(f"blob_count must satisfy 1 <= lo <= hi, got {self.blob_count}")
        for name in ("gain_range", "gamma_range", "bias_amplitude"):
            a, b = getattr(self, name)
            if b < a:
                raise ValueError(f"{name} must be (low, high), got {(a, b)}")
        if self.gain_range[0] <= 0 or self.gamma_range[0] <= 0 or self.bias_amplitude[0] < 0:
            raise ValueError("gain and gamma must be positive, bias amplitude non-negative")
        if self.noise_std < 0 or self.transfer_jitter < 0:
            raise ValueError("noise_std and transfer_jitter must be non-negative")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise ValueError(f"split_fractions must be non-negative and sum to 1, got {self.split_fractions}")


@dataclass(frozen=True)
class NetConfig:
    n_modalities: int = 3
    image_size: int = 64
    code_dim: int = 4
    levels: int = 5
    common_channels: int = 32
    base_width: int = 8
    n_blocks: int = 1
    disc_width: int = 16
    indicators: bool = True
    # "discrete" (scalar quantization) or "continuous" (ablation: no rounding)
    quant_mode: str = "discrete"
    # stage-2 head: "grading" ((L-1) ordinal logits), "cls" (L-way softmax), "regression"
    prior_head: str = "grading"

    def __post_init__(self):
        if self.n_modalities < 2:
            raise ValueError("n_modalities must be >= 2")
        if self.image_size % 8 or self.image_size < 8:
            raise ValueError(f"image_size must be a positive multiple of 8, got {self.image_size}")
        if self.levels < 3 or self.levels % 2 == 0:
            raise ValueError(f"levels must be odd and >= 3, got {self.levels}")
        if self.code_dim < 1 or self.common_channels < 1:
            raise ValueError("code_dim and common_channels must be >= 1")
        if self.base_width < 4 or self.base_width % 4:
            raise ValueError("base_width must be a multiple of 4")
        if self.quant_mode not in ("discrete", "continuous"):
            raise ValueError(f"quant_mode must be discrete or continuous, got {self.quant_mode!r}")
        if self.prior_head not in ("grading", "cls", "regression"):
            raise ValueError(f"unknown prior_head {self.prior_head!r}")
        if (self.quant_mode == "continuous") != (self.prior_head == "regression"):
            raise ValueError("the regression head is used exactly when quant_mode is continuous")

    @property
    def latent_size(self) -> int:
        return self.image_size // 8

    @property
    def input_channels(self) -> int:
        return 2 * self.n_modalities if self.indicators else self.n_modalities

    @property
    def head_size(self) -> int:
        """Size of the per-scalar axis of the prior output."""
        return {"grading": self.levels - 1, "cls": self.levels, "regression": 1}[self.prior_head]


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-3
    min_lr: float = 1e-5
    gan_weight: float = 1.0
    seed: int = 1234
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    dataset: str | None = None
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if not self.lr > self.min_lr > 0:
            raise ValueError(f"need lr > min_lr > 0, got lr={self.lr}, min_lr={self.min_lr}")
        if self.gan_weight < 0:
            raise ValueError("gan_weight must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    net: NetConfig = field(default_factory=NetConfig)
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(stage=1))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(stage=2))

    def __post_init__(self):
        if self.net.n_modalities != self.phantom.n_modalities:
            raise ValueError("net.n_modalities must equal phantom.n_modalities")
        if self.net.image_size != self.phantom.image_size:
            raise ValueError("net.image_size must equal phantom.image_size")
        if self.stage1.stage != 1 or self.stage2.stage != 2:
            raise ValueError("stage1/stage2 sections must carry stage 1/2")


def to_dict(cfg) -> dict[str, Any]:
    return _jsonable(dataclasses.asdict(cfg))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def _build(cls, data: dict | None):
    if data is None:
        return cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if cls is PhantomConfig and k == "transfers":
            v = tuple(t if isinstance(t, TransferSpec) else TransferSpec(**t) for t in v)
        kwargs[k] = _tuplify(v)
    return cls(**kwargs)


def phantom_from_dict(d: dict | None) -> PhantomConfig:
    return _build(PhantomConfig, d)


def net_from_dict(d: dict | None) -> NetConfig:
    return _build(NetConfig, d)


def train_from_dict(d: dict | None, stage: int) -> TrainConfig:
    d = dict(d or {})
    d.setdefault("stage", stage)
    return _build(TrainConfig, d)


def experiment_from_dict(d: dict) -> ExperimentConfig:
    unknown = set(d) - {"phantom", "net", "stage1", "stage2"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    phantom = phantom_from_dict(d.get("phantom"))
    net = d.get("net") or {}
    # net geometry follows the phantom unless overridden
    net = {"n_modalities": phantom.n_modalities, "image_size": phantom.image_size, **net}
    return ExperimentConfig(
        phantom=phantom,
        net=net_from_dict(net),
        stage1=train_from_dict(d.get("stage1"), 1),
        stage2=train_from_dict(d.get("stage2"), 2),
    )


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as f:
        return experiment_from_dict(json.load(f))


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(to_dict(cfg), f, indent=2, sort_keys=True)
