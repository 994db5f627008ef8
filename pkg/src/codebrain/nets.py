"""Encoders, decoder, patch discriminator and the stage-1 losses.

All five networks are shared across modalities: the anchor's identity reaches the
decoder only through its code grid, and the source/prior encoders see which
channels are present only through the availability indicator planes.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import quantizer as Q
from .config import NetConfig

PSNR_EPS = 1e-8


def _groups(ch: int) -> int:
    return 4 if ch % 4 == 0 else 1


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch), ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(ch), ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class Encoder(nn.Module):
    """Three stride-2 stages (x8 downsampling) followed by a 1x1 projection."""

    def __init__(self, in_ch: int, out_ch: int, width: int, n_blocks: int = 1):
        super().__init__()
        widths = [width, 2 * width, 4 * width, 4 * width]
        self.stem = nn.Conv2d(in_ch, widths[0], 3, padding=1)
        layers = []
        for i in range(3):
            layers.append(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1))
            layers.extend(ResBlock(widths[i + 1]) for _ in range(n_blocks))
        self.body = nn.Sequential(*layers)
        self.norm = nn.GroupNorm(_groups(widths[-1]), widths[-1])
        self.head = nn.Conv2d(widths[-1], out_ch, 1)

    def forward(self, x):
        return self.head(F.silu(self.norm(self.body(self.stem(x)))))


class Decoder(nn.Module):
    """Mirror of the encoder with nearest-neighbour upsampling and a sigmoid output."""

    def __init__(self, in_ch: int, width: int, n_blocks: int = 1):
        super().__init__()
        widths = [4 * width, 4 * width, 2 * width, width]
        self.stem = nn.Conv2d(in_ch, widths[0], 3, padding=1)
        layers = []
        for i in range(3):
            layers.extend(ResBlock(widths[i]) for _ in range(n_blocks))
            layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
            layers.append(nn.Conv2d(widths[i], widths[i + 1], 3, padding=1))
        self.body = nn.Sequential(*layers)
        self.norm = nn.GroupNorm(_groups(widths[-1]), widths[-1])
        self.head = nn.Conv2d(widths[-1], 1, 3, padding=1)

    def forward(self, x):
        return torch.sigmoid(self.head(F.silu(self.norm(self.body(self.stem(x))))))


class PatchDiscriminator(nn.Module):
    """Three-layer least-squares PatchGAN over single-channel images."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
            nn.GroupNorm(_groups(2 * width), 2 * width),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 4, stride=1, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class PriorEncoder(nn.Module):
    """Predicts every modality's code from a masked stack.

    The grading head emits one code-scale score ``s`` per code scalar and turns it
    into (L-1) ordinal logits ``scale * (s - t_j)``, where ``t_j = j - L//2 + 1/2``
    are the rounding boundaries between levels; counting positive logits then
    equals rounding ``s``. The cls head emits L free logits, the regression head
    a single value.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        per_scalar = cfg.levels if cfg.prior_head == "cls" else 1
        self.body = Encoder(cfg.input_channels, per_scalar * cfg.n_modalities * cfg.code_dim, cfg.base_width, cfg.n_blocks)
        if cfg.prior_head == "grading":
            self.log_scale = nn.Parameter(torch.tensor(math.log(2.0)))
            half = cfg.levels // 2
            self.register_buffer("thresholds", torch.arange(cfg.levels - 1) - half + 0.5, persistent=False)

    def reset_parameters(self):
        if self.cfg.prior_head == "grading":
            with torch.no_grad():
                self.log_scale.fill_(math.log(2.0))

    def forward(self, masked):
        out = self.body(masked)
        b, _, h, w = out.shape
        c = self.cfg.n_modalities * self.cfg.code_dim
        if self.cfg.prior_head != "grading":
            return out.view(b, -1, c, h, w)
        score = out.view(b, 1, c, h, w)
        t = self.thresholds.to(out.dtype).view(1, -1, 1, 1, 1)
        return self.log_scale.exp() * (score - t)


class CodeBrain(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        n, d = cfg.n_modalities, cfg.code_dim
        self.posterior = Encoder(1, d, cfg.base_width, cfg.n_blocks)
        self.source = Encoder(cfg.input_channels, cfg.common_channels, cfg.base_width, cfg.n_blocks)
        self.prior = PriorEncoder(cfg)
        self.decoder = Decoder(d + cfg.common_channels, cfg.base_width, cfg.n_blocks)
        self.discriminator = PatchDiscriminator(cfg.disc_width)

    STAGE1 = ("posterior", "source", "decoder")

    def stage1_parameters(self):
        return [p for name in self.STAGE1 for p in getattr(self, name).parameters()]

    def _check_image(self, x, channels, what):
        s = self.cfg.image_size
        if x.dim() != 4 or x.shape[1] != channels or x.shape[2:] != (s, s):
            raise ValueError(f"{what}: expected (B, {channels}, {s}, {s}), got {tuple(x.shape)}")

    def forward_posterior(self, anchor: torch.Tensor) -> torch.Tensor:
        self._check_image(anchor, 1, "posterior input")
        return self.posterior(anchor)

    def latent(self, features: torch.Tensor, offset: torch.Tensor | None = None):
        """Bounded latent and the code fed to the decoder (STE-rounded unless continuous)."""
        z = Q.bound(features, self.cfg.levels)
        if self.cfg.quant_mode == "continuous":
            return z, z
        return z, Q.quantize(z, offset)

    def forward_source(self, masked: torch.Tensor) -> torch.Tensor:
        self._check_image(masked, self.cfg.input_channels, "source input")
        return self.source(masked)

    def forward_decoder(self, code: torch.Tensor, common: torch.Tensor) -> torch.Tensor:
        if code.shape[0] != common.shape[0] or code.shape[2:] != common.shape[2:]:
            raise ValueError(f"code {tuple(code.shape)} and common features {tuple(common.shape)} are not aligned")
        h = self.cfg.latent_size
        if code.shape[1] != self.cfg.code_dim or code.shape[2:] != (h, h):
            raise ValueError(f"code must be (B, {self.cfg.code_dim}, {h}, {h}), got {tuple(code.shape)}")
        return self.decoder(torch.cat([code.to(common.dtype), common], dim=1))

    def forward_prior(self, masked: torch.Tensor) -> torch.Tensor:
        """Per-scalar head outputs, shaped (B, K, N*d, h, w)."""
        self._check_image(masked, self.cfg.input_channels, "prior input")
        return self.prior(masked)

    def reconstruct(self, anchor, masked, offset=None):
        """Stage-1 path: returns (reconstruction, bounded latent, decoder code)."""
        z, code = self.latent(self.forward_posterior(anchor), offset)
        return self.forward_decoder(code, self.forward_source(masked)), z, code

    def predict_codes(self, masked: torch.Tensor, decode: str = "threshold") -> torch.Tensor:
        """Full-modality codes (B, N*d, h, w) from the prior head; real-valued when continuous."""
        out = self.forward_prior(masked)
        L = self.cfg.levels
        if self.cfg.prior_head == "grading":
            return Q.decode_logits(out, L, decode).to(out.dtype)
        if self.cfg.prior_head == "cls":
            return Q.decode_classes(out, L).to(out.dtype)
        return regression_output(out, L)

    def code_slice(self, codes: torch.Tensor, modality: int) -> torch.Tensor:
        d = self.cfg.code_dim
        return codes[:, modality * d:(modality + 1) * d]


def regression_output(out: torch.Tensor, levels: int) -> torch.Tensor:
    return Q.bound(out[:, 0], levels)


def build_model(cfg: NetConfig, seed: int) -> CodeBrain:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return CodeBrain(cfg)


def reinit_module(module: nn.Module, seed: int) -> None:
    with torch.random.fork_rng(devices=[]), torch.no_grad():
        torch.manual_seed(seed)
        for m in module.modules():
            if hasattr(m, "reset_parameters"):
                m.reset_parameters()


# ---------------------------------------------------------------------------
# losses


def psnr_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = PSNR_EPS) -> torch.Tensor:
    """Negated PSNR (dB) for minimization: 10*log10(max(MSE, eps)), averaged over the batch.

    The floor (rather than adding eps) keeps the loss exact wherever MSE > eps,
    i.e. below 80 dB; identical images give 10*log10(eps) = -80.
    """
    if pred.shape != target.shape:
        raise ValueError(f"psnr_loss shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.dim() <= 3:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    mse = ((pred - target) ** 2).flatten(1).mean(dim=1)
    return (10.0 / math.log(10.0)) * torch.log(mse.clamp_min(eps)).mean()


def lsgan_generator_loss(d_fake: torch.Tensor) -> torch.Tensor:
    return ((d_fake - 1.0) ** 2).mean()


def lsgan_discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    return 0.5 * (((d_real - 1.0) ** 2).mean() + (d_fake**2).mean())


def gan_loss(pred: torch.Tensor, target: torch.Tensor, disc: nn.Module):
    """(generator loss, discriminator loss). The discriminator term sees a detached fake."""
    if pred.shape != target.shape or pred.dim() != 4 or pred.shape[1] != 1:
        raise ValueError(f"gan_loss expects matching (B, 1, H, W) images, got {tuple(pred.shape)}, {tuple(target.shape)}")
    g = lsgan_generator_loss(disc(pred))
    d = lsgan_discriminator_loss(disc(target), disc(pred.detach()))
    return g, d


def stage1_loss(model: CodeBrain, anchor, masked, gan_weight: float, offset=None):
    """Total reconstruction objective and its parts; the GAN term is skipped when its weight is 0."""
    pred, z, _ = model.reconstruct(anchor, masked, offset)
    l_psnr = psnr_loss(pred, anchor)
    if gan_weight == 0:
        return l_psnr, l_psnr, None, pred, z
    l_gan = lsgan_generator_loss(model.discriminator(pred))
    return l_psnr + gan_weight * l_gan, l_psnr, l_gan, pred, z


def stage2_loss(model: CodeBrain, masked, targets):
    """Prior objective against frozen stage-1 targets (codes, or bounded latents when continuous)."""
    out = model.forward_prior(masked)
    L = model.cfg.levels
    if model.cfg.prior_head == "grading":
        return Q.grading_loss(out, targets, L)
    if model.cfg.prior_head == "cls":
        return Q.class_loss(out, targets, L)
    return F.mse_loss(regression_output(out, L), targets.to(out.dtype))
