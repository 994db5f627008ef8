import math

import pytest
import torch
import torch.nn as nn

from codebrain import quantizer as Q
from codebrain.config import NetConfig
from codebrain.nets import (
    CodeBrain, PatchDiscriminator, build_model, gan_loss, lsgan_discriminator_loss, lsgan_generator_loss,
    psnr_loss, reinit_module, stage1_loss, stage2_loss,
)
from codebrain.synthdata import mask_batch

from conftest import TINY_NET


@pytest.fixture(scope="module")
def model():
    return build_model(TINY_NET, seed=0)


def inputs(cfg, batch=2, seed=0, avail=(True, False, True)):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(batch, cfg.n_modalities, cfg.image_size, cfg.image_size, generator=g)
    masked = mask_batch(x, torch.tensor([avail] * batch), cfg.indicators)
    return x, masked


def test_shapes(model):
    cfg = model.cfg
    x, masked = inputs(cfg)
    h = cfg.image_size // 8
    f = model.forward_posterior(x[:, :1])
    assert f.shape == (2, cfg.code_dim, h, h)
    fc = model.forward_source(masked)
    assert fc.shape == (2, cfg.common_channels, h, h)
    _, code = model.latent(f)
    out = model.forward_decoder(code, fc)
    assert out.shape == x[:, :1].shape
    assert out.min() >= 0 and out.max() <= 1
    prior = model.forward_prior(masked)
    assert prior.shape == (2, cfg.levels - 1, cfg.n_modalities * cfg.code_dim, h, h)
    codes = Q.decode_logits(prior, cfg.levels)
    assert codes.abs().max() <= cfg.levels // 2
    assert torch.isfinite(Q.grading_loss(prior, codes, cfg.levels))


@pytest.mark.parametrize("size,d,cf", [(16, 1, 4), (32, 3, 8), (48, 2, 5)])
def test_shape_algebra(size, d, cf):
    cfg = NetConfig(image_size=size, code_dim=d, common_channels=cf, base_width=4)
    m = build_model(cfg, 1)
    x, masked = inputs(cfg, batch=3)
    pred, z, code = m.reconstruct(x[:, 1:2], masked)
    assert pred.shape == x[:, 1:2].shape
    assert z.shape == code.shape == (3, d, size // 8, size // 8)


def test_shape_errors(model):
    cfg = model.cfg
    x, masked = inputs(cfg)
    with pytest.raises(ValueError):
        model.forward_posterior(x[:, :2])
    with pytest.raises(ValueError):
        model.forward_posterior(torch.zeros(1, 1, 24, 24))
    with pytest.raises(ValueError):
        model.forward_source(x)  # missing indicator planes
    with pytest.raises(ValueError):
        model.forward_prior(x)
    h = cfg.latent_size
    with pytest.raises(ValueError, match="aligned"):
        model.forward_decoder(torch.zeros(2, cfg.code_dim, h, h), torch.zeros(2, cfg.common_channels, h + 1, h))
    with pytest.raises(ValueError):
        model.forward_decoder(torch.zeros(2, cfg.code_dim + 1, h, h), torch.zeros(2, cfg.common_channels, h, h))


def test_zero_final_layer_gives_zero_codes():
    m = build_model(TINY_NET, 0)
    nn.init.zeros_(m.posterior.head.weight)
    nn.init.zeros_(m.posterior.head.bias)
    x, _ = inputs(m.cfg)
    f = m.forward_posterior(x[:, :1])
    assert torch.all(f == 0)
    assert torch.all(Q.to_codes(Q.bound(f, 5)) == 0)


def test_masked_channels_do_not_reach_source_without_indicators():
    cfg = NetConfig(image_size=32, base_width=4, common_channels=8, indicators=False)
    m = build_model(cfg, 0)
    x, _ = inputs(cfg)
    avail = torch.tensor([[True, False, True]] * 2)
    y = x.clone()
    y[:, 1] = torch.rand_like(y[:, 1])  # change only the masked channel
    a = m.forward_source(mask_batch(x, avail, False))
    b = m.forward_source(mask_batch(y, avail, False))
    assert torch.equal(a, b)


def test_indicator_weights_zero_means_no_indicator_effect():
    m = build_model(TINY_NET, 0)
    with torch.no_grad():
        m.source.stem.weight[:, 3:] = 0
    x, masked = inputs(m.cfg)
    stripped = masked.clone()
    stripped[:, 3:] = 0
    assert torch.equal(m.source.stem(masked), m.source.stem(stripped))


def test_zero_input_finite(model):
    cfg = model.cfg
    z = torch.zeros(1, cfg.input_channels, cfg.image_size, cfg.image_size)
    assert torch.isfinite(model.forward_source(z)).all()
    assert torch.isfinite(model.forward_prior(z)).all()


def test_different_masks_give_different_common_features(model):
    x, m1 = inputs(model.cfg, avail=(True, False, False))
    _, m2 = inputs(model.cfg, avail=(False, True, True))
    assert (model.forward_source(m1) - model.forward_source(m2)).abs().max() > 0


def test_modality_agnostic_registry(model):
    # one set of weights: no parameter is indexed by modality, and input widths depend only on N via the stack
    for name, p in model.named_parameters():
        assert not any(tag in name for tag in ("T1", "T2", "PD"))
    assert model.posterior.stem.weight.shape[1] == 1
    assert set(dict(model.named_children())) == {"posterior", "source", "prior", "decoder", "discriminator"}


def test_gradient_reaches_code_and_common_paths():
    m = build_model(TINY_NET, 0)
    x, masked = inputs(m.cfg)
    f = m.forward_posterior(x[:, :1])
    f.retain_grad()
    fc = m.forward_source(masked)
    fc.retain_grad()
    _, code = m.latent(f)
    out = m.forward_decoder(code, fc)
    ((out - x[:, :1]) ** 2).mean().backward()
    assert f.grad.norm() > 0 and fc.grad.norm() > 0


def test_psnr_loss_examples():
    a = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    assert psnr_loss(a, a).item() == pytest.approx(-80.0, abs=1e-9)
    b = torch.full((1, 1, 8, 8), 0.3, dtype=torch.float64)
    assert psnr_loss(b + 0.1, b).item() == pytest.approx(-20.0, abs=1e-12)
    assert psnr_loss(b + 1e-5, b).item() == pytest.approx(-80.0, abs=1e-9)  # below the floor
    losses = [psnr_loss(b + e, b).item() for e in (0.01, 0.05, 0.1, 0.2)]
    assert losses == sorted(losses) and len(set(losses)) == 4
    with pytest.raises(ValueError):
        psnr_loss(a, b)


def test_gan_losses():
    half = torch.full((2, 1, 4, 4), 0.5)
    assert lsgan_generator_loss(half).item() == pytest.approx(0.25)
    assert lsgan_discriminator_loss(torch.ones(3), torch.zeros(3)).item() == 0.0
    disc = PatchDiscriminator(8)
    x = torch.rand(2, 1, 32, 32)
    g, d = gan_loss(x, torch.rand(2, 1, 32, 32), disc)
    assert torch.isfinite(g) and torch.isfinite(d)
    with pytest.raises(ValueError):
        gan_loss(x, x[:1], disc)


def test_lambda_zero_is_pure_psnr(model):
    x, masked = inputs(model.cfg)
    total, l_psnr, l_gan, pred, _ = stage1_loss(model, x[:, 1:2], masked, 0.0)
    assert l_gan is None
    assert torch.equal(total, psnr_loss(pred, x[:, 1:2]))
    total1, l_psnr1, l_gan1, _, _ = stage1_loss(model, x[:, 1:2], masked, 1.0)
    torch.testing.assert_close(total1, l_psnr1 + l_gan1)


def test_stage2_loss_heads():
    for head, quant in (("grading", "discrete"), ("cls", "discrete"), ("regression", "continuous")):
        cfg = NetConfig(image_size=32, base_width=4, common_channels=8, prior_head=head, quant_mode=quant)
        m = build_model(cfg, 0)
        _, masked = inputs(cfg)
        h = cfg.latent_size
        targets = torch.randint(-2, 3, (2, cfg.n_modalities * cfg.code_dim, h, h))
        loss = stage2_loss(m, masked, targets)
        loss.backward()
        assert torch.isfinite(loss) and loss.item() >= 0
        assert m.forward_prior(masked).shape[1] == cfg.head_size
        codes = m.predict_codes(masked)
        assert codes.shape == targets.shape


def test_grading_head_decode_equals_rounding_score():
    m = build_model(TINY_NET, 0)
    _, masked = inputs(m.cfg)
    score = m.prior.body(masked)
    logits = m.forward_prior(masked)
    b, _, h, w = score.shape
    expect = Q.round_half_away(score.clamp(-2, 2)).view(b, -1, h, w)
    # ties are measure-zero for random weights
    assert torch.equal(Q.decode_logits(logits, 5), expect.to(torch.int64))


def test_build_model_seeded_and_rng_isolated():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = build_model(TINY_NET, 7)
    after = torch.rand(1)
    assert torch.equal(before, after)  # global stream untouched
    b = build_model(TINY_NET, 7)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_reinit_module_resets_log_scale():
    m = build_model(TINY_NET, 0)
    with torch.no_grad():
        m.prior.log_scale.fill_(3.0)
    reinit_module(m.prior, 1)
    assert m.prior.log_scale.item() == pytest.approx(math.log(2.0))


def test_net_config_validation():
    with pytest.raises(ValueError):
        NetConfig(image_size=30)
    with pytest.raises(ValueError):
        NetConfig(levels=4)
    with pytest.raises(ValueError):
        NetConfig(quant_mode="continuous")  # needs the regression head
    with pytest.raises(ValueError):
        NetConfig(prior_head="regression")
    assert NetConfig(prior_head="cls").head_size == 5
    assert NetConfig().latent_size == 8
