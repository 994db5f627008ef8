import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from codebrain.metrics import (
    PSNR_CAP, code_map_coherence, evaluate, level_histogram, mae, permuted_coherence, psnr, ssim,
)
from codebrain.synthdata import enumerate_scenarios

images = arrays(np.float64, (16, 16), elements=st.floats(0, 1))


def test_psnr_examples():
    x = np.random.default_rng(0).random((16, 16))
    assert psnr(x, x) == PSNR_CAP == 100.0
    assert psnr(np.full((8, 8), 0.3), np.full((8, 8), 0.4)) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ValueError):
        psnr(x, x[:4])


def test_psnr_monotone_in_noise():
    rng = np.random.default_rng(1)
    x = rng.random((32, 32))
    u = rng.uniform(-1, 1, x.shape)
    vals = [psnr(x, x + a * u) for a in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_mae_examples():
    assert mae(np.ones((4, 4)), np.ones((4, 4))) == 0
    assert mae(np.full((4, 4), 0.5), np.full((4, 4), 0.55)) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        mae(np.ones(3), np.ones(4))


def test_ssim_constant_images_closed_form():
    c1, c2 = 0.01**2, 0.03**2
    expect = (2 * 0 * 1 + c1) * (0 + c2) / ((0 + 1 + c1) * (0 + 0 + c2))
    assert ssim(np.zeros((16, 16)), np.ones((16, 16))) == pytest.approx(expect, rel=1e-9)
    assert expect == pytest.approx(9.999e-5, rel=1e-3)


def test_ssim_matches_skimage():
    skm = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(2)
    for _ in range(5):
        x = rng.random((40, 33))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        ref = skm.structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                        use_sample_covariance=False)
        assert ssim(x, y) == pytest.approx(ref, abs=1e-10)


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(ValueError):
        ssim(np.zeros((2, 16, 16)), np.zeros((2, 16, 16)))


@settings(max_examples=40, deadline=None)
@given(images, images)
def test_symmetry(x, y):
    assert psnr(x, y) == psnr(y, x)
    assert mae(x, y) == mae(y, x)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(images)
def test_identities(x):
    assert psnr(x, x) == 100.0
    assert ssim(x, x) == 1.0
    assert mae(x, x) == 0.0


@settings(max_examples=40, deadline=None)
@given(images, images, images)
def test_mae_triangle(x, y, z):
    assert mae(x, z) <= mae(x, y) + mae(y, z) + 1e-12


def test_coherence_examples():
    assert code_map_coherence(np.zeros((4, 6, 6), int)) == 1.0
    checker = (np.indices((6, 6)).sum(0) % 2)[None]
    assert code_map_coherence(checker) == 0.0
    two = np.stack([np.zeros((6, 6), int), checker[0]])  # one dimension constant, other alternates
    assert code_map_coherence(two) == 0.0
    with pytest.raises(ValueError):
        code_map_coherence(np.zeros((2, 1, 5)))


def test_coherence_blocky_beats_permuted():
    codes = np.zeros((2, 8, 8), int)
    codes[:, :4] = 1
    codes[0, :, :4] -= 2
    rng = np.random.default_rng(0)
    assert code_map_coherence(codes) > permuted_coherence(codes, rng) + 0.3


def test_level_histogram_counts():
    codes = np.random.default_rng(0).integers(-2, 3, size=(4, 8, 8))
    h = level_histogram(codes, 5)
    assert h.shape == (4, 5)
    assert np.all(h.sum(1) == 64)
    assert h[1, 2] == np.sum(codes[1] == 0)


def test_evaluate_report(tiny_run, tiny_data):
    rep = evaluate(tiny_data, tiny_run["stage2"])
    n_test = len(tiny_data.splits["test"])
    assert rep.scenarios == enumerate_scenarios(3)
    assert set(rep.values) == {"imputation", "reconstruction", "zero"}
    assert rep.values["zero"].shape == (9, n_test, 3)
    # zero imputation PSNR equals 10 log10(1 / E[x^2]) per subject
    truth = tiny_data.images[tiny_data.splits["test"]].astype(np.float64)
    for i, (_, t) in enumerate(rep.scenarios):
        expect = 10 * np.log10(1 / np.mean(truth[:, t] ** 2, axis=(1, 2)))
        np.testing.assert_allclose(rep.values["zero"][i, :, 0], expect, rtol=1e-12)
    # pair-count-weighted recombination of the group means
    for m in rep.values:
        oo, mo, al = (rep.aggregate(m, k)["psnr"] for k in ("O->O", "M->O", "ALL"))
        assert al == pytest.approx((6 * oo + 3 * mo) / 9, rel=1e-12)


def test_evaluate_does_not_read_missing_target(tiny_run, tiny_data):
    # scrambling every masked channel must not change the imputations
    from codebrain.training import impute_batch
    import torch

    idx = tiny_data.splits["test"]
    x = torch.from_numpy(np.ascontiguousarray(tiny_data.images[idx]))
    y = x.clone()
    y[:, 1:] = torch.rand_like(y[:, 1:])
    a = impute_batch(tiny_run["stage2"], x, (True, False, False))
    b = impute_batch(tiny_run["stage2"], y, (True, False, False))
    for k in a:
        assert torch.equal(a[k], b[k])


def test_evaluate_empty_split(tiny_run, tiny_data):
    import dataclasses

    empty = dataclasses.replace(tiny_data, splits={**tiny_data.splits, "test": []})
    with pytest.raises(ValueError, match="empty"):
        evaluate(empty, tiny_run["stage2"])


def test_report_files(tiny_run, tiny_data, tmp_path):
    import csv
    import json

    rep = evaluate(tiny_data, tiny_run["stage2"], methods=("imputation", "zero"))
    rep.write(tmp_path)
    d = json.loads((tmp_path / "metrics.json").read_text())
    assert len(d["cells"]) == 9 and d["n_patterns"] == 6
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert rows[0][:2] == ["method", "available"]
    assert sum(1 for r in rows if r[0] == "zero" and not r[1].startswith("mean")) == 6
    t1_only = next(r for r in rows if r[0] == "imputation" and r[1] == "T1")
    assert t1_only[2:5] == ["N/A"] * 3
