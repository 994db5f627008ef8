import itertools
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from codebrain.config import PhantomConfig, TransferSpec
from codebrain.synthdata import (
    DatasetError, ModalityStack, ScenarioMask, apply_mask, apply_transfer, availability_patterns, edge_map,
    enumerate_scenarios, gen_subject, generate_dataset, iou, mask_batch, read_dataset, sample_scenario,
    split_by_hash, write_dataset,
)

SMALL = PhantomConfig(image_size=32, n_subjects=10, seed=5)


def test_gen_subject_deterministic_and_in_range():
    a, b = gen_subject(17, SMALL), gen_subject(17, SMALL)
    assert np.array_equal(a.images, b.images)
    assert a.images.shape == (3, 32, 32)
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert not np.array_equal(a.images, gen_subject(18, SMALL).images)


def test_identity_transfers_without_noise_are_identical():
    cfg = PhantomConfig(
        image_size=32, noise_std=0.0, transfer_jitter=0.0,
        transfers=(TransferSpec("identity"), TransferSpec("identity"), TransferSpec("power", 2.0)),
    )
    s = gen_subject(3, cfg)
    assert np.array_equal(s.images[0], s.images[1])
    assert not np.array_equal(s.images[0], s.images[2])


@pytest.mark.parametrize("spec", [TransferSpec("identity"), TransferSpec("power", 1.6), TransferSpec("rpower", 2.0),
                                  TransferSpec("inverse", 1.3), TransferSpec("logistic", 5.0)])
def test_transfers_strictly_monotone(spec):
    a = np.linspace(0, 1, 1001)
    out = apply_transfer(a, spec)
    d = np.diff(out)
    assert np.all(d > 0) or np.all(d < 0)
    assert out.min() >= 0 and out.max() <= 1


def test_bad_transfer_and_config():
    with pytest.raises(ValueError):
        TransferSpec("cubic", 1.0)
    with pytest.raises(ValueError):
        TransferSpec("power", 0.0)
    with pytest.raises(ValueError):
        PhantomConfig(n_modalities=1, modality_names=("T1",), transfers=(TransferSpec(),))
    with pytest.raises(ValueError):
        PhantomConfig(blob_count=(0, 3))
    with pytest.raises(ValueError):
        PhantomConfig(image_size=0)


def test_edge_maps_share_structure():
    # within-subject cross-modality IoU must beat the shuffled-subject baseline, on average and per pair
    cfg = PhantomConfig(image_size=64)
    stacks = [gen_subject(1000 + i, cfg) for i in range(100)]
    edges = [[edge_map(img) for img in s.images] for s in stacks]
    same, shuffled = [], []
    for i in range(100):
        for a, b in itertools.combinations(range(3), 2):
            same.append(iou(edges[i][a], edges[i][b]))
            shuffled.append(iou(edges[i][a], edges[(i + 1) % 100][b]))
    assert np.mean(same) > np.mean(shuffled) + 0.1
    assert np.mean(np.array(same) > np.array(shuffled)) > 0.95


def test_iou_edge_cases():
    z = np.zeros((4, 4), bool)
    assert iou(z, z) == 1.0
    o = np.ones((4, 4), bool)
    assert iou(o, z) == 0.0 and iou(o, o) == 1.0


# -- scenarios --------------------------------------------------------------


def test_sample_scenario_n2():
    rng = np.random.default_rng(0)
    for _ in range(100):
        m = sample_scenario(rng, 2)
        assert sum(m.available) == 1 and not m.available[m.anchor]


def test_sample_scenario_distribution_n3():
    rng = np.random.default_rng(1)
    counts = {}
    n = 60_000
    for _ in range(n):
        m = sample_scenario(rng, 3)
        assert not m.available[m.anchor]
        counts[m.available] = counts.get(m.available, 0) + 1
    assert len(counts) == 6
    for c in counts.values():
        assert abs(c / n - 1 / 6) < 0.02


def test_sample_scenario_rejects_n1():
    with pytest.raises(ValueError):
        sample_scenario(np.random.default_rng(0), 1)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2**31))
def test_mask_legality(n, seed):
    m = sample_scenario(np.random.default_rng(seed), n)
    k = n - sum(m.available)
    assert 0 < k < n
    assert m.anchor in m.missing


def test_scenario_mask_validation():
    with pytest.raises(ValueError):
        ScenarioMask((True, True, True), 0)
    with pytest.raises(ValueError):
        ScenarioMask((False, False, False), 0)
    with pytest.raises(ValueError):
        ScenarioMask((True, False, False), 0)
    m = ScenarioMask.from_available([1], 3)
    assert m.available == (False, True, False) and m.anchor in (0, 2)


def test_enumerate_scenarios_counts():
    s3 = enumerate_scenarios(3)
    assert len(availability_patterns(3)) == 6 and len(s3) == 9
    s4 = enumerate_scenarios(4)
    assert len(s4) == 28
    assert sum(1 for a, _ in s4 if len(a) == 1) == 12
    assert len(enumerate_scenarios(2)) == 2
    assert s3 == enumerate_scenarios(3)  # canonical, deterministic order
    assert s3[0] == ((0,), 1)


@pytest.mark.parametrize("n", range(2, 8))
def test_enumerate_scenarios_formula(n):
    pairs = enumerate_scenarios(n)
    assert len(availability_patterns(n)) == 2**n - 2
    assert len(pairs) == sum(math.comb(n, j) * (n - j) for j in range(1, n))
    assert len(set(pairs)) == len(pairs)


def test_apply_mask_example():
    a, b, c = (np.full((8, 8), v, np.float32) for v in (0.2, 0.5, 0.9))
    stack = ModalityStack("s", ("T1", "T2", "PD"), np.stack([a, b, c]))
    out = apply_mask(stack, ScenarioMask((False, True, False), 0))
    assert out.shape == (6, 8, 8)
    assert np.all(out[0] == 0) and np.all(out[2] == 0)
    assert np.array_equal(out[1], b)
    assert [out[3 + i, 0, 0] for i in range(3)] == [0, 1, 0]
    assert apply_mask(stack, ScenarioMask((False, True, False), 0), indicators=False).shape == (3, 8, 8)
    with pytest.raises(ValueError):
        apply_mask(stack, ScenarioMask((False, True), 0))


def test_mask_batch_shape_check():
    with pytest.raises(ValueError):
        mask_batch(torch.zeros(2, 3, 8, 8), torch.ones(2, 2, dtype=torch.bool))


# -- datasets ---------------------------------------------------------------


def test_dataset_determinism_and_split():
    a, b = generate_dataset(SMALL), generate_dataset(SMALL)
    assert np.array_equal(a.images, b.images)
    assert a.splits == b.splits
    d = PhantomConfig(n_subjects=250, image_size=16)
    splits = split_by_hash([f"sub-{i:04d}" for i in range(250)], d.split_fractions)
    assert [len(splits[k]) for k in ("train", "val", "test")] == [200, 25, 25]
    assert sorted(sum(splits.values(), [])) == list(range(250))


def test_write_read_roundtrip(tmp_path):
    ds = generate_dataset(SMALL)
    write_dataset(ds, tmp_path)
    back = read_dataset(tmp_path)
    assert np.abs(back.images - ds.images).max() <= 2**-16
    assert back.subject_ids == ds.subject_ids and back.splits == ds.splits
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    pngs = list(tmp_path.glob("*/*.png"))
    assert len(manifest["subjects"]) == len(pngs) / 3


def test_unquantized_roundtrip_bound(tmp_path):
    # gen_subject output is not on the 16-bit grid; writing it must still stay within 2^-16
    ds = generate_dataset(SMALL)
    ds.images = np.stack([gen_subject(i, SMALL).images for i in range(SMALL.n_subjects)])
    write_dataset(ds, tmp_path)
    assert np.abs(read_dataset(tmp_path).images - ds.images).max() <= 2**-16


def test_read_errors_name_the_file(tmp_path):
    ds = generate_dataset(SMALL)
    write_dataset(ds, tmp_path)
    sid = ds.subject_ids[3]
    (tmp_path / sid / "T2.png").unlink()
    with pytest.raises(DatasetError, match=f"{sid}.*T2"):
        read_dataset(tmp_path)
    (tmp_path / sid / "T2.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError, match=f"{sid}.*T2"):
        read_dataset(tmp_path)


def test_read_rejects_bad_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        read_dataset(tmp_path)
    write_dataset(generate_dataset(SMALL), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["config"]["noise_std"] = 0.5
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DatasetError, match="hash"):
        read_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text("{")
    with pytest.raises(DatasetError, match="corrupt"):
        read_dataset(tmp_path)
