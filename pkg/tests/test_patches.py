import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ct2pet.districts import DistrictBundle, PartitionError
from ct2pet.patches import (
    CoverageError,
    PatchSampler,
    PatchSizeError,
    SamplingError,
    assemble,
    axis_starts,
    cut_patches,
    pad_to_min,
    patch_grid,
    sample_training_patches,
    stitch,
    unpad,
)
from ct2pet.volume import BinaryMask, Volume


def bundle(mask, seed=0):
    rng = np.random.default_rng(seed)
    ct = np.where(mask, rng.random(mask.shape), 0).astype(np.float32)
    return DistrictBundle(2, Volume(ct), BinaryMask(mask, 2), Volume(0.5 * ct))


def test_grid_examples():
    g = patch_grid((32, 32, 32))
    assert g.starts == [(0, 0, 0)]
    g = patch_grid((64, 64, 64))
    assert g.axis_starts == ((0, 16, 32),) * 3 and len(g) == 27
    g = patch_grid((40, 40, 40))
    assert g.axis_starts == ((0, 8),) * 3 and len(g) == 8


def test_grid_too_small():
    with pytest.raises(PatchSizeError, match="pad"):
        patch_grid((31, 40, 40))


@given(st.integers(4, 200), st.integers(2, 40), st.data())
def test_axis_coverage(n, s, data):
    s = min(s, n)
    o = data.draw(st.integers(1, s - 1)) if s > 1 else None
    if o is None:
        return
    starts = axis_starts(n, s, o)
    covered = np.zeros(n, int)
    for a in starts:
        assert a + s <= n
        covered[a:a + s] += 1
    assert covered.min() >= 1
    assert len(starts) <= math.ceil((n - s) / (s - o)) + 1
    assert starts == sorted(set(starts))


def test_stitch_examples():
    v = np.random.default_rng(0).random((4, 4, 4)).astype(np.float32)
    assert np.array_equal(stitch([(v, (0, 0, 0))], v.shape), v)
    a = np.ones((4, 4, 3), np.float32)
    b = np.full((4, 4, 3), 3.0, np.float32)
    out = stitch([(a, (0, 0, 0)), (b, (0, 0, 2))], (4, 4, 5))
    assert (out[:, :, :2] == 1).all() and (out[:, :, 2] == 2).all() and (out[:, :, 3:] == 3).all()


def test_stitch_coverage_error():
    with pytest.raises(CoverageError) as e:
        stitch([(np.ones((2, 2, 2)), (0, 0, 0))], (2, 2, 3))
    assert e.value.index == (0, 0, 2)


@given(st.tuples(*[st.integers(8, 30)] * 3), st.integers(4, 8), st.data())
def test_cut_stitch_identity(dims, s, data):
    o = data.draw(st.integers(1, s - 1))
    rng = np.random.default_rng(sum(dims) * s + o)
    v = rng.random(dims).astype(np.float32)
    g = patch_grid(dims, s, o)
    patches = cut_patches(v, g)
    out = stitch(patches, dims)
    assert np.abs(out - v).max() <= 1e-6
    order = rng.permutation(len(patches))
    shuffled = stitch([patches[i] for i in order], dims)
    assert np.abs(shuffled - out).max() <= 1e-5


def test_assemble_examples():
    dims = (4, 4, 4)
    labels = np.random.default_rng(1).integers(0, 5, dims)
    masks = [BinaryMask(labels == i, i) for i in range(1, 5)]
    out = assemble([(np.full(dims, float(i), np.float32), m) for i, m in zip(range(1, 5), masks)], dims)
    for i in range(1, 5):
        assert (out == i).sum() == (labels == i).sum()
    assert (out[labels == 0] == 0).all()
    full = BinaryMask(np.ones(dims, bool), 1)
    v = np.random.default_rng(2).random(dims).astype(np.float32)
    assert np.array_equal(assemble([(v, full)], dims), v)
    assert not assemble([(np.zeros(dims, np.float32), m) for m in masks], dims).any()


def test_assemble_rejects_overlap():
    dims = (2, 2, 2)
    full = BinaryMask(np.ones(dims, bool), 1)
    with pytest.raises(PartitionError):
        assemble([(np.zeros(dims), full), (np.zeros(dims), full)], dims)


def test_pad_example():
    v = np.random.default_rng(0).random((40, 40, 20)).astype(np.float32)
    padded, rec = pad_to_min(v, 32)
    assert padded.shape == (40, 40, 32)
    assert rec.pads == ((0, 0), (0, 0), (6, 6))
    assert not padded[:, :, :6].any() and not padded[:, :, 26:].any()
    assert np.array_equal(unpad(padded, rec), v)
    same, rec = pad_to_min(np.zeros((33, 40, 32)), 32)
    assert rec.is_identity and same.shape == (33, 40, 32)


@given(st.tuples(*[st.integers(1, 40)] * 3), st.integers(1, 36))
def test_pad_unpad_roundtrip(dims, s):
    v = np.random.default_rng(0).random(dims)
    padded, rec = pad_to_min(v, s)
    assert all(n >= s for n in padded.shape)
    assert np.array_equal(unpad(padded, rec), v)


def test_sampler_full_mask():
    b = bundle(np.ones((36, 36, 36), bool))
    pairs = sample_training_patches(b, 10, 0.0, seed=3)
    assert len(pairs) == 10
    for p in pairs:
        assert p.ct.shape == p.pet.shape == (32, 32, 32)
        assert 0 <= p.ct.min() and p.ct.max() <= 1


def test_sampler_empty_mask():
    with pytest.raises(SamplingError):
        sample_training_patches(bundle(np.zeros((32, 32, 32), bool)), 1, 0.05)


def test_sampler_deterministic():
    mask = np.zeros((48, 40, 40), bool)
    mask[10:30, 5:25, 8:30] = True
    a = [p.origin for p in sample_training_patches(bundle(mask), 20, seed=7)]
    b = [p.origin for p in sample_training_patches(bundle(mask), 20, seed=7)]
    assert a == b


def brute_force_origins(mask, s, frac):
    out = []
    for i in range(mask.shape[0] - s + 1):
        for j in range(mask.shape[1] - s + 1):
            for k in range(mask.shape[2] - s + 1):
                if mask[i:i + s, j:j + s, k:k + s].sum() >= frac * s ** 3:
                    out.append((i, j, k))
    return out


@given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 0.4))
def test_admissible_set_matches_brute_force(seed, frac):
    rng = np.random.default_rng(seed)
    mask = rng.random((10, 9, 11)) < rng.uniform(0.05, 0.6)
    s = 6
    expected = brute_force_origins(mask, s, frac)
    if not expected:
        with pytest.raises(SamplingError):
            PatchSampler([bundle(mask)], s, frac)
        return
    sampler = PatchSampler([bundle(mask)], s, frac)
    assert sorted(map(tuple, sampler.origins[0].tolist())) == expected
    for p in sampler.sample(20, rng):
        assert p.mask.sum() >= frac * s ** 3


def test_sampler_requires_padding():
    with pytest.raises(PatchSizeError):
        PatchSampler([bundle(np.ones((20, 40, 40), bool))], 32, 0.0)
