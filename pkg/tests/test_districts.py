import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ct2pet.districts import (
    LabelCollapseMap,
    LabelMappingError,
    binary_masks,
    collapse_labels,
    collapse_overlapping,
    district_voxel_counts,
    extract_bundles,
    partition_check,
    whole_body_bundle,
)
from ct2pet.volume import BinaryMask, DistrictLabelMask, WHOLE_BODY, mask_apply

from conftest import make_patient

label_arrays = arrays(np.uint8, st.tuples(*[st.integers(1, 6)] * 3), elements=st.integers(0, 4))


def test_collapse_all_background():
    m = collapse_labels(np.zeros((3, 3, 3), int), {0: 0})
    assert not m.labels.any()


def test_collapse_histogram():
    rng = np.random.default_rng(0)
    raw = rng.choice([10, 11], size=(5, 6, 7))
    m = collapse_labels(raw, {10: 1, 11: 2})
    assert (m.labels == 1).sum() == (raw == 10).sum()
    assert (m.labels == 2).sum() == (raw == 11).sum()


def test_collapse_unmapped_label():
    raw = np.array([0, 10, 99, 99]).reshape(2, 2, 1)
    with pytest.raises(LabelMappingError) as e:
        collapse_labels(raw, {0: 0, 10: 1})
    assert e.value.missing == [99] and "99" in str(e.value)


def test_collapse_map_parse(tmp_path):
    text = "# vocabulary\n0 = background\n10 = head\n11 = 2  # trunk\n\n12 = arms\n"
    path = tmp_path / "map.txt"
    path.write_text(text)
    table = LabelCollapseMap.load(path)
    assert dict(table) == {0: 0, 10: 1, 11: 2, 12: 3}
    assert LabelCollapseMap.parse(table.dumps()) == table


@pytest.mark.parametrize("text", ["10 = 7", "10 - 1", "x = 1", "10 = spleen"])
def test_collapse_map_errors(text):
    with pytest.raises(ValueError, match="<string>:1"):
        LabelCollapseMap.parse(text)


def test_overlap_priority():
    a = np.array([1, 1, 0, 2]).reshape(4, 1, 1)  # raw label 1 -> legs, 2 -> trunk
    b = np.array([3, 0, 4, 0]).reshape(4, 1, 1)  # raw 3 -> head, 4 -> arms
    m = collapse_overlapping([a, b], {0: 0, 1: 4, 2: 2, 3: 1, 4: 3})
    assert m.labels.ravel().tolist() == [1, 4, 3, 2]


def test_binary_masks_examples():
    masks = binary_masks(DistrictLabelMask(np.full((2, 2, 2), 2, np.uint8)))
    assert [m.count() for m in masks] == [0, 8, 0, 0]
    one_each = DistrictLabelMask(np.array([1, 2, 3, 4], np.uint8).reshape(4, 1, 1))
    assert [m.count() for m in binary_masks(one_each)] == [1, 1, 1, 1]
    assert [m.district_id for m in masks] == [1, 2, 3, 4]


@given(label_arrays)
def test_partition_by_construction(labels):
    m = DistrictLabelMask(labels)
    masks = binary_masks(m)
    report = partition_check(masks, m)
    assert report.ok
    assert sum(mk.count() for mk in masks) == int((labels != 0).sum())
    assert district_voxel_counts(m)[0] == int((labels == 0).sum())


def test_partition_violations():
    labels = np.array([1, 2, 0], np.uint8).reshape(3, 1, 1)
    m = DistrictLabelMask(labels)
    masks = binary_masks(m)
    shared = masks[0].indicator.copy()
    shared[1] = True
    r = partition_check([BinaryMask(shared, 1)] + masks[1:], m)
    assert not r.ok and r.overlap_voxels == 1
    r = partition_check([BinaryMask(np.zeros_like(shared), 1)] + masks[1:], m)
    assert not r.ok and r.coverage_deficit == 1


@given(label_arrays, st.integers(0, 2 ** 31 - 1))
def test_bundles_reconstruct_ct(labels, seed):
    rng = np.random.default_rng(seed)
    ct = rng.random(labels.shape)
    p = make_patient(labels, ct=ct, pet=rng.random(labels.shape))
    bundles = extract_bundles(p)
    body = labels != 0
    total = sum(b.ct.data for b in bundles)
    assert np.array_equal(total + np.where(body, 0, p.ct.data), p.ct.data)
    support = [b.ct.data != 0 for b in bundles]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not (support[i] & support[j]).any()
    for b in bundles:
        assert np.array_equal(mask_apply(b.ct, b.mask).data, b.ct.data)
        assert not b.pet.data[~b.mask.indicator].any()


def test_empty_district_bundle():
    labels = np.ones((3, 3, 3), np.uint8)
    arms = extract_bundles(make_patient(labels))[2]
    assert arms.district_id == 3 and not arms.mask.indicator.any() and not arms.ct.data.any()


def test_whole_body_bundle_keeps_context(slab_patient):
    b = whole_body_bundle(slab_patient)
    assert b.district_id == WHOLE_BODY
    assert np.array_equal(b.ct.data, slab_patient.ct.data)
    assert np.array_equal(b.mask.indicator, slab_patient.district_mask.labels != 0)
