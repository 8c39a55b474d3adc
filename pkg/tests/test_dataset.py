import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ammdiff.dataset import (DatasetError, DatasetHandle, MultimodalSample, PatchMaskSpec, PhantomSpec,
                             all_presence_masks, apply_presence, generate_phantom_dataset, lesion_mask,
                             load_sample, load_stack, parse_presence, patch_mask, read_latent,
                             sample_presence_mask, split_dataset)


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_phantom_generation_is_byte_identical(tmp_path):
    a = generate_phantom_dataset(PhantomSpec(str(tmp_path / "a"), n_subjects=3, height=16, width=16, seed=7))
    b = generate_phantom_dataset(PhantomSpec(str(tmp_path / "b"), n_subjects=3, height=16, width=16, seed=7))
    assert _tree_bytes(a.root_path) == _tree_bytes(b.root_path)


def test_phantom_seed_changes_output(tmp_path):
    a = generate_phantom_dataset(PhantomSpec(str(tmp_path / "a"), n_subjects=2, height=16, width=16, seed=1))
    b = generate_phantom_dataset(PhantomSpec(str(tmp_path / "b"), n_subjects=2, height=16, width=16, seed=2))
    assert not np.array_equal(load_stack(a), load_stack(b))


def test_phantom_cardinality(small_phantoms):
    assert len(small_phantoms.index) == 10
    assert DatasetHandle.open(small_phantoms.root_path).index == small_phantoms.index


def test_enhancing_lesion_visible_only_in_t1ce(tmp_path):
    h = generate_phantom_dataset(PhantomSpec(str(tmp_path), n_subjects=6, height=64, width=64, seed=3,
                                             lesion_probability=1.0))
    for i in range(len(h)):
        latent = read_latent(h, i)
        assert latent["lesion"] is not None
        rim = lesion_mask(latent, 64, 64, "rim")
        assert rim.sum() > 0
        flair, t1, t1ce, t2 = load_sample(h, i).images
        brain_bg = (t1 > 0) & ~lesion_mask(latent, 64, 64, "tumour")
        # bright enhancing blob in T1CE, dark in T1, and brighter than any non-lesion T1CE tissue
        assert t1ce[rim].mean() > 0.8
        assert t1[rim].mean() < 0.5
        assert t1ce[rim].mean() > t1ce[brain_bg].max() - 0.05


def test_invalid_phantom_spec(tmp_path):
    with pytest.raises(DatasetError):
        generate_phantom_dataset(PhantomSpec(str(tmp_path), n_subjects=0))
    with pytest.raises(DatasetError):
        generate_phantom_dataset(PhantomSpec(str(tmp_path), height=15))


def test_load_sample_contract(small_phantoms):
    s = load_sample(small_phantoms, 0)
    assert s.images.shape == (4, 32, 32)
    assert s.images.min() >= 0 and s.images.max() <= 1
    assert np.array_equal(s.images, load_sample(small_phantoms, 0).images)
    with pytest.raises(IndexError, match="index out of range"):
        load_sample(small_phantoms, len(small_phantoms.index))


def test_corrupt_record_detected(tmp_path):
    h = generate_phantom_dataset(PhantomSpec(str(tmp_path), n_subjects=1, height=8, width=8))
    raster = next(tmp_path.rglob("*_T1.f32"))
    raster.write_bytes(raster.read_bytes()[:-4])
    with pytest.raises(DatasetError, match="corrupt"):
        load_sample(h, 0)


def test_record_header_format(small_phantoms):
    header = json.loads(next(small_phantoms.root_path.rglob("slice_0000.json")).read_text())
    assert header["dtype"] == "f32le"
    assert header["modality_names"] == ["FLAIR", "T1", "T1CE", "T2"]
    assert (header["height"], header["width"]) == (32, 32)


def test_sample_invariants():
    with pytest.raises(DatasetError):
        MultimodalSample(np.full((4, 8, 8), 1.5), "s")
    with pytest.raises(DatasetError):
        MultimodalSample(np.zeros((4, 7, 8)), "s")


def test_split_sizes_match_60_20_20(small_phantoms):
    tr, va, te = split_dataset(small_phantoms, (0.6, 0.2, 0.2), seed=0)
    assert (len(tr.subjects), len(va.subjects), len(te.subjects)) == (6, 2, 2)
    assert set(tr.subjects) | set(va.subjects) | set(te.subjects) == set(small_phantoms.subjects)
    assert not set(tr.subjects) & set(va.subjects)
    assert not set(tr.subjects) & set(te.subjects)
    assert not set(va.subjects) & set(te.subjects)


def test_split_rejects_zero_ratio(small_phantoms):
    with pytest.raises(DatasetError):
        split_dataset(small_phantoms, (1.0, 0.0, 0.0))
    with pytest.raises(DatasetError):
        split_dataset(small_phantoms, (0.5, 0.2, 0.2))


def test_split_deterministic(small_phantoms):
    a = split_dataset(small_phantoms, seed=3)
    b = split_dataset(small_phantoms, seed=3)
    assert [h.index for h in a] == [h.index for h in b]


def test_split_keeps_subject_slices_together(tmp_path):
    h = generate_phantom_dataset(PhantomSpec(str(tmp_path), n_subjects=5, height=8, width=8, slices_per_subject=3))
    parts = split_dataset(h, seed=1)
    for part in parts:
        for subject in part.subjects:
            assert sum(1 for s, _ in part.index if s == subject) == 3
    assert sum(len(p) for p in parts) == 15


def test_presence_mask_enumeration():
    masks = {tuple(m) for m in all_presence_masks(4)}
    assert len(masks) == 2**4 - 2
    assert len(all_presence_masks(4, include_full=True)) == 15


def test_presence_mask_uniformity():
    rng = np.random.default_rng(0)
    counts = Counter(tuple(sample_presence_mask(rng, 4)) for _ in range(14000))
    assert len(counts) == 14
    for c in counts.values():
        assert 800 <= c <= 1200


def test_presence_mask_two_modalities():
    rng = np.random.default_rng(0)
    seen = {tuple(sample_presence_mask(rng, 2)) for _ in range(200)}
    assert seen == {(True, False), (False, True)}
    with pytest.raises(DatasetError):
        sample_presence_mask(rng, 1)


@given(seed=st.integers(0, 2**32 - 1), m=st.integers(2, 6))
def test_presence_mask_is_proper(seed, m):
    mask = sample_presence_mask(np.random.default_rng(seed), m)
    assert mask.any() and not mask.all()


def test_apply_presence():
    x = np.random.default_rng(0).random((4, 8, 8)).astype(np.float32)
    assert np.array_equal(apply_presence(x, [True] * 4), x)
    out = apply_presence(x, [True, False, False, False])
    assert np.array_equal(out[0], x[0])
    assert not out[1:].any()
    with pytest.raises(DatasetError):
        apply_presence(x, [False] * 4)
    with pytest.raises(DatasetError):
        apply_presence(x, [True, False])


@settings(max_examples=30)
@given(seed=st.integers(0, 1000), code=st.integers(1, 15))
def test_apply_presence_idempotent(seed, code):
    x = np.random.default_rng(seed).random((4, 8, 8))
    mask = [(code >> k) & 1 == 1 for k in range(4)]
    once = apply_presence(x, mask)
    assert np.array_equal(apply_presence(once, mask), once)


def test_parse_presence():
    assert parse_presence("1,0,0,1").tolist() == [True, False, False, True]
    with pytest.raises(DatasetError, match="at least one modality required"):
        parse_presence("0,0,0,0")
    with pytest.raises(DatasetError, match="malformed"):
        parse_presence("1,0,2,1")
    with pytest.raises(DatasetError, match="malformed"):
        parse_presence("1,0,1")


def test_patch_mask_extremes(rng):
    x = rng.random((4, 32, 32))
    out, pmap = patch_mask(x, PatchMaskSpec(16, 0.0), rng)
    assert np.array_equal(out, x) and not pmap.any()
    out, pmap = patch_mask(x, PatchMaskSpec(16, 1.0), rng)
    assert not out.any() and pmap.all()


def test_patch_mask_count(rng):
    x = rng.random((4, 128, 128)) + 0.1
    out, pmap = patch_mask(x, PatchMaskSpec(16, 0.5), rng)
    assert pmap.shape == (8, 8)
    assert pmap.sum() == 32
    # co-located across channels
    zero = out == 0
    assert np.array_equal(zero[0], zero[3])


def test_patch_mask_bad_size(rng):
    with pytest.raises(DatasetError):
        patch_mask(np.zeros((4, 30, 30)), PatchMaskSpec(16, 0.5), rng)


@settings(max_examples=30)
@given(seed=st.integers(0, 1000), ratio=st.floats(0, 1))
def test_patch_mask_only_touches_mapped_patches(seed, ratio):
    rng = np.random.default_rng(seed)
    x = rng.random((3, 32, 32)) + 0.5
    out, pmap = patch_mask(x, PatchMaskSpec(8, ratio), rng)
    pixel_map = np.kron(pmap, np.ones((8, 8), dtype=bool)).astype(bool)
    assert np.array_equal(out[:, ~pixel_map], x[:, ~pixel_map])
    assert not out[:, pixel_map].any()
