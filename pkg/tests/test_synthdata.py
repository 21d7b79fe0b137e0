import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccreid import tensorio
from ccreid.errors import ConfigError
from ccreid.synthdata import (DatasetSpec, Sample, band_mask, descriptor_for, gen_dataset,
                              load_dataset, make_descriptor, mask_for, one_hot,
                              region_correlation, save_dataset)


def test_train_count(default_dataset):
    assert len(default_dataset.train) == 20 * 4 * 5


def test_same_seed_bit_identical():
    a, b = gen_dataset(DatasetSpec(seed=11)), gen_dataset(DatasetSpec(seed=11))
    for name in ("train", "query", "gallery"):
        assert a.splits[name].images.tobytes() == b.splits[name].images.tobytes()
        assert np.array_equal(a.splits[name].masks, b.splits[name].masks)


def test_serialized_bytes_identical(tmp_path):
    spec = DatasetSpec(subjects=3, test_subjects=2, seed=5)
    save_dataset(gen_dataset(spec), tmp_path / "a")
    save_dataset(gen_dataset(spec), tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert tensorio.sha256_file(f) == tensorio.sha256_file(tmp_path / "b" / f.name)


def test_noise_free_images_identical():
    ds = gen_dataset(DatasetSpec(noise_std=0.0, mask_jitter=0))
    tr = ds.train
    key = np.stack([tr.subjects, tr.clothes, tr.cameras], axis=1)
    _, inverse = np.unique(key, axis=0, return_inverse=True)
    for g in np.unique(inverse):
        rows = np.flatnonzero(inverse == g)
        for r in rows[1:]:
            assert np.array_equal(tr.images[r], tr.images[rows[0]])


def test_default_mask_band():
    spec = DatasetSpec()
    m = band_mask(spec, 0)
    assert m[5:14].all() and not m[:5].any() and not m[14:].any()
    assert m.sum() == 144


def test_jitter_plus_one_shifts_band(default_dataset):
    tr = default_dataset.train
    i = int(np.flatnonzero(tr.jitter == 1)[0])
    m = mask_for(tr[i], default_dataset)
    rows = np.flatnonzero(m.any(axis=1))
    assert rows.min() == 6 and rows.max() == 14


def test_mask_for_unknown_sample(default_dataset):
    bogus = Sample(np.zeros((16, 16)), 0, 0, 0, "train", 10_000)
    with pytest.raises(LookupError):
        mask_for(bogus, default_dataset)
    wrong_label = Sample(np.zeros((16, 16)), 3, 99, 0, "train", 0)
    with pytest.raises(LookupError):
        mask_for(wrong_label, default_dataset)


def test_masks_have_both_values(default_dataset):
    for split in default_dataset.splits.values():
        flat = split.masks.reshape(len(split), -1)
        assert flat.any(axis=1).all() and (~flat).any(axis=1).all()


@pytest.mark.parametrize("c, expected", [(0, [1, 0, 0, 0]), (3, [0, 0, 0, 1])])
def test_descriptor_examples(c, expected):
    d = make_descriptor(c, 4)
    assert d.clothes == c
    assert d.code.tolist() == expected


def test_descriptor_roundtrip(default_dataset):
    for c in range(default_dataset.n_clothes):
        d = descriptor_for(c, default_dataset)
        assert d.clothes == c and d.code.sum() == 1 and d.code[c] == 1


def test_descriptor_out_of_range(default_dataset):
    with pytest.raises(ConfigError):
        descriptor_for(default_dataset.n_clothes, default_dataset)
    with pytest.raises(ConfigError):
        one_hot([-1], 4)


@pytest.mark.parametrize("kwargs", [dict(subjects=0), dict(noise_std=-0.1), dict(cameras=0),
                                    dict(clothes_per_subject=1), dict(mask_jitter=9)])
def test_invalid_spec(kwargs):
    with pytest.raises(ConfigError):
        gen_dataset(DatasetSpec(**kwargs))


def test_split_structure(default_dataset):
    ds = default_dataset
    train_subjects = set(ds.train.subjects.tolist())
    assert not train_subjects & set(ds.query.subjects.tolist())
    assert not train_subjects & set(ds.gallery.subjects.tolist())
    for s, c in zip(ds.query.subjects, ds.query.clothes):
        same = ds.gallery.subjects == s
        assert same.any() and (ds.gallery.clothes[same] != c).all()
    for split in ds.splits.values():
        assert np.isfinite(split.images).all()
        assert split.images.min() >= -1 and split.images.max() <= 1
        assert split.cameras.min() >= 0 and split.cameras.max() < ds.spec.cameras


def test_identity_region_noise_bound(default_dataset):
    ds, spec = default_dataset, default_dataset.spec
    tr = ds.train
    diffs = []
    for s in range(spec.subjects):
        for cam in range(spec.cameras):
            rows = np.flatnonzero((tr.subjects == s) & (tr.cameras == cam))
            for a, b in zip(rows[:-1], rows[1:]):
                keep = ~tr.masks[a] & ~tr.masks[b]
                diffs.append(np.abs(tr.images[a] - tr.images[b])[keep])
    diffs = np.concatenate(diffs)
    assert np.mean(diffs <= 6 * spec.noise_std) >= 0.99


@pytest.mark.parametrize("noise", [0.0, 0.05, 0.09])
def test_clothes_correlation_gap(noise):
    ds = gen_dataset(DatasetSpec(noise_std=noise, seed=1))
    tr = ds.train
    corr = region_correlation(tr.images, ds.clothes_prototypes, tr.masks)
    own = corr[np.arange(len(tr)), tr.clothes]
    corr[np.arange(len(tr)), tr.clothes] = -np.inf
    assert np.all(own - corr.max(axis=1) > 0)


def test_save_load_roundtrip(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path)
    back = load_dataset(tmp_path)
    assert back.spec == small_dataset.spec
    for name, split in small_dataset.splits.items():
        other = back.splits[name]
        assert other.images.tobytes() == split.images.tobytes()
        assert np.array_equal(other.masks, split.masks)
        assert np.array_equal(other.subjects, split.subjects)
        assert np.array_equal(other.clothes, split.clothes)
    manifest = tensorio.read_json(tmp_path / "dataset.json")
    rec = manifest["splits"]["train"]["records"][1]
    assert set(rec) >= {"index", "subject", "clothes", "camera", "tensor_offset"}
    assert rec["tensor_offset"] == 256


@given(st.integers(0, 2**32 - 1))
def test_pure_in_seed(seed):
    spec = DatasetSpec(subjects=2, clothes_per_subject=2, images_per_pair=1, test_subjects=1, seed=seed)
    a, b = gen_dataset(spec), gen_dataset(spec)
    assert a.train.images.tobytes() == b.train.images.tobytes()
    assert a.query.images.tobytes() == b.query.images.tobytes()
