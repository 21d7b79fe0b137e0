import dataclasses

import numpy as np
import pytest
from scipy import stats

from ccreid.diffusion import Denoiser, make_schedule
from ccreid.errors import ConfigError, NumericalError
from ccreid.expansion import GeneratedSet, expand_dataset, sample_clothes_ids
from ccreid.synthdata import DatasetSpec, gen_dataset


@pytest.fixture(scope="module")
def quick(small_dataset):
    sch = make_schedule(8, 1e-4, 0.2)
    den = Denoiser(small_dataset.image_shape, small_dataset.n_clothes, hidden=(16,),
                   rng=np.random.default_rng(0), schedule=sch)
    return small_dataset, den, sch


def test_forced_by_exclusion():
    ids = sample_clothes_ids(range(11), 3, 10, np.random.default_rng(0))
    assert sorted(ids) == [c for c in range(11) if c != 3]


def test_single_choice():
    assert sample_clothes_ids({0, 1}, 0, 1, np.random.default_rng(0)) == [1]


@pytest.mark.parametrize("K", [2, 3])
def test_too_many_ids(K):
    with pytest.raises(ConfigError):
        sample_clothes_ids({0, 1}, 0, K, np.random.default_rng(0))


def test_chi_square_uniformity():
    rng = np.random.default_rng(0)
    counts = np.zeros(20)
    for _ in range(10_000):
        ids = sample_clothes_ids(range(20), 7, 5, rng)
        assert len(set(ids)) == 5 and 7 not in ids
        counts[ids] += 1
    observed = np.delete(counts, 7)
    assert stats.chisquare(observed).pvalue > 0.01


def test_counts_labels_and_preservation(quick):
    ds, den, sch = quick
    K = 3
    gen = expand_dataset(ds, den, sch, K=K, seed=1, chunk=5)
    tr = ds.train
    assert len(gen) == K * len(tr)
    for r in range(len(gen)):
        i = gen.source[r]
        assert gen.subjects[r] == tr.subjects[i]
        assert gen.clothes[r] != tr.clothes[i]
        keep = ~tr.masks[i]
        assert np.array_equal(gen.images[r][keep], tr.images[i][keep])
    for i in range(len(tr)):
        assert gen.variant[gen.variants_of(i)].tolist() == list(range(K))
        assert len(set(gen.clothes[gen.variants_of(i)].tolist())) == K


def test_ten_images_k10():
    ds = gen_dataset(DatasetSpec(subjects=6, clothes_per_subject=2, images_per_pair=1,
                                 test_subjects=1, seed=2))
    ds = dataclasses.replace(ds, train=ds.train.subset(np.arange(10)), splits={})
    sch = make_schedule(2, 1e-4, 0.2)
    den = Denoiser(ds.image_shape, ds.n_clothes, hidden=(8,), schedule=sch)
    gen = expand_dataset(ds, den, sch, K=10)
    assert len(gen) == 100
    with pytest.raises(ConfigError):
        expand_dataset(ds, den, sch, K=ds.n_clothes)


def test_deterministic_and_chunk_resume(quick, tmp_path):
    ds, den, sch = quick
    a = expand_dataset(ds, den, sch, K=2, seed=4, chunk=6)
    b = expand_dataset(ds, den, sch, K=2, seed=4, chunk=6, checkpoint_dir=tmp_path)
    assert a.images.tobytes() == b.images.tobytes()
    chunks = sorted(tmp_path.iterdir())
    assert len(chunks) == 3
    # drop the last chunk, poison the first: resume must reuse the first and redo the last
    chunks[-1].unlink()
    from ccreid import tensorio
    poisoned = tensorio.read_tensor(chunks[0])
    poisoned[:] = 0.25
    tensorio.write_tensor(chunks[0], poisoned)
    c = expand_dataset(ds, den, sch, K=2, seed=4, chunk=6, checkpoint_dir=tmp_path)
    assert np.all(c.images[:12] == 0.25)
    assert c.images[12:].tobytes() == a.images[12:].tobytes()


def test_per_source_rng_independent_of_chunking(quick):
    ds, den, sch = quick
    a = expand_dataset(ds, den, sch, K=2, seed=4, chunk=6)
    b = expand_dataset(ds, den, sch, K=2, seed=4, chunk=16)
    assert np.array_equal(a.clothes, b.clothes)


def test_numerical_error_names_sources(quick):
    ds, den, sch = quick

    class Broken:
        image_shape = den.image_shape

        def predict_eps(self, x, t, y=None):
            return np.full_like(x, np.nan)

    with pytest.raises(NumericalError, match="sources 0..7"):
        expand_dataset(ds, Broken(), sch, K=2, chunk=8)


def test_save_load_and_first_variants(quick, tmp_path):
    ds, den, sch = quick
    gen = expand_dataset(ds, den, sch, K=4, seed=0)
    back = GeneratedSet.load(gen.save(tmp_path))
    assert back.images.tobytes() == gen.images.tobytes()
    assert np.array_equal(back.source, gen.source) and back.k == 4
    sub = gen.first_variants(2)
    assert len(sub) == 2 * len(ds.train) and sub.k == 2
    assert set(sub.variant.tolist()) == {0, 1}
    with pytest.raises(ConfigError):
        gen.first_variants(5)
