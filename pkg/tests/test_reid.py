import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccreid.errors import ConfigError, DataError
from ccreid.expansion import GeneratedSet
from ccreid.nn import finite_difference, relative_error
from ccreid.reid import (EmbeddingModel, ProgressiveState, ReIDConfig, batch_hard_triplet,
                         build_batch, partition_generated, partition_sizes, sample_pair, train)


def fake_generated(train_split, K, seed=0):
    """A GeneratedSet shaped like a real expansion, with noise images and valid labels."""
    M = len(train_split)
    rng = np.random.default_rng(seed)
    n_clothes = int(train_split.clothes.max()) + 1
    clothes = (np.repeat(train_split.clothes, K) + 1 + np.tile(np.arange(K), M) % (n_clothes - 1)) % n_clothes
    imgs = np.repeat(train_split.images, K, axis=0) + rng.normal(0, 0.01, (M * K, *train_split.images.shape[1:]))
    return GeneratedSet(imgs.astype(np.float32), np.repeat(train_split.subjects, K), clothes,
                        np.repeat(np.arange(M), K), np.tile(np.arange(K), M), K)


@pytest.mark.parametrize("k, sizes", [(10, [3, 3, 2, 2]), (4, [1, 1, 1, 1]), (7, [2, 2, 2, 1])])
def test_partition_sizes(k, sizes):
    parts = partition_generated(list(range(k)), seed=1)
    assert [len(p) for p in parts] == sizes == partition_sizes(k)
    assert sorted(sum(parts, [])) == list(range(k))


def test_partition_deterministic():
    assert partition_generated(range(10), 7) == partition_generated(range(10), 7)


def test_partition_too_few():
    with pytest.raises(ConfigError):
        partition_generated([1, 2, 3], 0)


@pytest.fixture()
def state_and_gen(small_dataset):
    gen = fake_generated(small_dataset.train, 10)
    return ProgressiveState.build(gen, len(small_dataset.train), N=5, seed=3), gen


@pytest.mark.parametrize("epoch, allowed", [(0, 1), (4, 1), (5, 2), (7, 2), (10, 3), (15, 4), (1000, 4)])
def test_sample_pair_respects_schedule(state_and_gen, epoch, allowed):
    state, _ = state_and_gen
    state.epoch = epoch
    rng = np.random.default_rng(0)
    parts = state.partitions(2)
    ok = set(np.concatenate(parts[:allowed]).tolist())
    draws = {sample_pair(2, state, rng) for _ in range(400)}
    assert draws == ok


def test_build_batch_composition(small_dataset, state_and_gen):
    state, gen = state_and_gen
    tr = small_dataset.train
    originals = np.arange(min(32, len(tr)))
    b = build_batch(originals, tr, gen, state, np.random.default_rng(0))
    B = len(originals)
    assert len(b.images) == 2 * B
    assert np.array_equal(b.subjects[:B], b.subjects[B:])
    assert np.all(b.clothes[:B] != b.clothes[B:])
    assert not b.generated[:B].any() and b.generated[B:].all()


def test_batch_of_32_doubles():
    from ccreid.synthdata import DatasetSpec, gen_dataset
    ds = gen_dataset(DatasetSpec(subjects=8, images_per_pair=1, test_subjects=1))
    gen = fake_generated(ds.train, 4)
    state = ProgressiveState.build(gen, len(ds.train))
    b = build_batch(np.arange(32), ds.train, gen, state, np.random.default_rng(0))
    assert len(b.images) == 64


def test_empty_batch(small_dataset, state_and_gen):
    state, gen = state_and_gen
    b = build_batch([], small_dataset.train, gen, state, np.random.default_rng(0))
    assert len(b.images) == 0


def test_missing_variants(small_dataset):
    tr = small_dataset.train
    gen = fake_generated(tr.subset(np.arange(4)), 4)
    state = ProgressiveState.build(gen, 4)
    with pytest.raises(DataError):
        build_batch([5], tr, gen, state, np.random.default_rng(0))
    with pytest.raises(DataError):
        ProgressiveState.build(fake_generated(tr, 3), len(tr))


def test_loss_gradients_two_samples():
    rng = np.random.default_rng(0)
    model = EmbeddingModel((2, 3), 2, hidden=5, dim=4, rng=rng)
    x = rng.standard_normal((2, 2, 3))
    labels = np.array([0, 1])
    _, grads, _ = model.loss_and_grads(x, labels)
    fd = finite_difference(lambda: model.loss_and_grads(x, labels)[0], model.params)
    for g, f in zip(grads, fd):
        assert relative_error(g, f) < 1e-4


def test_triplet_gradient_with_active_hinges():
    rng = np.random.default_rng(1)
    e = rng.standard_normal((6, 3))
    labels = np.array([0, 0, 1, 1, 2, 2])
    loss, g = batch_hard_triplet(e, labels, margin=2.0)
    assert loss > 0
    fd = finite_difference(lambda: batch_hard_triplet(e, labels, 2.0)[0], [e])[0]
    assert relative_error(g, fd) < 1e-4


def test_triplet_without_positive_pairs_is_zero():
    loss, g = batch_hard_triplet(np.eye(3), np.array([0, 1, 2]), 0.3)
    assert loss == 0.0 and not g.any()


@given(st.integers(0, 10_000))
def test_embeddings_unit_norm(seed):
    rng = np.random.default_rng(seed)
    model = EmbeddingModel((4, 4), 3, hidden=8, dim=5, rng=rng, dtype="float32")
    e = model.embed(rng.normal(0, 3, (7, 4, 4)))
    assert np.all(np.abs(np.linalg.norm(e, axis=1) - 1) < 1e-6)


def test_schedule_conformance_logged(small_dataset):
    tr = small_dataset.train
    gen = fake_generated(tr, 10)
    config = ReIDConfig(epochs=20, N=5, batch_size=8, hidden=16, dim=8, val_fraction=0.0)
    log = []
    result = train(small_dataset, gen, config, pair_log=log)
    state = ProgressiveState.build(gen, len(tr), config.N, seed=config.seed)
    assert [s["active_partitions"] for s in result.stats] == [1] * 5 + [2] * 5 + [3] * 5 + [4] * 5
    for epoch, sources, records in log:
        state.epoch = epoch
        for s, r in zip(sources, records):
            assert r in state.pool(s)


def test_modes(small_dataset):
    tr = small_dataset.train
    gen = fake_generated(tr, 4)
    base = dict(epochs=2, batch_size=4, hidden=16, dim=8, val_fraction=0.0)
    for mode, per_epoch in (("baseline", 4), ("progressive", 4), ("merged", 20)):
        r = train(small_dataset, gen, ReIDConfig(mode=mode, **base))
        assert [s["batches"] for s in r.stats] == [per_epoch, per_epoch]
        assert all(np.isfinite(s["loss"]) for s in r.stats)
    with pytest.raises(DataError):
        train(small_dataset, None, ReIDConfig(mode="progressive", **base))
    with pytest.raises(ConfigError):
        train(small_dataset, gen, ReIDConfig(mode="concat", **base))


def test_validation_split_holds_out_subjects(default_dataset):
    r = train(default_dataset, None, ReIDConfig(mode="baseline", epochs=1, hidden=16, dim=8))
    tr = default_dataset.train
    assert not set(tr.subjects[r.train_index]) & set(tr.subjects[r.val_index])
    assert len(np.unique(tr.subjects[r.val_index])) == 2
    assert r.stats[0]["val_top1"] is not None


def test_training_learns_baseline(default_dataset):
    r = train(default_dataset, None, ReIDConfig(mode="baseline", epochs=15))
    assert r.stats[-1]["loss"] < r.stats[0]["loss"]
    assert r.stats[-1]["val_top1"] >= 0.5


def test_zero_encoder_output_still_unit_norm():
    model = EmbeddingModel((2, 2), 2, hidden=3, dim=4)
    for p in model.params:
        p[...] = 0.0
    e = model.embed(np.ones((2, 2, 2)))
    assert np.array_equal(e, np.tile([1.0, 0, 0, 0], (2, 1)))
