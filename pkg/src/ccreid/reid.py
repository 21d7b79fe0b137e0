"""Embedding network and progressive-pairing trainer.

Training batches pair every original image with one of its generated
variants. Each source image's K variants are split once into four fixed
partitions; the pool a pair is drawn from starts as the first partition and
grows by one partition every N epochs until all four are in use.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .nn import MLP, SGD

N_PARTITIONS = 4


class EmbeddingModel:
    """flatten(x) -> hidden -> d, L2-normalised, plus a linear subject classifier."""

    def __init__(self, image_shape, n_classes: int, hidden: int = 256, dim: int = 64,
                 logit_scale: float = 8.0, rng=None, params=None, dtype="float64",
                 activation: str = "leaky_relu"):
        self.dtype = np.dtype(dtype)
        self.activation = activation
        self.image_shape = tuple(int(s) for s in image_shape)
        self.n_classes = int(n_classes)
        self.hidden = int(hidden)
        self.dim = int(dim)
        self.logit_scale = float(logit_scale)
        d_in = int(np.prod(self.image_shape))
        if params is None:
            rng = np.random.default_rng(0) if rng is None else rng
            self.encoder = MLP([d_in, self.hidden, self.dim], rng=rng, activation=activation)
            self.params = self.encoder.params + [
                rng.normal(0.0, 1.0 / np.sqrt(self.dim), size=(self.dim, self.n_classes)),
                np.zeros(self.n_classes)]
        else:
            params = [np.asarray(p, dtype=np.float64) for p in params]
            self.encoder = MLP([d_in, self.hidden, self.dim], params=params[:-2], activation=activation)
            self.params = self.encoder.params + params[-2:]
        self.params[:] = [p.astype(self.dtype, copy=False) for p in self.params]
        self.encoder.params = self.params[:-2]

    def arch(self) -> dict:
        return {"kind": "embedding", "image_shape": list(self.image_shape),
                "n_classes": self.n_classes, "hidden": self.hidden, "dim": self.dim,
                "logit_scale": self.logit_scale, "dtype": self.dtype.name,
                "activation": self.activation}

    @classmethod
    def from_arch(cls, arch: dict, params) -> "EmbeddingModel":
        return cls(arch["image_shape"], arch["n_classes"], arch["hidden"], arch["dim"],
                   arch["logit_scale"], params=params, dtype=arch.get("dtype", "float64"),
                   activation=arch.get("activation", "leaky_relu"))

    def _encode(self, images):
        x = np.asarray(images, dtype=self.dtype).reshape(len(images), -1)
        z, cache = self.encoder.forward(x)
        norm = np.linalg.norm(z, axis=1, keepdims=True)
        return z / np.maximum(norm, 1e-12), norm, cache

    def embed(self, images) -> np.ndarray:
        """Unit-norm float64 embeddings (renormalised after the upcast)."""
        if len(images) == 0:
            return np.zeros((0, self.dim))
        e = self._encode(images)[0].astype(np.float64)
        norm = np.linalg.norm(e, axis=1, keepdims=True)
        # an all-zero encoder output has no direction; map it to the first axis
        e = np.where(norm > 0, e, np.eye(1, self.dim))
        return e / np.where(norm > 0, norm, 1.0)

    def loss_and_grads(self, images, labels, margin: float = 0.3, triplet_weight: float = 1.0):
        """Cross-entropy on the classifier plus batch-hard triplet loss on embeddings.

        Returns (total loss, grads aligned with ``self.params``, {"ce": .., "triplet": ..}).
        """
        labels = np.asarray(labels, dtype=np.int64)
        n = len(labels)
        e, norm, cache = self._encode(images)
        Wc, bc = self.params[-2], self.params[-1]

        logits = self.logit_scale * (e @ Wc) + bc
        logits -= logits.max(axis=1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        ce = float(-logp[np.arange(n), labels].mean())
        g_logits = np.exp(logp)
        g_logits[np.arange(n), labels] -= 1.0
        g_logits /= n
        g_W = self.logit_scale * (e.T @ g_logits)
        g_b = g_logits.sum(axis=0)
        g_e = self.logit_scale * (g_logits @ Wc.T)

        tri, g_tri = batch_hard_triplet(e, labels, margin)
        g_e += triplet_weight * g_tri

        g_z = (g_e - e * np.sum(e * g_e, axis=1, keepdims=True)) / norm
        enc_grads, _ = self.encoder.backward(cache, g_z, input_grad=False)
        total = ce + triplet_weight * tri
        return total, enc_grads + [g_W, g_b], {"ce": ce, "triplet": tri}


def batch_hard_triplet(e, labels, margin: float):
    """Mean over anchors of relu(max_pos d - min_neg d + margin) and its gradient wrt ``e``.

    Distances are Euclidean between rows of ``e``; anchors without a positive
    or a negative in the batch are skipped.
    """
    n = len(labels)
    gram = e @ e.T
    sq = np.maximum(np.sum(e * e, axis=1)[:, None] + np.sum(e * e, axis=1)[None, :] - 2 * gram, 0.0)
    dist = np.sqrt(sq + 1e-12)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    grad = np.zeros_like(e)
    if not valid.any():
        return 0.0, grad
    idx = np.flatnonzero(valid)
    p = np.where(pos_mask, dist, -np.inf)[idx].argmax(axis=1)
    q = np.where(neg_mask, dist, np.inf)[idx].argmin(axis=1)
    hinge = dist[idx, p] - dist[idx, q] + margin
    active = hinge > 0
    loss = float(np.sum(np.where(active, hinge, 0.0)) / len(idx))
    w = active / len(idx)
    # d(dist_ij)/d(e_i) = (e_i - e_j) / dist_ij; collect pair weights in an
    # n x n matrix A so that grad = (diag(rowsum A + colsum A) - A - A^T) e
    # each anchor row appears once and its positive and negative differ, so
    # plain fancy assignment never collides
    A = np.zeros((n, n), dtype=e.dtype)
    A[idx, p] = w / dist[idx, p]
    A[idx, q] = -w / dist[idx, q]
    deg = A.sum(axis=1) + A.sum(axis=0)
    grad = deg[:, None] * e - (A + A.T) @ e
    return loss, grad


# -- progressive pairing ----------------------------------------------------

def partition_sizes(k: int):
    return [len(a) for a in np.array_split(np.arange(k), N_PARTITIONS)]


def partition_generated(variants, seed):
    """Seeded shuffle of ``variants`` and a contiguous, balanced 4-way split."""
    variants = list(variants)
    if len(variants) < N_PARTITIONS:
        raise ConfigError(f"need at least {N_PARTITIONS} variants to partition, got {len(variants)}")
    order = np.random.default_rng(seed).permutation(len(variants))
    shuffled = [variants[i] for i in order]
    out, start = [], 0
    for size in partition_sizes(len(variants)):
        out.append(shuffled[start:start + size])
        start += size
    return out


@dataclass
class ProgressiveState:
    """Fixed per-source partitions plus the current epoch.

    ``order[i]`` lists source ``i``'s generated record indices partition by
    partition, so the union of the first ``a`` partitions is ``order[i, :bounds[a-1]]``.
    """
    order: np.ndarray
    bounds: np.ndarray
    N: int = 5
    epoch: int = 0

    @classmethod
    def build(cls, generated, n_sources: int, N: int = 5, seed: int = 0) -> "ProgressiveState":
        if N < 1:
            raise ConfigError("widening period N must be >= 1")
        k = generated.k
        if k < N_PARTITIONS:
            raise DataError(f"progressive pairing needs >= {N_PARTITIONS} variants per image, got K={k}")
        order = np.empty((n_sources, k), dtype=np.int64)
        for i in range(n_sources):
            recs = generated.variants_of(i)
            if len(recs) != k:
                raise DataError(f"source {i} has {len(recs)} generated variants, expected {k}")
            order[i] = np.concatenate(partition_generated(recs, [seed, i]))
        return cls(order, np.cumsum(partition_sizes(k)), N, 0)

    @property
    def active(self) -> int:
        return min(N_PARTITIONS, 1 + self.epoch // self.N)

    def partitions(self, source: int):
        edges = np.concatenate([[0], self.bounds])
        return [self.order[source, edges[a]:edges[a + 1]] for a in range(N_PARTITIONS)]

    def pool(self, source: int) -> np.ndarray:
        return self.order[source, :self.bounds[self.active - 1]]


def sample_pair(source_index: int, state: ProgressiveState, rng) -> int:
    pool = state.pool(source_index)
    return int(pool[rng.integers(0, len(pool))])


def sample_pairs(sources, state: ProgressiveState, rng) -> np.ndarray:
    sources = np.asarray(sources, dtype=np.int64)
    j = rng.integers(0, state.bounds[state.active - 1], size=len(sources))
    return state.order[sources, j]


@dataclass
class Batch:
    images: np.ndarray
    subjects: np.ndarray
    clothes: np.ndarray
    generated: np.ndarray    # True for the paired half
    records: np.ndarray      # generated record index, -1 for originals


def build_batch(originals, train, generated, state: ProgressiveState, rng) -> Batch:
    """originals ++ one progressive pair per original; size 2 * len(originals)."""
    originals = np.asarray(originals, dtype=np.int64)
    if len(originals) == 0:
        shape = (0, *train.images.shape[1:])
        e = np.zeros(0, dtype=np.int64)
        return Batch(np.zeros(shape, np.float32), e, e, np.zeros(0, bool), e)
    if originals.max() >= state.order.shape[0]:
        raise DataError("original image without generated variants")
    recs = sample_pairs(originals, state, rng)
    return Batch(
        np.concatenate([train.images[originals], generated.images[recs]]),
        np.concatenate([train.subjects[originals], generated.subjects[recs]]),
        np.concatenate([train.clothes[originals], generated.clothes[recs]]),
        np.repeat([False, True], len(originals)),
        np.concatenate([np.full(len(originals), -1), recs]),
    )


# -- training -----------------------------------------------------------------

MODES = ("baseline", "progressive", "merged")


@dataclass
class ReIDConfig:
    epochs: int = 40
    N: int = 5
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    margin: float = 0.3
    hidden: int = 256
    dim: int = 64
    mode: str = "progressive"
    val_fraction: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0 or self.N < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError(f"invalid re-id config {asdict(self)}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")


@dataclass
class TrainResult:
    model: EmbeddingModel
    stats: list = field(default_factory=list)
    train_index: np.ndarray = None   # rows of dataset.train used for training
    val_index: np.ndarray = None
    classes: np.ndarray = None       # subject ID of each classifier output


def split_validation(train, fraction: float, rng):
    subjects = np.unique(train.subjects)
    n_val = int(np.ceil(fraction * len(subjects))) if fraction > 0 else 0
    if n_val >= len(subjects):
        n_val = len(subjects) - 1
    val_subjects = np.sort(rng.choice(subjects, size=n_val, replace=False)) if n_val else np.zeros(0, int)
    is_val = np.isin(train.subjects, val_subjects)
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


def validation_top1(model, train, val_index) -> float | None:
    """Clothes-changed top-1 on held-out subjects: lowest clothes ID per subject is the query."""
    from .retrieval import FeatureMatrix, Protocol, evaluate

    if len(val_index) == 0:
        return None
    subj, cl = train.subjects[val_index], train.clothes[val_index]
    first = np.array([cl[subj == s].min() for s in subj])
    q, g = val_index[cl == first], val_index[cl != first]
    feats = model.embed(train.images[np.concatenate([q, g])])
    qf = FeatureMatrix(feats[:len(q)], train.subjects[q], train.clothes[q], train.cameras[q])
    gf = FeatureMatrix(feats[len(q):], train.subjects[g], train.clothes[g], train.cameras[g])
    return evaluate(qf, gf, Protocol()).top1


def train(dataset, generated=None, config: ReIDConfig | None = None, rng=None,
          model: EmbeddingModel | None = None, pair_log: list | None = None,
          verbose: bool = False) -> TrainResult:
    """Train an embedding model on ``dataset.train`` (plus ``generated`` unless baseline).

    Per-epoch stats: loss terms, training wall-clock (validation excluded),
    active partition count and validation clothes-changed top-1. When
    ``pair_log`` is a list, ``(epoch, sources, records)`` is appended for every
    progressive batch.
    """
    config = ReIDConfig() if config is None else config
    config.validate()
    rng = np.random.default_rng(config.seed) if rng is None else rng
    tr = dataset.train
    if config.mode != "baseline" and generated is None:
        raise DataError(f"mode {config.mode!r} needs a generated set")

    train_index, val_index = split_validation(tr, config.val_fraction, rng)
    classes = np.unique(tr.subjects[train_index])
    if model is None:
        model = EmbeddingModel(dataset.image_shape, len(classes), config.hidden, config.dim,
                               rng=rng, dtype=config.dtype)
    opt = SGD(model.params, config.lr, config.momentum, clip=10.0)

    state = None
    if config.mode == "progressive":
        state = ProgressiveState.build(generated, len(tr), config.N, seed=config.seed)
    pool_images = pool_subjects = None
    if config.mode == "merged":
        keep = np.isin(generated.source, train_index)
        pool_images = np.concatenate([tr.images[train_index], generated.images[keep]])
        pool_subjects = np.concatenate([tr.subjects[train_index], generated.subjects[keep]])

    stats = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        losses = []
        if config.mode == "merged":
            order = rng.permutation(len(pool_subjects))
        else:
            order = train_index[rng.permutation(len(train_index))]
        if state is not None:
            state.epoch = epoch
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            if config.mode == "baseline":
                images, subjects = tr.images[idx], tr.subjects[idx]
            elif config.mode == "merged":
                images, subjects = pool_images[idx], pool_subjects[idx]
            else:
                batch = build_batch(idx, tr, generated, state, rng)
                images, subjects = batch.images, batch.subjects
                if pair_log is not None:
                    pair_log.append((epoch, idx, batch.records[len(idx):]))
            loss, grads, parts = model.loss_and_grads(images, np.searchsorted(classes, subjects), config.margin)
            if not np.isfinite(loss):
                raise NumericalError(f"re-id loss diverged at epoch {epoch}: {parts}")
            opt.step(grads)
            losses.append((loss, parts["ce"], parts["triplet"]))
        seconds = time.perf_counter() - t0
        mean = np.mean(losses, axis=0) if losses else np.zeros(3)
        row = {"epoch": epoch, "loss": float(mean[0]), "ce": float(mean[1]),
               "triplet": float(mean[2]), "seconds": seconds, "batches": len(losses),
               "active_partitions": None if state is None else state.active,
               "val_top1": validation_top1(model, tr, val_index)}
        stats.append(row)
        if verbose:
            print(f"epoch {epoch}: loss {row['loss']:.4f} val top-1 {row['val_top1']}")
    return TrainResult(model, stats, train_index, val_index, classes)
