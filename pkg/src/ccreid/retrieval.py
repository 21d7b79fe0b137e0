"""Cosine retrieval, clothes-changing metrics and rank-list ensembling over query variants.

Refinement follows the ensembling procedure over a query and its inpainted
variants: the query's own top-m gallery rows fix the candidate subjects and
their initial scores (each row contributes its similarity divided by the list
maximum); every variant's top-m list then adds scores, but only to subjects
already among the candidates. Similarities are clamped to [0, 1] first; a list
whose clamped maximum is 0 gives every row the value 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ProtocolError


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    feats: np.ndarray
    subjects: np.ndarray
    clothes: np.ndarray
    cameras: np.ndarray = None

    def __post_init__(self):
        if len(self.feats) < 1:
            raise ConfigError("feature matrix must have at least one row")
        norms = np.linalg.norm(self.feats, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ConfigError("feature rows must have unit L2 norm")
        object.__setattr__(self, "duplicates", duplicate_map(self.feats))

    @classmethod
    def from_raw(cls, feats, subjects, clothes, cameras=None) -> "FeatureMatrix":
        feats = np.asarray(feats, dtype=np.float64)
        return cls(normalize(feats), np.asarray(subjects), np.asarray(clothes),
                   None if cameras is None else np.asarray(cameras))

    def __len__(self) -> int:
        return len(self.feats)


def duplicate_map(feats):
    """Row -> first row with identical features, or None when every row is distinct.

    BLAS blocks rows, so two identical gallery rows can get similarities one
    ulp apart depending on where they sit; copying the first row's value keeps
    the lower-index tie rule exact.
    """
    feats = np.asarray(feats)
    _, first, inverse = np.unique(feats, axis=0, return_index=True, return_inverse=True)
    if len(first) == len(feats):
        return None
    return first[inverse.ravel()]


def _tie_duplicates(sims, dup):
    return sims if dup is None else sims[..., dup]


def normalize(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def embed(model, images, subjects=None, clothes=None, cameras=None) -> FeatureMatrix:
    images = np.asarray(images)
    n = len(images)
    feats = model.embed(images)
    fill = lambda a: np.full(n, -1) if a is None else np.asarray(a)  # noqa: E731
    return FeatureMatrix(feats, fill(subjects), fill(clothes), fill(cameras))


@dataclass(frozen=True)
class Protocol:
    """Clothes-changing protocol: same-subject same-clothes gallery rows are discarded."""
    mode: str = "clothes-changing"

    def eligible(self, q_subjects, q_clothes, g_subjects, g_clothes) -> np.ndarray:
        q_subjects, q_clothes = np.atleast_1d(q_subjects), np.atleast_1d(q_clothes)
        same_s = q_subjects[:, None] == np.asarray(g_subjects)[None, :]
        same_c = q_clothes[:, None] == np.asarray(g_clothes)[None, :]
        return ~(same_s & same_c)


# -- ranking --------------------------------------------------------------------

def _gallery_feats(gallery):
    return gallery.feats if isinstance(gallery, FeatureMatrix) else np.asarray(gallery, np.float64)


def top_m(query, gallery, m: int) -> np.ndarray:
    """Indices of the m most cosine-similar gallery rows, ties to the lower index."""
    g = _gallery_feats(gallery)
    if m > len(g):
        raise ConfigError(f"m={m} exceeds gallery size {len(g)}")
    g = normalize(g)
    dup = gallery.duplicates if isinstance(gallery, FeatureMatrix) else duplicate_map(g)
    sims = _tie_duplicates(g @ normalize(query), dup)
    return np.argsort(-sims, kind="stable")[:m]


def top_m_batch(sims, m: int):
    """Row-wise top-m of a similarity matrix with the same tie rule as ``top_m``.

    Entries equal to -inf are never returned: rows with fewer finite entries
    than m are padded with index -1. Returns (indices, values).
    """
    sims = np.asarray(sims)
    q, n = sims.shape
    m_eff = min(m, n)
    if m_eff == n:
        idx = np.argsort(-sims, axis=1, kind="stable")
    else:
        part = np.argpartition(-sims, m_eff - 1, axis=1)[:, :m_eff]
        vals = np.take_along_axis(sims, part, axis=1)
        kth = vals.min(axis=1)
        # argpartition picks arbitrarily among ties at the boundary
        tied = np.flatnonzero((sims >= kth[:, None]).sum(axis=1) > m_eff)
        order = np.lexsort((part, -vals), axis=1)
        idx = np.take_along_axis(part, order, axis=1)
        if len(tied):
            idx[tied] = np.argsort(-sims[tied], axis=1, kind="stable")[:, :m_eff]
    vals = np.take_along_axis(sims, idx, axis=1)
    idx = np.where(np.isneginf(vals), -1, idx)
    if m_eff < m:
        pad = np.full((q, m - m_eff), -1)
        idx = np.concatenate([idx, pad], axis=1)
        vals = np.concatenate([vals, np.full((q, m - m_eff), -np.inf)], axis=1)
    return idx, vals


def _normalized_contributions(vals):
    """Clamp similarities to [0, 1] and divide by the per-list maximum (0/0 := 1).

    ``vals`` is (..., m), sorted descending along the last axis, with -inf for
    padding; padded entries get 0.
    """
    finite = np.isfinite(vals)
    c = np.clip(np.where(finite, vals, 0.0), 0.0, 1.0)
    mx = c.max(axis=-1, keepdims=True)
    safe = np.where(mx > 0, mx, 1.0)
    out = np.where(mx > 0, c / safe, 1.0)
    return np.where(finite, out, 0.0)


# -- refinement ---------------------------------------------------------------

@dataclass
class ScoreTable:
    scores: dict = field(default_factory=dict)

    def predict(self) -> int:
        best = max(self.scores.values())
        return min(s for s, v in self.scores.items() if v == best)


def refine(query_feat, variant_feats, gallery: FeatureMatrix, m: int, eligible=None) -> ScoreTable:
    """Ensembled subject scores for one query and its variants.

    ``eligible`` optionally masks gallery rows; fewer than m eligible rows
    shrink every list to the eligible count.
    """
    g = gallery.feats
    if len(g) == 0:
        raise ConfigError("empty gallery")
    if m > len(g):
        raise ConfigError(f"m={m} exceeds gallery size {len(g)}")
    variant_feats = np.asarray(variant_feats, dtype=np.float64).reshape(-1, g.shape[1])
    vecs = normalize(np.vstack([np.asarray(query_feat, dtype=np.float64)[None], variant_feats]))
    sims = _tie_duplicates(vecs @ g.T, gallery.duplicates)
    if eligible is not None:
        sims = np.where(np.asarray(eligible)[None, :], sims, -np.inf)
    idx, vals = top_m_batch(sims, m)
    table = _score_lists(idx[None], vals[None], np.asarray(gallery.subjects))
    return ScoreTable({int(s): float(v) for s, v in zip(*table)})


def _score_lists(idx, vals, gallery_subjects):
    """Scores for a batch of queries; idx/vals are (q, 1 + l, m).

    Returns (candidates, scores) for a single query when q == 1, where
    ``candidates`` lists each subject once, in first-appearance order.
    """
    cand_all, score_all = _score_lists_batch(idx, vals, gallery_subjects)
    cand, score = cand_all[0], score_all[0]
    keep = cand >= 0
    seen, out_c, out_s = set(), [], []
    for c, s in zip(cand[keep], score[keep]):
        if int(c) not in seen:
            seen.add(int(c))
            out_c.append(int(c))
            out_s.append(float(s))
    return out_c, out_s


def _score_lists_batch(idx, vals, gallery_subjects):
    """Vectorised scoring; returns candidate subjects (q, m) (-1 = padding) and scores (q, m).

    Sums run in list order and, within a list, in rank order, so results are
    bit-identical to a sequential implementation.
    """
    subj = np.where(idx >= 0, np.asarray(gallery_subjects)[np.maximum(idx, 0)], -1)
    contrib = _normalized_contributions(vals)
    cand = subj[:, 0, :]
    q, n_lists, m = subj.shape
    score = np.zeros(cand.shape)
    for k in range(n_lists):
        part = np.zeros(cand.shape)
        for p in range(m):
            hit = (subj[:, k, p][:, None] == cand) & (cand >= 0)
            part = part + np.where(hit, contrib[:, k, p][:, None], 0.0)
        score = score + part
    return cand, score


def _predict(cand, score):
    valid = cand >= 0
    s = np.where(valid, score, -np.inf)
    best = s.max(axis=1, keepdims=True)
    big = np.iinfo(np.int64).max
    return np.where(valid & (s == best), cand, big).min(axis=1)


def refine_batch(query_feats, variant_feats, gallery: FeatureMatrix, m: int, eligible=None,
                 chunk: int = 128, dtype=np.float64) -> np.ndarray:
    """Refined subject predictions for many queries; variant_feats is (q, l, d).

    ``eligible`` is an optional (q, n) boolean mask.
    """
    q_feats = normalize(query_feats)
    v_feats = normalize(variant_feats).reshape(len(q_feats), -1, q_feats.shape[1])
    g = gallery.feats.astype(dtype, copy=False)
    subjects = np.asarray(gallery.subjects)
    if m > len(g):
        raise ConfigError(f"m={m} exceeds gallery size {len(g)}")
    n_lists = 1 + v_feats.shape[1]
    preds = np.empty(len(q_feats), dtype=np.int64)
    for start in range(0, len(q_feats), chunk):
        stop = min(len(q_feats), start + chunk)
        vecs = np.concatenate([q_feats[start:stop, None, :], v_feats[start:stop]], axis=1)
        sims = _tie_duplicates(vecs.reshape(-1, g.shape[1]).astype(dtype, copy=False) @ g.T,
                               gallery.duplicates)
        if eligible is not None:
            el = np.repeat(np.asarray(eligible)[start:stop], n_lists, axis=0)
            sims = np.where(el, sims, -np.inf)
        idx, vals = top_m_batch(sims, m)
        shape = (stop - start, n_lists, m)
        cand, score = _score_lists_batch(idx.reshape(shape), vals.reshape(shape).astype(np.float64),
                                         subjects)
        preds[start:stop] = _predict(cand, score)
    return preds


# -- metrics ------------------------------------------------------------------

@dataclass
class Refinement:
    variant_feats: np.ndarray   # (n_query, l, d)
    m: int = 5

    @property
    def l(self) -> int:
        return int(self.variant_feats.shape[1])


@dataclass
class MetricsReport:
    top1: float
    mAP: float
    n_query: int
    n_gallery: int
    protocol: str
    refinement: dict | None = None

    def to_dict(self) -> dict:
        return {"top1": self.top1, "mAP": self.mAP, "n_query": self.n_query,
                "n_gallery": self.n_gallery, "protocol": self.protocol,
                "refinement": self.refinement}


def average_precision(matches) -> float:
    matches = np.asarray(matches, dtype=bool)
    hits = np.flatnonzero(matches)
    if len(hits) == 0:
        return 0.0
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def evaluate(query: FeatureMatrix, gallery: FeatureMatrix, protocol: Protocol | None = None,
             refinement: Refinement | None = None) -> MetricsReport:
    """Top-1 and mAP over eligible gallery rows.

    With ``refinement``, top-1 uses the refined subject prediction; mAP always
    comes from the plain cosine ranking.
    """
    protocol = Protocol() if protocol is None else protocol
    eligible = protocol.eligible(query.subjects, query.clothes, gallery.subjects, gallery.clothes)
    true = query.subjects[:, None] == gallery.subjects[None, :]
    sims = _tie_duplicates(query.feats @ gallery.feats.T, gallery.duplicates)
    top1, aps = [], []
    for i in range(len(query)):
        rows = np.flatnonzero(eligible[i])
        if not np.any(true[i, rows]):
            raise ProtocolError(f"query {i} (subject {query.subjects[i]}) has no eligible true match")
        order = rows[np.argsort(-sims[i, rows], kind="stable")]
        matches = true[i, order]
        aps.append(average_precision(matches))
        top1.append(bool(matches[0]))
    ref = None
    if refinement is not None:
        if refinement.variant_feats.shape[0] != len(query):
            raise ConfigError("need one set of variant features per query")
        m = min(refinement.m, int(eligible.sum(axis=1).min()))
        preds = refine_batch(query.feats, refinement.variant_feats, gallery, m, eligible=eligible)
        top1 = list(preds == query.subjects)
        ref = {"l": refinement.l, "m": refinement.m}
    return MetricsReport(float(np.mean(top1)), float(np.mean(aps)), len(query), len(gallery),
                         protocol.mode, ref)


# -- query variants -------------------------------------------------------------

def make_variants(query, dataset, denoiser, schedule, l: int, rng, guidance=None) -> list:
    """l inpainted versions of one query sample with distinct training clothes IDs."""
    from .diffusion import inpaint
    from .expansion import sample_clothes_ids
    from .synthdata import mask_for, one_hot

    if l == 0:
        return []
    ids = sample_clothes_ids(dataset.train_clothes, query.clothes, l, rng)
    mask = mask_for(query, dataset)
    x = np.repeat(np.asarray(query.image)[None], l, axis=0)
    out = inpaint(denoiser, x, np.repeat(mask[None], l, axis=0), one_hot(ids, dataset.n_clothes),
                  schedule, rng, guidance)
    return list(out)


def make_query_variants(dataset, denoiser, schedule, l: int, seed: int = 0, guidance=None,
                        chunk: int = 64) -> np.ndarray:
    """Variants for every query, shape (n_query, l, H, W); per-query generators keyed by (seed, index)."""
    from .diffusion import inpaint
    from .expansion import sample_clothes_ids, source_generators
    from .synthdata import one_hot

    qs = dataset.query
    out = np.empty((len(qs), l, *dataset.image_shape), dtype=np.float32)
    if l == 0:
        return out
    if l >= len(dataset.train_clothes):
        raise ConfigError(f"need l < |C| = {len(dataset.train_clothes)}, got l={l}")
    for start in range(0, len(qs), chunk):
        src = np.arange(start, min(len(qs), start + chunk))
        ids, rngs = [], []
        for i in src:
            gens = source_generators(seed, int(i), l)
            ids.extend(sample_clothes_ids(dataset.train_clothes, int(qs.clothes[i]), l, gens[0]))
            rngs.extend(gens[1:])
        x = np.repeat(qs.images[src], l, axis=0)
        msk = np.repeat(qs.masks[src], l, axis=0)
        imgs = inpaint(denoiser, x, msk, one_hot(ids, dataset.n_clothes), schedule, rngs, guidance)
        out[src] = imgs.reshape(len(src), l, *dataset.image_shape)
    return out
