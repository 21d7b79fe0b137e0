"""Stage-1 data expansion: K clothes-changed inpaintings of every training image."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .diffusion import NoiseSchedule, inpaint
from .errors import ConfigError, NumericalError
from .synthdata import Dataset, one_hot


@dataclass(frozen=True, eq=False)
class GeneratedSet:
    images: np.ndarray    # (K*M, H, W) float32
    subjects: np.ndarray
    clothes: np.ndarray
    source: np.ndarray    # index into dataset.train
    variant: np.ndarray   # j in [0, K)
    k: int

    def __len__(self) -> int:
        return len(self.subjects)

    def variants_of(self, source_index: int) -> np.ndarray:
        """Record indices generated from one training image, in variant order."""
        return np.flatnonzero(self.source == source_index)

    def first_variants(self, k: int) -> "GeneratedSet":
        """The sub-set with variant index < k (a valid size-k expansion of the same sources)."""
        if not 1 <= k <= self.k:
            raise ConfigError(f"k must be in [1, {self.k}], got {k}")
        keep = self.variant < k
        return GeneratedSet(self.images[keep], self.subjects[keep], self.clothes[keep],
                            self.source[keep], self.variant[keep], int(k))

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tensorio.write_tensor(directory / "generated.dlt", self.images)
        hw = int(np.prod(self.images.shape[1:]))
        records = [{"index": i, "subject": int(self.subjects[i]), "clothes": int(self.clothes[i]),
                    "source": int(self.source[i]), "variant": int(self.variant[i]),
                    "tensor_offset": i * hw} for i in range(len(self))]
        tensorio.write_json(directory / "generated.json",
                            {"format": "ccreid-generated/1", "k": self.k, "size": len(self),
                             "records": records})
        return directory

    @classmethod
    def load(cls, directory) -> "GeneratedSet":
        directory = Path(directory)
        meta = tensorio.read_json(directory / "generated.json")
        recs = meta["records"]
        col = lambda key: np.array([r[key] for r in recs], dtype=np.int64)  # noqa: E731
        return cls(tensorio.read_tensor(directory / "generated.dlt"), col("subject"), col("clothes"),
                   col("source"), col("variant"), int(meta["k"]))


def sample_clothes_ids(all_clothes, exclude: int, K: int, rng) -> list:
    """K distinct IDs drawn uniformly without replacement from ``all_clothes - {exclude}``."""
    pool = sorted(set(int(c) for c in all_clothes))
    if K >= len(pool):
        raise ConfigError(f"need K < |C|, got K={K} with {len(pool)} clothes IDs")
    pool = np.array([c for c in pool if c != int(exclude)])
    return [int(c) for c in rng.choice(pool, size=K, replace=False)]


def source_generators(seed: int, index: int, K: int):
    """One generator for drawing the target IDs plus one per variant, keyed by (seed, index)."""
    children = np.random.SeedSequence([int(seed), int(index)]).spawn(K + 1)
    return [np.random.default_rng(c) for c in children]


def expand_dataset(dataset: Dataset, denoiser, schedule: NoiseSchedule, K: int = 10,
                   guidance=None, seed: int = 0, chunk: int = 64, checkpoint_dir=None,
                   progress=None) -> GeneratedSet:
    """Inpaint every training image K times with clothes IDs sampled from the training set.

    Sources are processed in fixed chunks of ``chunk`` images; when
    ``checkpoint_dir`` is given each finished chunk is written there and reused
    on the next call, so an interrupted run resumes where it stopped. Results
    depend only on ``seed`` and ``chunk``.
    """
    train = dataset.train
    M = len(train)
    all_clothes = dataset.train_clothes
    L = dataset.n_clothes
    if K < 1:
        raise ConfigError("K must be >= 1")
    ckpt = None if checkpoint_dir is None else Path(checkpoint_dir)
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    images = np.empty((M * K, *dataset.image_shape), dtype=np.float32)
    targets = np.empty(M * K, dtype=np.int64)
    for start in range(0, M, chunk):
        src = np.arange(start, min(M, start + chunk))
        part = None if ckpt is None else ckpt / f"chunk_{start:07d}.dlt"
        tgt = []
        rngs = []
        for i in src:
            gens = source_generators(seed, int(i), K)
            tgt.extend(sample_clothes_ids(all_clothes, int(train.clothes[i]), K, gens[0]))
            rngs.extend(gens[1:])
        tgt = np.array(tgt, dtype=np.int64)
        rows = slice(start * K, (start + len(src)) * K)
        if part is not None and part.exists():
            imgs = tensorio.read_tensor(part)
        else:
            x = np.repeat(train.images[src], K, axis=0)
            m = np.repeat(train.masks[src], K, axis=0)
            try:
                imgs = inpaint(denoiser, x, m, one_hot(tgt, L), schedule, rngs, guidance)
            except NumericalError as e:
                raise NumericalError(f"expansion failed for sources {src[0]}..{src[-1]}: {e}") from e
            if part is not None:
                tensorio.write_tensor(part, imgs)
        images[rows] = imgs
        targets[rows] = tgt
        if progress is not None:
            progress(int(src[-1]) + 1, M)
    return GeneratedSet(images, np.repeat(train.subjects, K), targets,
                        np.repeat(np.arange(M), K), np.tile(np.arange(K), M), int(K))
