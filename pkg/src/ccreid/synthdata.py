"""Synthetic clothes-changing re-identification benchmark.

Each image is a ground-truth composite: identity prototype outside a clothing
band, clothes prototype inside it, plus a per-camera brightness offset and
Gaussian observation noise. Training and test identities are disjoint; test
identities are split into a query set (one outfit per subject) and a gallery
(the remaining outfits), so every query must be matched across a clothes change.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import ConfigError


@dataclass(frozen=True)
class DatasetSpec:
    subjects: int = 20
    clothes_per_subject: int = 4
    images_per_pair: int = 5
    cameras: int = 2
    noise_std: float = 0.05
    seed: int = 0
    mask_jitter: int = 1
    # held-out identities used for query/gallery
    test_subjects: int = 40
    height: int = 16
    width: int = 16
    band: tuple = (5, 13)  # inclusive rows of the clothing region before jitter
    camera_bias: float = 0.1
    identity_freqs: int = 3
    clothes_freqs: int = 4
    identity_amplitude: float = 0.15
    clothes_amplitude: float = 0.5

    def validate(self) -> None:
        for name in ("subjects", "images_per_pair", "cameras", "test_subjects",
                     "height", "width", "identity_freqs", "clothes_freqs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.clothes_per_subject < 2:
            raise ConfigError("clothes_per_subject must be >= 2 so query and gallery outfits differ")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.mask_jitter < 0:
            raise ConfigError("mask_jitter must be >= 0")
        lo, hi = self.band
        if not (0 <= lo - self.mask_jitter and hi + self.mask_jitter < self.height and lo <= hi):
            raise ConfigError(f"band {self.band} with jitter {self.mask_jitter} leaves the image")
        if hi - lo + 1 + 2 * self.mask_jitter >= self.height:
            raise ConfigError("band must leave at least one identity row")

    @property
    def n_train_clothes(self) -> int:
        return self.subjects * self.clothes_per_subject

    def to_dict(self) -> dict:
        d = asdict(self)
        d["band"] = list(self.band)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        if "band" in d:
            d["band"] = tuple(d["band"])
        return cls(**d)


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    subject: int
    clothes: int
    camera: int
    split: str = "train"
    index: int = -1


@dataclass(frozen=True)
class ClothesDescriptor:
    clothes: int
    code: np.ndarray


@dataclass(frozen=True, eq=False)
class Split:
    name: str
    images: np.ndarray   # (N, H, W) float32
    masks: np.ndarray    # (N, H, W) bool, True = clothing
    subjects: np.ndarray
    clothes: np.ndarray
    cameras: np.ndarray
    jitter: np.ndarray

    def __len__(self) -> int:
        return len(self.subjects)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.subjects[i]), int(self.clothes[i]),
                      int(self.cameras[i]), self.name, int(i))

    def samples(self):
        return [self[i] for i in range(len(self))]

    def subset(self, idx, name=None) -> "Split":
        idx = np.asarray(idx, dtype=np.int64)
        return Split(name or self.name, self.images[idx], self.masks[idx], self.subjects[idx],
                     self.clothes[idx], self.cameras[idx], self.jitter[idx])


@dataclass(frozen=True, eq=False)
class Dataset:
    spec: DatasetSpec
    train: Split
    query: Split
    gallery: Split
    identity_prototypes: np.ndarray  # (subjects + test_subjects, H, W)
    clothes_prototypes: np.ndarray   # (all clothes IDs, H, W)
    camera_offsets: np.ndarray
    splits: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.splits.update(train=self.train, query=self.query, gallery=self.gallery)

    @property
    def n_clothes(self) -> int:
        """Size L of the conditioning codebook, i.e. the training clothes IDs."""
        return self.spec.n_train_clothes

    @property
    def train_clothes(self) -> np.ndarray:
        return np.arange(self.n_clothes)

    @property
    def image_shape(self) -> tuple:
        return (self.spec.height, self.spec.width)


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _smooth_fields(rng, n, h, w, freqs, amplitude):
    """Random images spanned by the lowest ``freqs``x``freqs`` cosine modes."""
    rows = np.cos(np.pi * np.arange(freqs)[:, None] * (np.arange(h)[None, :] + 0.5) / h)
    cols = np.cos(np.pi * np.arange(freqs)[:, None] * (np.arange(w)[None, :] + 0.5) / w)
    basis = np.einsum("ai,bj->abij", rows, cols).reshape(freqs * freqs, h, w)
    coef = rng.standard_normal((n, freqs * freqs))
    fields = np.einsum("nk,kij->nij", coef, basis)
    fields -= fields.mean(axis=(1, 2), keepdims=True)
    fields /= fields.std(axis=(1, 2), keepdims=True) + 1e-12
    return np.clip(amplitude * fields, -0.95, 0.95)


def band_mask(spec: DatasetSpec, jitter: int) -> np.ndarray:
    m = np.zeros((spec.height, spec.width), dtype=bool)
    lo, hi = spec.band
    m[lo + jitter:hi + jitter + 1, :] = True
    return m


def _render(spec, rng, subjects, clothes, id_protos, cl_protos, offsets):
    n = len(subjects)
    cams = rng.integers(0, spec.cameras, size=n)
    jit = rng.integers(-spec.mask_jitter, spec.mask_jitter + 1, size=n)
    masks = np.stack([band_mask(spec, int(j)) for j in jit]) if n else np.zeros((0, spec.height, spec.width), bool)
    noise = rng.standard_normal((n, spec.height, spec.width)) * spec.noise_std
    base = np.where(masks, cl_protos[clothes], id_protos[subjects])
    images = np.clip(base + offsets[cams][:, None, None] + noise, -1.0, 1.0).astype(np.float32)
    return images, masks, cams, jit


def _make_split(name, spec, rng, subjects, clothes, id_protos, cl_protos, offsets):
    images, masks, cams, jit = _render(spec, rng, subjects, clothes, id_protos, cl_protos, offsets)
    return Split(name, _frozen(images), _frozen(masks), _frozen(subjects.astype(np.int64)),
                 _frozen(clothes.astype(np.int64)), _frozen(cams.astype(np.int64)),
                 _frozen(jit.astype(np.int64)))


def gen_dataset(spec: DatasetSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    S, T, C, P = spec.subjects, spec.test_subjects, spec.clothes_per_subject, spec.images_per_pair
    id_protos = _smooth_fields(rng, S + T, spec.height, spec.width, spec.identity_freqs,
                               spec.identity_amplitude)
    cl_protos = _smooth_fields(rng, (S + T) * C, spec.height, spec.width, spec.clothes_freqs,
                               spec.clothes_amplitude)
    offsets = rng.uniform(-spec.camera_bias, spec.camera_bias, size=spec.cameras).astype(np.float32)

    # subject s owns clothes IDs s*C .. s*C + C - 1
    tr_s = np.repeat(np.arange(S), C * P)
    tr_c = np.repeat(np.arange(S * C), P)
    train = _make_split("train", spec, rng, tr_s, tr_c, id_protos, cl_protos, offsets)

    te_subjects = np.arange(S, S + T)
    query_outfit = rng.integers(0, C, size=T)
    q_s, q_c, g_s, g_c = [], [], [], []
    for s, qk in zip(te_subjects, query_outfit):
        for k in range(C):
            c = s * C + k
            (q_s if k == qk else g_s).extend([s] * P)
            (q_c if k == qk else g_c).extend([c] * P)
    query = _make_split("query", spec, rng, np.array(q_s), np.array(q_c), id_protos, cl_protos, offsets)
    gallery = _make_split("gallery", spec, rng, np.array(g_s), np.array(g_c), id_protos, cl_protos, offsets)
    return Dataset(spec, train, query, gallery, _frozen(id_protos.astype(np.float32)),
                   _frozen(cl_protos.astype(np.float32)), _frozen(offsets))


def mask_for(sample: Sample, dataset: Dataset) -> np.ndarray:
    split = dataset.splits.get(sample.split)
    if split is None or not (0 <= sample.index < len(split)):
        raise LookupError(f"sample {sample.split}[{sample.index}] is not part of this dataset")
    if (int(split.subjects[sample.index]) != sample.subject
            or int(split.clothes[sample.index]) != sample.clothes):
        raise LookupError(f"sample {sample.split}[{sample.index}] labels do not match the dataset")
    return split.masks[sample.index]


def descriptor_for(clothes: int, dataset: Dataset) -> ClothesDescriptor:
    return make_descriptor(clothes, dataset.n_clothes)


def make_descriptor(clothes: int, n_clothes: int) -> ClothesDescriptor:
    if not 0 <= int(clothes) < n_clothes:
        raise ConfigError(f"clothes ID {clothes} outside [0, {n_clothes})")
    code = np.zeros(n_clothes)
    code[int(clothes)] = 1.0
    code.setflags(write=False)
    return ClothesDescriptor(int(clothes), code)


def one_hot(clothes, n_clothes: int) -> np.ndarray:
    clothes = np.asarray(clothes, dtype=np.int64)
    if clothes.size and (clothes.min() < 0 or clothes.max() >= n_clothes):
        raise ConfigError(f"clothes IDs outside [0, {n_clothes})")
    out = np.zeros(clothes.shape + (n_clothes,))
    np.put_along_axis(out, clothes[..., None], 1.0, axis=-1)
    return out


def region_correlation(images, protos, masks) -> np.ndarray:
    """Pearson correlation over masked cells between each image and each prototype.

    Returns shape (n_images, n_prototypes).
    """
    images = np.asarray(images, dtype=np.float64)
    protos = np.asarray(protos, dtype=np.float64)
    out = np.empty((len(images), len(protos)))
    for i, (x, m) in enumerate(zip(images, masks)):
        a = x[m] - x[m].mean()
        b = protos[:, m]
        b = b - b.mean(axis=1, keepdims=True)
        out[i] = (b @ a) / (np.linalg.norm(b, axis=1) * np.linalg.norm(a) + 1e-12)
    return out


# -- serialization ---------------------------------------------------------

def save_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    hw = dataset.spec.height * dataset.spec.width
    manifest = {"format": "ccreid-dataset/1", "spec": dataset.spec.to_dict(), "splits": {}}
    for name, split in dataset.splits.items():
        tensorio.write_tensor(directory / f"{name}.dlt", split.images)
        tensorio.write_tensor(directory / f"{name}_masks.dlt", split.masks.astype(np.float32))
        manifest["splits"][name] = {
            "size": len(split),
            "records": [
                {"index": i, "subject": int(split.subjects[i]), "clothes": int(split.clothes[i]),
                 "camera": int(split.cameras[i]), "jitter": int(split.jitter[i]),
                 "tensor_offset": i * hw}
                for i in range(len(split))
            ],
        }
    tensorio.write_tensor(directory / "identity_prototypes.dlt", dataset.identity_prototypes)
    tensorio.write_tensor(directory / "clothes_prototypes.dlt", dataset.clothes_prototypes)
    tensorio.write_tensor(directory / "camera_offsets.dlt", dataset.camera_offsets)
    tensorio.write_json(directory / "dataset.json", manifest)
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = tensorio.read_json(directory / "dataset.json")
    spec = DatasetSpec.from_dict(manifest["spec"])
    splits = {}
    for name, info in manifest["splits"].items():
        recs = info["records"]
        col = lambda k: _frozen(np.array([r[k] for r in recs], dtype=np.int64))  # noqa: E731
        images = tensorio.read_tensor(directory / f"{name}.dlt")
        masks = tensorio.read_tensor(directory / f"{name}_masks.dlt") > 0.5
        splits[name] = Split(name, _frozen(images), _frozen(masks), col("subject"), col("clothes"),
                             col("camera"), col("jitter"))
    return Dataset(spec, splits["train"], splits["query"], splits["gallery"],
                   _frozen(tensorio.read_tensor(directory / "identity_prototypes.dlt")),
                   _frozen(tensorio.read_tensor(directory / "clothes_prototypes.dlt")),
                   _frozen(tensorio.read_tensor(directory / "camera_offsets.dlt")))
