"""Paired two-modality datasets: synthetic generation, file I/O, batching.

A dataset is a list of index-aligned (image feature set, text feature set)
pairs; each feature set is an (M_i, D) float64 array. The synthetic generator
plants a shared latent per pair so the two modalities are genuinely matchable,
and optionally perturbs a fraction of latents into near-duplicates of other
items ("confusers") so that hard negatives carry real signal.

File format "HNSF" (all integers little-endian):
    magic "HNSF" (4 bytes) | version u32 = 1 | n_items u32 | D_v u32 | D_t u32
    then per item:
        M u16 | M * D_v float32 | N u16 | N * D_t float32
Values are stored single-precision and widened to float64 on load, so a
write/read round trip is lossless at single precision. A plain-text loader
(one item per line: ``M;v1,v2,...;N;w1,...``) exists for debugging.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError

MAGIC = b"HNSF"
VERSION = 1
HEADER = struct.Struct("<4sIIII")
COUNT = struct.Struct("<H")


@dataclass
class PairedDataset:
    images: list[np.ndarray]
    texts: list[np.ndarray]
    d_v: int
    d_t: int
    latents: np.ndarray | None = None  # synthetic-only diagnostic, not serialized

    def __post_init__(self):
        if len(self.images) != len(self.texts):
            raise ValueError("images and texts must pair up one-to-one")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices) -> "PairedDataset":
        idx = list(indices)
        return PairedDataset(
            [self.images[i] for i in idx], [self.texts[i] for i in idx],
            self.d_v, self.d_t,
            self.latents[idx] if self.latents is not None else None)


@dataclass(frozen=True)
class SynthConfig:
    n_items: int = 2000
    latent_dim: int = 16
    d_v: int = 64
    d_t: int = 64
    regions: int = 4
    words: int = 4
    noise_sigma: float = 0.1
    confuser_fraction: float = 0.3
    confuser_perturb: float = 0.1
    seed: int = 7

    def __post_init__(self):
        for name in ("n_items", "latent_dim", "d_v", "d_t", "regions", "words"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.confuser_fraction < 1.0:
            raise ConfigError(
                f"confuser_fraction must lie in [0, 1), got {self.confuser_fraction}")
        if self.confuser_perturb < 0:
            raise ConfigError(
                f"confuser_perturb must be >= 0, got {self.confuser_perturb}")


def gen_synthetic(cfg: SynthConfig, *, maps_v: np.ndarray | None = None,
                  maps_t: np.ndarray | None = None) -> PairedDataset:
    """Deterministic synthetic paired dataset.

    Each item i draws a latent z_i ~ N(0, I_k). Image features are
    A_v[m] @ z_i + sigma * noise for m = 1..regions with fixed random mixing
    maps A_v (scaled 1/sqrt(k) so features are O(1)); text features likewise
    with A_t. confuser_fraction of the items participate in near-duplicate
    latent pairs: the designated items are paired up and the second of each
    pair copies the first's latent plus confuser_perturb * N(0, I) noise,
    so roughly that fraction of items has a semantically close non-pair.
    maps_v / maps_t override the random mixing maps (tests use identity maps).
    """
    rng = np.random.default_rng(cfg.seed)
    n, k = cfg.n_items, cfg.latent_dim
    z = rng.standard_normal((n, k))

    n_confused = int(round(cfg.confuser_fraction * n))
    pair_count = n_confused // 2
    chosen = rng.choice(n, size=2 * pair_count, replace=False)
    for a, b in zip(chosen[:pair_count], chosen[pair_count:]):
        z[b] = z[a] + cfg.confuser_perturb * rng.standard_normal(k)

    if maps_v is None:
        maps_v = rng.standard_normal((cfg.regions, cfg.d_v, k)) / np.sqrt(k)
    if maps_t is None:
        maps_t = rng.standard_normal((cfg.words, cfg.d_t, k)) / np.sqrt(k)

    # (n, M, D): one matmul per modality, then per-item noise
    img = np.einsum("mdk,nk->nmd", maps_v, z)
    txt = np.einsum("mdk,nk->nmd", maps_t, z)
    if cfg.noise_sigma > 0:
        img = img + cfg.noise_sigma * rng.standard_normal(img.shape)
        txt = txt + cfg.noise_sigma * rng.standard_normal(txt.shape)

    ds = PairedDataset([img[i] for i in range(n)], [txt[i] for i in range(n)],
                       cfg.d_v, cfg.d_t, latents=z)
    for i, (a, b) in enumerate(zip(ds.images, ds.texts)):
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise ValueError(f"non-finite features generated for item {i}")
    return ds


def write_features(path, dataset: PairedDataset) -> None:
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, len(dataset), dataset.d_v,
                             dataset.d_t))
        for img, txt in zip(dataset.images, dataset.texts):
            fh.write(COUNT.pack(img.shape[0]))
            fh.write(img.astype("<f4").tobytes())
            fh.write(COUNT.pack(txt.shape[0]))
            fh.write(txt.astype("<f4").tobytes())


def read_features(path) -> PairedDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER.size:
        raise DataFormatError("file shorter than header", byte_offset=len(blob))
    magic, version, n_items, d_v, d_t = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataFormatError(f"bad magic {magic!r}", byte_offset=0)
    if version != VERSION:
        raise DataFormatError(f"unsupported version {version}", byte_offset=4)
    off = HEADER.size
    images, texts = [], []
    for i in range(n_items):
        for dim, bucket in ((d_v, images), (d_t, texts)):
            if off + COUNT.size > len(blob):
                raise DataFormatError("truncated item count", byte_offset=off,
                                      item_index=i)
            (m,) = COUNT.unpack_from(blob, off)
            off += COUNT.size
            if m < 1:
                raise DataFormatError("item has zero feature vectors",
                                      byte_offset=off, item_index=i)
            nbytes = m * dim * 4
            if off + nbytes > len(blob):
                raise DataFormatError("truncated feature data",
                                      byte_offset=off, item_index=i)
            flat = np.frombuffer(blob, dtype="<f4", count=m * dim, offset=off)
            bucket.append(flat.reshape(m, dim).astype(np.float64))
            off += nbytes
    if off != len(blob):
        raise DataFormatError("trailing bytes after last item", byte_offset=off)
    return PairedDataset(images, texts, d_v, d_t)


def read_features_text(path) -> PairedDataset:
    """Debug loader: one item per line, ``M;v1,v2,...;N;w1,...`` with the
    image block flattened row-major. Dimensions are inferred from the first
    line and must be consistent."""
    images, texts = [], []
    d_v = d_t = None
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(";")
            if len(parts) != 4:
                raise DataFormatError(
                    f"line {lineno}: expected 'M;floats;N;floats'",
                    item_index=lineno - 1)
            try:
                m = int(parts[0])
                vs = np.array([float(x) for x in parts[1].split(",")])
                n = int(parts[2])
                ws = np.array([float(x) for x in parts[3].split(",")])
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: {exc}",
                                      item_index=lineno - 1) from None
            if m < 1 or n < 1 or vs.size % m or ws.size % n:
                raise DataFormatError(
                    f"line {lineno}: counts do not divide value lists",
                    item_index=lineno - 1)
            dv, dt = vs.size // m, ws.size // n
            if d_v is None:
                d_v, d_t = dv, dt
            elif (dv, dt) != (d_v, d_t):
                raise DataFormatError(
                    f"line {lineno}: dims {dv}/{dt} conflict with {d_v}/{d_t}",
                    item_index=lineno - 1)
            images.append(vs.reshape(m, dv))
            texts.append(ws.reshape(n, dt))
    if d_v is None:
        raise DataFormatError("empty text feature file")
    return PairedDataset(images, texts, d_v, d_t)


def batch_iter(dataset, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Epoch-deterministic shuffled index batches.

    The shuffle is keyed by (seed, epoch); a trailing batch smaller than 2 is
    dropped (batch-norm needs two rows). Every retained index appears once.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    n = len(dataset)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


def split_dataset(dataset: PairedDataset, val_items: int,
                  test_items: int) -> dict[str, PairedDataset]:
    """Deterministic positional split: test takes the tail, val the slice
    before it, train the head."""
    n = len(dataset)
    if val_items < 0 or test_items < 0 or val_items + test_items > n:
        raise ConfigError(
            f"cannot carve val={val_items} test={test_items} out of {n} items")
    cut_val = n - val_items - test_items
    cut_test = n - test_items
    return {
        "train": dataset.subset(range(cut_val)),
        "val": dataset.subset(range(cut_val, cut_test)),
        "test": dataset.subset(range(cut_test, n)),
        "all": dataset,
    }
