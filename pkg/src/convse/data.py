"""Precomputed feature tables, image/caption pairing, splits and batching.

On-disk layout of a dataset directory::

    images.fvt     image features   (binary, see ``write_feature_file``)
    captions.fvt   caption features
    pairs.tsv      caption_id<TAB>image_id, one line per caption
    splits.tsv     image_id<TAB>train|val|test, one line per image
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (ChecksumError, ConfigError, DataError, DuplicateIdError, FormatError,
                     TruncatedFileError, VersionError)
from .numerics import make_rng

FEATURE_MAGIC = b"FVT1"
FEATURE_VERSION = 1
SPLITS = ("train", "val", "test")

IMAGES_FILE = "images.fvt"
CAPTIONS_FILE = "captions.fvt"
PAIRS_FILE = "pairs.tsv"
SPLITS_FILE = "splits.tsv"


@dataclass
class FeatureTable:
    ids: list[str]
    feats: np.ndarray

    def __post_init__(self):
        self.feats = np.asarray(self.feats, dtype=np.float64)
        if self.feats.ndim != 2:
            raise DataError(f"feature matrix must be 2-D, got shape {self.feats.shape}")
        if len(self.ids) != self.feats.shape[0]:
            raise DataError(f"{len(self.ids)} ids for {self.feats.shape[0]} feature rows")
        seen = set()
        for ident in self.ids:
            if ident in seen:
                raise DuplicateIdError(ident)
            seen.add(ident)
        if not np.all(np.isfinite(self.feats)):
            raise DataError("feature table contains non-finite values")

    @property
    def dim(self) -> int:
        return self.feats.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def index(self) -> dict[str, int]:
        return {ident: i for i, ident in enumerate(self.ids)}


def encode_feature_table(table: FeatureTable) -> bytes:
    rows, dim = table.feats.shape
    parts = [FEATURE_MAGIC, struct.pack("<IQQ", FEATURE_VERSION, rows, dim)]
    data = np.ascontiguousarray(table.feats, dtype="<f8")
    for ident, row in zip(table.ids, data):
        encoded = ident.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise DataError(f"id too long: {ident[:32]!r}...")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(row.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_feature_table(data: bytes) -> FeatureTable:
    if data[:4] != FEATURE_MAGIC:
        raise FormatError("not a feature file (bad magic)")
    header = 4 + struct.calcsize("<IQQ")
    if len(data) < header + 4:
        raise TruncatedFileError("feature file header is incomplete")
    version, rows, dim = struct.unpack_from("<IQQ", data, 4)
    if version != FEATURE_VERSION:
        raise VersionError(version, FEATURE_VERSION)
    end = len(data) - 4
    pos = header
    ids, chunks = [], []
    row_bytes = 8 * dim
    for r in range(rows):
        if pos + 2 > end:
            raise TruncatedFileError(f"file declares {rows} rows but ends after {r}")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + n + row_bytes > end:
            raise TruncatedFileError(f"file declares {rows} rows but ends after {r}")
        ids.append(data[pos:pos + n].decode("utf-8"))
        pos += n
        chunks.append(data[pos:pos + row_bytes])
        pos += row_bytes
    if pos != end:
        raise FormatError(f"{end - pos} unexpected trailing bytes after {rows} rows")
    (stored,) = struct.unpack("<I", data[end:])
    if zlib.crc32(data[:end]) != stored:
        raise ChecksumError("feature file CRC-32 mismatch")
    feats = np.frombuffer(b"".join(chunks), dtype="<f8").astype(np.float64).reshape(rows, dim)
    if not np.all(np.isfinite(feats)):
        raise DataError("feature file contains non-finite values")
    return FeatureTable(ids, feats)


def write_feature_file(table: FeatureTable, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_feature_table(table))
    return path


def load_feature_file(path) -> FeatureTable:
    return decode_feature_table(Path(path).read_bytes())


def _read_tsv(path, what: str) -> list[tuple[str, str]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{what} line {lineno}: expected two tab-separated fields")
        rows.append((parts[0], parts[1]))
    return rows


@dataclass
class PairedDataset:
    images: FeatureTable
    captions: FeatureTable
    caption_to_image: dict[str, str]
    split: dict[str, str]
    # derived
    cap_img_rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        img_index = self.images.index()
        if set(self.caption_to_image) != set(self.captions.ids):
            missing = set(self.captions.ids) - set(self.caption_to_image)
            extra = set(self.caption_to_image) - set(self.captions.ids)
            raise DataError(f"pairing does not cover the caption table "
                            f"(unpaired: {sorted(missing)[:3]}, unknown: {sorted(extra)[:3]})")
        rows = []
        for cap in self.captions.ids:
            img = self.caption_to_image[cap]
            if img not in img_index:
                raise DataError(f"caption {cap!r} maps to unknown image {img!r}")
            rows.append(img_index[img])
        self.cap_img_rows = np.asarray(rows, dtype=np.int64)
        counts = np.bincount(self.cap_img_rows, minlength=len(self.images))
        if np.any(counts == 0):
            raise DataError(f"image {self.images.ids[int(np.argmin(counts))]!r} has no captions")
        for img in self.images.ids:
            if img not in self.split:
                raise DataError(f"image {img!r} has no split assignment")
            if self.split[img] not in SPLITS:
                raise DataError(f"image {img!r} has unknown split {self.split[img]!r}")

    def caption_split(self, caption_id: str) -> str:
        return self.split[self.caption_to_image[caption_id]]

    def image_rows(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        return np.asarray([i for i, ident in enumerate(self.images.ids) if self.split[ident] == split],
                          dtype=np.int64)

    def pair_rows(self, split: str) -> np.ndarray:
        """Caption rows whose image belongs to ``split``."""
        keep = np.zeros(len(self.images), dtype=bool)
        keep[self.image_rows(split)] = True
        return np.flatnonzero(keep[self.cap_img_rows])

    def subset(self, image_rows) -> "PairedDataset":
        """Dataset restricted to the given images and their captions."""
        image_rows = np.asarray(image_rows, dtype=np.int64)
        keep = np.zeros(len(self.images), dtype=bool)
        keep[image_rows] = True
        cap_rows = np.flatnonzero(keep[self.cap_img_rows])
        img_ids = [self.images.ids[i] for i in image_rows]
        cap_ids = [self.captions.ids[c] for c in cap_rows]
        return PairedDataset(
            FeatureTable(img_ids, self.images.feats[image_rows]),
            FeatureTable(cap_ids, self.captions.feats[cap_rows]),
            {c: self.caption_to_image[c] for c in cap_ids},
            {i: self.split[i] for i in img_ids},
        )

    def split_view(self, split: str) -> "PairedDataset":
        rows = self.image_rows(split)
        if rows.size == 0:
            raise DataError(f"split {split!r} is empty")
        return self.subset(rows)


def load_dataset(features_img, features_txt, pairs, splits) -> PairedDataset:
    images = load_feature_file(features_img)
    captions = load_feature_file(features_txt)
    cap_to_img = {}
    for cap, img in _read_tsv(pairs, "pairing file"):
        if cap in cap_to_img:
            raise DuplicateIdError(cap)
        cap_to_img[cap] = img
    split = {}
    for img, name in _read_tsv(splits, "split file"):
        if img in split:
            raise DuplicateIdError(img)
        split[img] = name
    return PairedDataset(images, captions, cap_to_img, split)


def dataset_paths(directory) -> dict[str, Path]:
    d = Path(directory)
    return {"features_img": d / IMAGES_FILE, "features_txt": d / CAPTIONS_FILE,
            "pairs": d / PAIRS_FILE, "splits": d / SPLITS_FILE}


def load_dataset_dir(directory) -> PairedDataset:
    paths = dataset_paths(directory)
    for p in paths.values():
        if not p.is_file():
            raise DataError(f"missing dataset file {p}")
    return load_dataset(**paths)


def write_dataset(ds: PairedDataset, directory) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if not os.access(d, os.W_OK):
        raise DataError(f"directory {d} is not writable")
    paths = dataset_paths(d)
    write_feature_file(ds.images, paths["features_img"])
    write_feature_file(ds.captions, paths["features_txt"])
    paths["pairs"].write_text("".join(f"{c}\t{ds.caption_to_image[c]}\n" for c in ds.captions.ids),
                              encoding="utf-8")
    paths["splits"].write_text("".join(f"{i}\t{ds.split[i]}\n" for i in ds.images.ids), encoding="utf-8")
    return paths


@dataclass
class MiniBatch:
    image_rows: np.ndarray
    caption_rows: np.ndarray
    image_feats: np.ndarray
    text_feats: np.ndarray

    def __len__(self) -> int:
        return len(self.caption_rows)

    @property
    def groups(self) -> np.ndarray:
        """Image row per pair; equal entries mean captions of the same image."""
        return self.image_rows


def make_batches(ds: PairedDataset, split: str, batch_size: int, rng: np.random.Generator) -> Iterator[MiniBatch]:
    """One shuffled epoch over the (image, caption) pairs of ``split``.

    The trailing partial batch is dropped, so every batch has exactly
    ``batch_size`` pairs.
    """
    if batch_size < 2:
        raise ConfigError(f"batch size must be at least 2, got {batch_size}")
    pairs = ds.pair_rows(split)
    if pairs.size == 0:
        raise DataError(f"split {split!r} has no pairs")
    order = pairs[rng.permutation(pairs.size)]
    for start in range(0, order.size, batch_size):
        caps = order[start:start + batch_size]
        if caps.size < batch_size:
            break
        imgs = ds.cap_img_rows[caps]
        yield MiniBatch(imgs, caps, ds.images.feats[imgs], ds.captions.feats[caps])


@dataclass(frozen=True)
class SynthConfig:
    latent_dim: int = 16
    img_dim: int = 64
    txt_dim: int = 48
    n_images: int = 1000
    captions_per_image: int = 5
    noise: float = 0.1
    seed: int = 0
    # "random": Gaussian maps scaled by 1/sqrt(latent_dim); "identity": requires equal dims
    maps: str = "random"

    def __post_init__(self):
        for name in ("latent_dim", "img_dim", "txt_dim", "captions_per_image"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_images < 2:
            raise ConfigError("need at least 2 images")
        if not self.noise >= 0:
            raise ConfigError("noise must be >= 0")
        if self.maps not in ("random", "identity"):
            raise ConfigError(f"unknown map kind {self.maps!r}")
        if self.maps == "identity" and not (self.latent_dim == self.img_dim == self.txt_dim):
            raise ConfigError("identity maps need latent_dim == img_dim == txt_dim")


def split_counts(n_images: int) -> tuple[int, int, int]:
    n_train = int(round(0.8 * n_images))
    n_val = int(round(0.1 * n_images))
    return n_train, n_val, n_images - n_train - n_val


def synth_generate(cfg: SynthConfig) -> PairedDataset:
    """Paired features from a shared Gaussian latent per image."""
    rng = make_rng(cfg.seed)
    k, m = cfg.latent_dim, cfg.n_images
    if cfg.maps == "identity":
        A, B = np.eye(k), np.eye(k)
    else:
        A = rng.standard_normal((cfg.img_dim, k)) / np.sqrt(k)
        B = rng.standard_normal((cfg.txt_dim, k)) / np.sqrt(k)
    U = rng.standard_normal((m, k))
    img = U @ A.T + cfg.noise * rng.standard_normal((m, cfg.img_dim))
    U_rep = np.repeat(U, cfg.captions_per_image, axis=0)
    txt = U_rep @ B.T + cfg.noise * rng.standard_normal((m * cfg.captions_per_image, cfg.txt_dim))

    width = max(5, len(str(m - 1)))
    img_ids = [f"img{i:0{width}d}" for i in range(m)]
    cap_ids = [f"{img_ids[i]}#{j}" for i in range(m) for j in range(cfg.captions_per_image)]
    n_train, n_val, _ = split_counts(m)
    split = {ident: ("train" if i < n_train else "val" if i < n_train + n_val else "test")
             for i, ident in enumerate(img_ids)}
    return PairedDataset(FeatureTable(img_ids, img), FeatureTable(cap_ids, txt),
                         {c: c.split("#")[0] for c in cap_ids}, split)


def folds(ds: PairedDataset, split: str, fold_size: int) -> list[PairedDataset]:
    """Consecutive blocks of ``fold_size`` images (id order) from ``split``."""
    rows = ds.image_rows(split)
    order = rows[np.argsort([ds.images.ids[r] for r in rows], kind="stable")]
    if fold_size < 1 or fold_size > order.size:
        raise ConfigError(f"fold size {fold_size} exceeds the {order.size}-image {split} split")
    n_folds = order.size // fold_size
    return [ds.subset(order[i * fold_size:(i + 1) * fold_size]) for i in range(n_folds)]
