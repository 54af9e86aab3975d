"""Synthetic image datasets and the SNDS binary format.

SNDS layout (little-endian)::

    b"SNDS"
    u32 count, u32 height, u32 width, u32 classes
    count*height*width u8 pixels, row-major, image after image
    count u8 labels

A stored byte ``u`` maps to the float pixel ``(u - 127.5) / 42.5``.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal

import numpy as np

MAGIC = b"SNDS"
PIXEL_CENTER = 127.5
PIXEL_SCALE = 42.5
SPLITS = ("train", "test")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    kind: Literal["class-blobs", "textures"] = "class-blobs"
    classes: int = 4
    train_size: int = 512
    test_size: int = 512
    image_side: int = 16
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("class-blobs", "textures"):
            raise DatasetError(f"unknown dataset kind {self.kind!r}")
        if not 2 <= self.classes <= 256:
            raise DatasetError("classes must lie in [2, 256]")
        if self.train_size % self.classes or self.test_size % self.classes:
            raise DatasetError("split sizes must be multiples of the class count for balanced labels")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [N, H, W]
    labels: np.ndarray  # uint8 [N]
    classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def floats(self) -> np.ndarray:
        return to_float(self.images)


def to_float(pixels: np.ndarray) -> np.ndarray:
    return (np.asarray(pixels, dtype=np.float64) - PIXEL_CENTER) / PIXEL_SCALE


def to_bytes(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(PIXEL_CENTER + PIXEL_SCALE * values), 0, 255).astype(np.uint8)


def _render(spec: SyntheticDatasetSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n, s, C = len(labels), spec.image_side, spec.classes
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / s
    phase = rng.uniform(0, 2 * np.pi, n)[:, None, None]
    if spec.kind == "class-blobs":
        # global brightness plus a one-cycle wave whose orientation encodes the class
        offset = np.linspace(-0.5, 0.5, C)[labels][:, None, None]
        theta = (np.pi * labels / C)[:, None, None]
        wave = np.cos(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        clean = offset + wave
    else:
        # class sets the spatial frequency; orientation is random per image
        theta = rng.uniform(0, np.pi, n)[:, None, None]
        freq = (labels + 2.0)[:, None, None]
        clean = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    return clean + spec.noise * rng.standard_normal((n, s, s))


def generate(spec: SyntheticDatasetSpec) -> dict[str, Dataset]:
    """Both splits, each from its own RNG stream so they never share a draw."""
    out = {}
    for split_id, (split, size) in enumerate(zip(SPLITS, (spec.train_size, spec.test_size))):
        rng = np.random.default_rng([spec.seed, split_id])
        labels = rng.permutation(np.arange(size) % spec.classes).astype(np.uint8)
        images = to_bytes(_render(spec, labels.astype(np.int64), rng))
        out[split] = Dataset(images, labels, spec.classes)
    return out


def write_snds(path: str | Path, ds: Dataset) -> None:
    n, h, w = ds.images.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<4I", n, h, w, ds.classes))
        f.write(np.ascontiguousarray(ds.images, dtype=np.uint8).tobytes())
        f.write(np.ascontiguousarray(ds.labels, dtype=np.uint8).tobytes())


def read_snds(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DatasetError(f"{path}: not an SNDS file")
    n, h, w, classes = struct.unpack_from("<4I", raw, 4)
    body = raw[20:]
    if len(body) != n * h * w + n:
        raise DatasetError(f"{path}: expected {n * h * w + n} payload bytes, found {len(body)}")
    images = np.frombuffer(body, dtype=np.uint8, count=n * h * w).reshape(n, h, w).copy()
    labels = np.frombuffer(body, dtype=np.uint8, offset=n * h * w).copy()
    if labels.size and labels.max() >= classes:
        raise DatasetError(f"{path}: label {labels.max()} out of range for {classes} classes")
    return Dataset(images, labels, classes)


def write_dataset(directory: str | Path, splits: dict[str, Dataset]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, ds in splits.items():
        p = directory / f"{name}.snds"
        write_snds(p, ds)
        paths.append(p)
    return paths


def load_dataset(directory: str | Path) -> dict[str, Dataset]:
    directory = Path(directory)
    missing = [s for s in SPLITS if not (directory / f"{s}.snds").exists()]
    if missing:
        raise DatasetError(f"{directory}: missing split files {missing}")
    return {s: read_snds(directory / f"{s}.snds") for s in SPLITS}


def dataset_digest(directory: str | Path) -> str:
    h = hashlib.sha256()
    for s in SPLITS:
        h.update((Path(directory) / f"{s}.snds").read_bytes())
    return h.hexdigest()
