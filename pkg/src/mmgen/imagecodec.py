"""Deterministic patch quantizer: k-means codebook, nearest-entry encoding, PPM I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .unirep import ImageTokenGrid

CODEBOOK_VERSION = 1
KMEANS_MAX_ITERS = 50


@dataclass(frozen=True, eq=False)
class RasterImage:
    """RGB image, ``pixels`` shaped (height, width, 3) with channels in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"pixels must be (height, width, 3), got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def solid(cls, width: int, height: int, rgb) -> "RasterImage":
        px = np.empty((height, width, 3))
        px[:] = np.asarray(rgb, dtype=np.float64)
        return cls(px)

    def __eq__(self, other) -> bool:
        return isinstance(other, RasterImage) and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class Codebook:
    patch_px: int
    entries: np.ndarray  # (size, patch_px, patch_px, 3)
    version: int = CODEBOOK_VERSION

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 4 or e.shape[1:] != (self.patch_px, self.patch_px, 3):
            raise ValueError(f"entries must be (n, {self.patch_px}, {self.patch_px}, 3), got {e.shape}")
        object.__setattr__(self, "entries", e)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Codebook)
            and self.patch_px == other.patch_px
            and self.version == other.version
            and np.array_equal(self.entries, other.entries)
        )

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, version=self.version, patch_px=self.patch_px, entries=self.entries)

    @classmethod
    def load(cls, path) -> "Codebook":
        with np.load(path) as data:
            version = int(data["version"])
            if version != CODEBOOK_VERSION:
                raise ValueError(f"unsupported codebook version {version}")
            return cls(int(data["patch_px"]), data["entries"], version)


def _check_dims(image: RasterImage, patch_px: int) -> None:
    if image.width % patch_px or image.height % patch_px:
        raise ValueError(f"image {image.width}x{image.height} is not a multiple of patch size {patch_px}")


def extract_patches(image: RasterImage, patch_px: int) -> np.ndarray:
    """Row-major patches flattened to vectors: (rows*cols, patch_px*patch_px*3)."""
    _check_dims(image, patch_px)
    rows, cols = image.height // patch_px, image.width // patch_px
    p = image.pixels.reshape(rows, patch_px, cols, patch_px, 3).transpose(0, 2, 1, 3, 4)
    return p.reshape(rows * cols, -1)


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # direct differences (not the expanded form) so equidistant ties compare exactly
    out = np.empty((x.shape[0], centers.shape[0]))
    for j, c in enumerate(centers):
        d = x - c
        out[:, j] = np.einsum("ij,ij->i", d, d)
    return out


def build_codebook(images: Sequence[RasterImage], size: int, patch_px: int, seed: int = 0) -> Codebook:
    """k-means++ seeded Lloyd iterations (at most 50) over every patch.

    Empty clusters are reseeded from the patch farthest from its current centroid.
    """
    if size < 1 or patch_px < 1:
        raise ValueError("size and patch_px must be positive")
    if not images:
        raise ValueError("no images given")
    x = np.concatenate([extract_patches(im, patch_px) for im in images])
    n = x.shape[0]
    if n < size:
        raise ValueError(f"need at least {size} patches, got {n}")
    rng = np.random.default_rng(seed)

    centers = np.empty((size, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, size):
        total = closest.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[j : j + 1])[:, 0])

    assign = None
    for _ in range(KMEANS_MAX_ITERS):
        dists = _sq_dists(x, centers)
        new_assign = dists.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        taken: set[int] = set()
        own = dists[np.arange(n), assign]
        for j in range(size):
            members = assign == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
                continue
            order = np.argsort(-own, kind="stable")
            pick = next(int(i) for i in order if int(i) not in taken)
            taken.add(pick)
            centers[j] = x[pick]
            own[pick] = 0.0
    return Codebook(patch_px, centers.reshape(size, patch_px, patch_px, 3))


def encode_image(image: RasterImage, codebook: Codebook, max_side: int | None = None) -> ImageTokenGrid:
    p = codebook.patch_px
    _check_dims(image, p)
    rows, cols = image.height // p, image.width // p
    if max_side is not None and (rows > max_side or cols > max_side):
        raise ValueError(f"image grid {rows}x{cols} exceeds max_side {max_side}")
    patches = extract_patches(image, p)
    codes = _sq_dists(patches, codebook.entries.reshape(codebook.size, -1)).argmin(axis=1)
    return ImageTokenGrid(rows, cols, codes.tolist())


def decode_grid(grid: ImageTokenGrid, codebook: Codebook) -> RasterImage:
    codes = np.asarray(grid.codes)
    if codes.min() < 0 or codes.max() >= codebook.size:
        raise ValueError(f"grid codes outside [0, {codebook.size})")
    p = codebook.patch_px
    tiles = codebook.entries[codes].reshape(grid.height, grid.width, p, p, 3)
    return RasterImage(tiles.transpose(0, 2, 1, 3, 4).reshape(grid.height * p, grid.width * p, 3))


# -- PPM (P6) -------------------------------------------------------------


def write_ppm(path, image: RasterImage) -> None:
    data = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.width} {image.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> RasterImage:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    width, height, maxval = (int(f) for f in fields[1:])
    if maxval >= 256:
        raise ValueError(f"{path}: 16-bit PPM is not supported")
    pos += 1  # single whitespace byte after maxval
    data = np.frombuffer(raw, dtype=np.uint8, count=width * height * 3, offset=pos)
    return RasterImage(data.reshape(height, width, 3).astype(np.float64) / maxval)
