"""Patch-based vector quantizer mapping images to discrete codebook indices.

Images are split into non-overlapping square patches, each patch flattened
to a vector and snapped to its nearest codebook entry. The codebook is
trained with seeded k-means on corpus patches. No learned encoder: the
point is the discrete interface (a fixed-size token grid per image), not
perceptual quality.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

CODEBOOK_MAGIC = b"MDCB"
CODEBOOK_VERSION = 1

DESK_IMAGE_SIZE = 32
DESK_PATCH_SIZE = 4
DESK_CODEBOOK_SIZE = 256


def check_image(pixels: np.ndarray, patch_size: int | None = None) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"image must be HxWx3, got shape {pixels.shape}")
    if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
        raise ValueError("image values must be finite and within [0, 1]")
    if patch_size is not None:
        h, w, _ = pixels.shape
        if h % patch_size or w % patch_size:
            raise ValueError(f"image dims {h}x{w} not divisible by patch size {patch_size}")
    return pixels


def image_to_patches(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """Flatten an image into row-major patch vectors of length patch_size^2 * 3."""
    pixels = check_image(pixels, patch_size)
    h, w, _ = pixels.shape
    rows, cols = h // patch_size, w // patch_size
    grid = pixels.reshape(rows, patch_size, cols, patch_size, 3)
    return grid.transpose(0, 2, 1, 3, 4).reshape(rows * cols, patch_size * patch_size * 3)


def patches_to_image(patches: np.ndarray, grid_shape: tuple[int, int], patch_size: int) -> np.ndarray:
    rows, cols = grid_shape
    patches = np.asarray(patches, dtype=np.float32)
    if patches.shape != (rows * cols, patch_size * patch_size * 3):
        raise ValueError(f"expected {(rows * cols, patch_size * patch_size * 3)} patches, got {patches.shape}")
    grid = patches.reshape(rows, cols, patch_size, patch_size, 3)
    return grid.transpose(0, 2, 1, 3, 4).reshape(rows * patch_size, cols * patch_size, 3)


@dataclass(frozen=True)
class Codebook:
    """K reference patch vectors; immutable once trained."""

    entries: np.ndarray  # (K, patch_size^2 * 3) float32
    patch_size: int

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float32)
        if entries.ndim != 2 or entries.shape[0] < 1:
            raise ValueError(f"entries must be a non-empty 2D array, got {entries.shape}")
        if entries.shape[1] != self.patch_size * self.patch_size * 3:
            raise ValueError(
                f"entry length {entries.shape[1]} does not match patch size {self.patch_size}"
            )
        if not np.all(np.isfinite(entries)):
            raise ValueError("codebook entries must be finite")
        entries.flags.writeable = False
        object.__setattr__(self, "entries", entries)

    @property
    def k(self) -> int:
        return self.entries.shape[0]


def _nearest(patches: np.ndarray, entries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Squared distance and index of the nearest entry per patch (ties: lowest index)."""
    p = patches.astype(np.float64)
    e = entries.astype(np.float64)
    d2 = (p * p).sum(axis=1)[:, None] - 2.0 * (p @ e.T) + (e * e).sum(axis=1)[None, :]
    idx = np.argmin(d2, axis=1)
    best = np.maximum(d2[np.arange(len(p)), idx], 0.0)
    return best, idx


def _kmeans_pp_init(patches: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = patches.shape[0]
    centers = np.empty((k, patches.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = patches[first]
    d2 = ((patches - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            # All remaining patches coincide with chosen centers.
            choice = int(rng.integers(n))
        else:
            choice = int(rng.choice(n, p=d2 / total))
        centers[i] = patches[choice]
        d2 = np.minimum(d2, ((patches - centers[i]) ** 2).sum(axis=1))
    return centers


def train_codebook(
    corpus,
    k: int,
    patch_size: int,
    iters: int = 10,
    seed: int = 0,
    distortion_log: list | None = None,
) -> Codebook:
    """Seeded k-means over all corpus patches.

    Empty clusters are reseeded from the patch farthest from its assigned
    center, which keeps per-iteration distortion non-increasing. Pass a list
    as distortion_log to capture mean squared distance per iteration.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    all_patches = [image_to_patches(img, patch_size) for img in corpus]
    if not all_patches:
        raise ValueError("empty corpus")
    patches = np.concatenate(all_patches, axis=0).astype(np.float64)
    n_distinct = np.unique(patches, axis=0).shape[0]
    if n_distinct < k:
        raise ValueError(f"corpus has {n_distinct} distinct patches, need at least K={k}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(patches, k, rng)
    for _ in range(iters):
        d2, assign = _nearest(patches, centers)
        if distortion_log is not None:
            distortion_log.append(float(d2.mean()))
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, patches)
        counts = np.bincount(assign, minlength=k).astype(np.float64)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        # Reseed each empty cluster from the current farthest patch so no
        # entry is left dangling; zero its distance so two empty clusters
        # never grab the same patch.
        d2_pool = d2.copy()
        for ci in np.flatnonzero(~nonempty):
            far = int(np.argmax(d2_pool))
            centers[ci] = patches[far]
            d2_pool[far] = 0.0
    return Codebook(entries=centers.astype(np.float32), patch_size=patch_size)


def tokenize(pixels: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Image -> row-major local codebook indices, one per patch."""
    patches = image_to_patches(pixels, codebook.patch_size)
    _, idx = _nearest(patches, codebook.entries)
    return idx.astype(np.int64)


def detokenize(
    indices: np.ndarray, codebook: Codebook, grid_shape: tuple[int, int] | None = None
) -> np.ndarray:
    """Token indices -> image tiled from codebook entries.

    grid_shape defaults to a square grid, which covers both profiles (the
    token count is a perfect square whenever the image is square).
    """
    indices = np.asarray(indices)
    if indices.ndim != 1:
        raise ValueError(f"indices must be 1D, got shape {indices.shape}")
    if indices.size == 0:
        raise ValueError("empty token grid")
    if indices.min() < 0 or indices.max() >= codebook.k:
        raise ValueError(f"token index out of range [0, {codebook.k})")
    if grid_shape is None:
        side = int(round(indices.size**0.5))
        if side * side != indices.size:
            raise ValueError(f"{indices.size} tokens is not a square grid; pass grid_shape")
        grid_shape = (side, side)
    rows, cols = grid_shape
    if rows * cols != indices.size:
        raise ValueError(f"grid {grid_shape} does not hold {indices.size} tokens")
    patches = codebook.entries[indices]
    img = patches_to_image(patches, grid_shape, codebook.patch_size)
    return np.clip(img, 0.0, 1.0)


def token_count(height: int, width: int, patch_size: int) -> int:
    if height % patch_size or width % patch_size:
        raise ValueError(f"dims {height}x{width} not divisible by patch {patch_size}")
    return (height // patch_size) * (width // patch_size)


def save_codebook(codebook: Codebook, path) -> None:
    header = CODEBOOK_MAGIC + struct.pack("<III", CODEBOOK_VERSION, codebook.k, codebook.patch_size)
    body = np.ascontiguousarray(codebook.entries, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)


def load_codebook(path) -> Codebook:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CODEBOOK_MAGIC:
        raise ValueError("not a codebook file (bad magic)")
    version, k, patch_size = struct.unpack("<III", blob[4:16])
    if version != CODEBOOK_VERSION:
        raise ValueError(f"unsupported codebook version {version}")
    dim = patch_size * patch_size * 3
    expected = 16 + 4 * k * dim
    if len(blob) != expected:
        raise ValueError(f"codebook file has {len(blob)} bytes, expected {expected}")
    entries = np.frombuffer(blob, dtype="<f4", offset=16).reshape(k, dim)
    return Codebook(entries=entries.astype(np.float32), patch_size=patch_size)


def write_ppm(pixels: np.ndarray, path) -> None:
    """Write an image as binary PPM (P6), 8 bits per channel."""
    pixels = check_image(pixels)
    h, w, _ = pixels.shape
    data = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise ValueError("not a P6 PPM file")
    # Header: three whitespace-separated fields after the magic, with
    # optional '#' comment lines, then a single whitespace byte.
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # the single separator byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"unsupported PPM maxval {maxval}")
    expected = w * h * 3
    body = blob[pos : pos + expected]
    if len(body) != expected:
        raise ValueError("truncated PPM body")
    data = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return data.astype(np.float32) / 255.0
