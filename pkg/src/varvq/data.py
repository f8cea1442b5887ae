"""Synthetic grayscale datasets, lossless PGM file I/O, and dataset splits.

Three image families stand in for real data at desk scale: sinusoidal bar
gratings with random phase, single isotropic Gaussian blobs, and random
checkerboards.  All generation is deterministic per (kind, seed) and every
pixel lies in [0, 1].

Files are binary PGM (magic ``P5``, maxval 255): zero-dependency, bit-exact
across platforms, and round-tripping within one 8-bit quantization level.
A dataset on disk is a directory of .pgm files plus a plain-text manifest
listing relative paths, one per line.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

KINDS = ("bars", "blobs", "checker")


class PgmFormatError(ValueError):
    """Raised for malformed PGM headers or truncated payloads."""


@dataclass
class ImageBatch:
    """A stack of grayscale images with values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"expected (n, h, w) values, got shape {self.values.shape}")
        if self.values.size and (
            self.values.min() < 0.0 or self.values.max() > 1.0
        ):
            raise ValueError("image values must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def generate_synthetic(kind: str, n: int, size: int, seed: int) -> ImageBatch:
    """Deterministic batch of ``n`` size x size images of the given kind.

    bars: sinusoidal gratings, random orientation/frequency/phase.
    blobs: one unit-peak Gaussian bump centered on a random grid pixel.
    checker: checkerboard with random cell size, offset, and polarity.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown image kind {kind!r}; expected one of {KINDS}")
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, size, size), dtype=np.float64)
    checker_cells = np.array([2, 3, 4, 5, 6, 8])
    for i in range(n):
        if kind == "bars":
            horizontal = bool(rng.integers(2))
            freq = rng.uniform(0.75, 5.0)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            contrast = rng.uniform(0.5, 1.0)
            coord = yy if horizontal else xx
            images[i] = 0.5 + 0.5 * contrast * np.sin(
                2.0 * np.pi * freq * coord / size + phase
            )
        elif kind == "blobs":
            cy, cx = rng.integers(0, size, size=2)
            sigma = rng.uniform(size / 10.0, size / 3.0)
            amplitude = rng.uniform(0.5, 1.0)
            images[i] = amplitude * np.exp(
                -((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma**2)
            )
        else:
            cell = int(checker_cells[rng.integers(len(checker_cells))])
            oy, ox = rng.integers(0, cell, size=2)
            polarity = int(rng.integers(2))
            lo = rng.uniform(0.0, 0.35)
            hi = rng.uniform(0.65, 1.0)
            board = ((yy + oy) // cell + (xx + ox) // cell) % 2
            images[i] = np.where(board == polarity, hi, lo)
    return ImageBatch(values=np.clip(images, 0.0, 1.0))


def generate_mixture(n: int, size: int, seed: int) -> ImageBatch:
    """Equal-proportion shuffled mixture of all three kinds."""
    child_seeds = np.random.SeedSequence(seed).generate_state(len(KINDS) + 1)
    counts = [n // len(KINDS)] * len(KINDS)
    for i in range(n - sum(counts)):
        counts[i] += 1
    parts = [
        generate_synthetic(kind, count, size, int(child_seeds[i])).values
        for i, (kind, count) in enumerate(zip(KINDS, counts))
        if count > 0
    ]
    values = np.concatenate(parts, axis=0)
    perm = np.random.default_rng(int(child_seeds[-1])).permutation(n)
    return ImageBatch(values=values[perm])


def write_pgm(path, image: np.ndarray) -> None:
    """Write one image as binary PGM; values are rounded to 8 bits."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a single (h, w) image, got shape {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    h, w = image.shape
    payload = np.round(image * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(payload.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by :func:`write_pgm` (or any P5, maxval 255)."""
    data = Path(path).read_bytes()

    pos = 0

    def _next_token() -> bytes:
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":  # comment runs to end of line
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmFormatError(f"truncated PGM header in {path}")
        return data[start:pos]

    magic = _next_token()
    if magic != b"P5":
        raise PgmFormatError(f"bad PGM magic {magic!r} in {path} (expected b'P5')")
    try:
        w = int(_next_token())
        h = int(_next_token())
        maxval = int(_next_token())
    except ValueError as exc:
        raise PgmFormatError(f"malformed PGM header in {path}: {exc}") from exc
    if maxval != 255:
        raise PgmFormatError(f"unsupported PGM maxval {maxval} in {path} (expected 255)")
    if w < 1 or h < 1:
        raise PgmFormatError(f"bad PGM dimensions {w}x{h} in {path}")
    pos += 1  # exactly one whitespace byte separates header and payload
    payload = data[pos : pos + w * h]
    if len(payload) < w * h:
        raise PgmFormatError(
            f"truncated PGM payload in {path}: need {w * h} bytes, got {len(payload)}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return pixels.astype(np.float64) / 255.0


def save_dataset(directory, batch: ImageBatch, prefix: str = "img") -> Path:
    """Write a batch as PGM files plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(batch.n):
        name = f"{prefix}_{i:05d}.pgm"
        write_pgm(directory / name, batch.values[i])
        names.append(name)
    manifest = directory / "manifest.txt"
    manifest.write_text("".join(name + "\n" for name in names), encoding="ascii")
    return manifest


def load_dataset(manifest_path) -> ImageBatch:
    """Load every image listed in a manifest (paths relative to it)."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    names = [line for line in manifest_path.read_text(encoding="ascii").splitlines() if line]
    if not names:
        raise ValueError(f"manifest {manifest_path} lists no images")
    images = [read_pgm(base / name) for name in names]
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise ValueError(f"manifest images have mixed shapes: {sorted(shapes)}")
    return ImageBatch(values=np.stack(images))


def split_dataset(
    batch: ImageBatch, train_fraction: float, seed: int
) -> tuple[ImageBatch, ImageBatch]:
    """Deterministic shuffled split into disjoint train/test batches."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must lie in (0, 1), got {train_fraction}")
    perm = np.random.default_rng(seed).permutation(batch.n)
    n_train = int(round(batch.n * train_fraction))
    return (
        ImageBatch(values=batch.values[perm[:n_train]]),
        ImageBatch(values=batch.values[perm[n_train:]]),
    )
