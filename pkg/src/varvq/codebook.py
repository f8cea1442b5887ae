"""Learnable codebook: init, nearest-neighbor lookup, usage stats, EMA updates.

The codebook is a value owned by one training loop.  Lookup helpers are pure
reads over a snapshot; ``record_usage``, ``reset_usage``, and ``ema_update``
mutate their codebook in place (single writer) and return it for chaining.

Entries are stored in whatever float dtype the caller provides (the trainer
uses float32 so checkpoints round-trip exactly); all math promotes to float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics

# Denominator floor for EMA cluster means of never-assigned codewords.
EMA_EPS = 1e-5


@dataclass
class Codebook:
    """K x d codeword matrix plus usage counters and EMA accumulators."""

    entries: np.ndarray
    usage_counts: np.ndarray = field(default=None)  # type: ignore[assignment]
    ema_counts: np.ndarray = field(default=None)  # type: ignore[assignment]
    ema_sums: np.ndarray = field(default=None)  # type: ignore[assignment]
    generation: int = 0

    def __post_init__(self) -> None:
        self.entries = np.atleast_2d(np.asarray(self.entries))
        k, d = self.entries.shape
        if k < 1 or d < 1:
            raise ValueError(f"codebook needs K >= 1 and d >= 1, got {k}x{d}")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("codebook entries must be finite")
        if self.usage_counts is None:
            self.usage_counts = np.zeros(k, dtype=np.int64)
        else:
            self.usage_counts = np.asarray(self.usage_counts, dtype=np.int64)
        if self.usage_counts.shape != (k,):
            raise ValueError("usage_counts length must equal K")
        if np.any(self.usage_counts < 0):
            raise ValueError("usage_counts must be non-negative")
        if self.ema_counts is None:
            self.ema_counts = np.zeros(k, dtype=self.entries.dtype)
        if self.ema_sums is None:
            self.ema_sums = np.zeros_like(self.entries)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def copy(self) -> "Codebook":
        return Codebook(
            entries=self.entries.copy(),
            usage_counts=self.usage_counts.copy(),
            ema_counts=self.ema_counts.copy(),
            ema_sums=self.ema_sums.copy(),
            generation=self.generation,
        )


@dataclass
class AssignmentBatch:
    """Chosen codeword index and squared l2 distance for each input vector."""

    indices: np.ndarray
    distances: np.ndarray

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.distances = np.asarray(self.distances, dtype=np.float64).reshape(-1)
        if self.indices.shape != self.distances.shape:
            raise ValueError("indices and distances must have equal length")
        if np.any(self.indices < 0):
            raise ValueError("assignment indices must be non-negative")
        if np.any(self.distances < 0):
            raise ValueError("assignment distances must be non-negative")

    def __len__(self) -> int:
        return self.indices.shape[0]


def init_codebook(k: int, d: int, seed: int) -> Codebook:
    """Codebook with entries drawn i.i.d. from N(0, 1), deterministic per seed.

    Standard-normal init matches the prior the distribution regularizer pulls
    the codebook toward, so training starts without a moment transient.
    """
    if k < 1 or d < 1:
        raise ValueError(f"codebook needs K >= 1 and d >= 1, got K={k}, d={d}")
    rng = np.random.default_rng(seed)
    entries = rng.standard_normal((k, d)).astype(np.float32)
    return Codebook(entries=entries)


def nearest_codeword(z: np.ndarray, cb: Codebook) -> tuple[int, np.ndarray]:
    """Index and codeword minimizing ||z - e_k||^2; ties go to the lowest index."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape[0] != cb.dim:
        raise ValueError(f"vector dim {z.shape[0]} != codebook dim {cb.dim}")
    if not np.all(np.isfinite(z)):
        raise ValueError("lookup vector must be finite")
    d2 = np.sum((cb.entries.astype(np.float64) - z) ** 2, axis=1)
    idx = int(np.argmin(d2))  # argmin returns the first (lowest) minimizer
    return idx, cb.entries[idx].astype(np.float64).copy()


def assign(z: np.ndarray, cb: Codebook) -> AssignmentBatch:
    """Vectorized nearest-codeword lookup for a batch of (n, d) vectors.

    Distances are the recomputed squared distances to the chosen codewords
    (not the expanded-form shortcut), so they match a direct recomputation.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != cb.dim:
        raise ValueError(f"vector dim {z.shape[1]} != codebook dim {cb.dim}")
    if not np.all(np.isfinite(z)):
        raise ValueError("lookup vectors must be finite")
    entries = cb.entries.astype(np.float64)
    d2 = np.sum((z[:, None, :] - entries[None, :, :]) ** 2, axis=2)
    indices = np.argmin(d2, axis=1)
    distances = d2[np.arange(z.shape[0]), indices]
    return AssignmentBatch(indices=indices, distances=distances)


def record_usage(cb: Codebook, batch: AssignmentBatch) -> Codebook:
    """Increment usage counters once per occurrence of each assigned index."""
    if len(batch) and int(batch.indices.max()) >= cb.size:
        raise ValueError(
            f"assignment index {int(batch.indices.max())} out of range for K={cb.size}"
        )
    np.add.at(cb.usage_counts, batch.indices, 1)
    return cb


def reset_usage(cb: Codebook) -> Codebook:
    """Zero the usage counters (called before each evaluation pass)."""
    cb.usage_counts[:] = 0
    return cb


def utilization(cb: Codebook) -> float:
    """Fraction of codewords used at least once since the last reset."""
    return float(np.count_nonzero(cb.usage_counts >= 1)) / cb.size


def codebook_moments(cb: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Empirical mean and unbiased covariance of the codeword rows."""
    if cb.size < 2:
        raise ValueError(f"moments need at least 2 codewords, got K={cb.size}")
    entries = cb.entries.astype(np.float64)
    return numerics.mean_vector(entries), numerics.sample_covariance(entries)


def ema_update(
    cb: Codebook,
    latents: np.ndarray,
    assignments: AssignmentBatch,
    decay: float,
) -> Codebook:
    """Cluster-EMA codebook update from one batch of assigned latents.

    N_k <- decay * N_k + (1 - decay) * count_k
    m_k <- decay * m_k + (1 - decay) * sum of latents assigned to k
    e_k <- m_k / max(N_k, eps)   only for codewords assigned in this batch;
    unassigned codewords keep their current value.
    """
    if not 0.0 < decay < 1.0:
        raise ValueError(f"decay must lie in (0, 1), got {decay}")
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    if latents.shape[0] != len(assignments):
        raise ValueError("latents and assignments must have equal length")
    if latents.shape[1] != cb.dim:
        raise ValueError(f"latent dim {latents.shape[1]} != codebook dim {cb.dim}")
    if len(assignments) and int(assignments.indices.max()) >= cb.size:
        raise ValueError("assignment index out of range")

    counts = np.bincount(assignments.indices, minlength=cb.size).astype(np.float64)
    sums = np.zeros((cb.size, cb.dim), dtype=np.float64)
    np.add.at(sums, assignments.indices, latents)

    new_counts = decay * cb.ema_counts.astype(np.float64) + (1.0 - decay) * counts
    new_sums = decay * cb.ema_sums.astype(np.float64) + (1.0 - decay) * sums
    cb.ema_counts = new_counts.astype(cb.ema_counts.dtype)
    cb.ema_sums = new_sums.astype(cb.ema_sums.dtype)

    assigned = counts > 0
    if np.any(assigned):
        denom = np.maximum(new_counts[assigned], EMA_EPS)[:, None]
        moved = (new_sums[assigned] / denom).astype(cb.entries.dtype)
        cb.entries[assigned] = moved
        cb.generation += 1
    return cb
