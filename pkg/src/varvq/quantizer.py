"""Variational quantization forward path.

A batch of images is encoded to a diagonal Gaussian per token, a latent is
drawn with the reparameterization trick, quantized to the nearest codeword,
and both the sampled latent and the straight-through composite are decoded
by the same decoder.

Straight-through contract: ``z_st`` carries the codeword values forward, but
gradients of any downstream loss pass through it to ``z_c`` unchanged and
never reach the codebook.  The forward helpers here are plain array math;
the backward rule is implemented (and finite-difference verified) in
:mod:`varvq.model`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codebook import AssignmentBatch, Codebook, assign

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


@dataclass
class LatentGaussian:
    """Per-token diagonal Gaussian posterior (mean and log variance).

    ``log_var`` is clamped to [-10, 10] at construction, bounding sigma to
    [e^-5, e^5] so the coherence loss denominator and the reparameterized
    sample stay well-behaved.
    """

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self) -> None:
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        log_var = np.atleast_2d(np.asarray(self.log_var, dtype=np.float64))
        if log_var.shape != self.mu.shape:
            raise ValueError(
                f"mu shape {self.mu.shape} != log_var shape {log_var.shape}"
            )
        if not np.all(np.isfinite(self.mu)) or not np.all(np.isfinite(log_var)):
            raise ValueError("latent Gaussian parameters must be finite")
        self.log_var = np.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)

    @property
    def n_tokens(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]


@dataclass
class QuantizationResult:
    """Sampled latent, chosen indices, codewords, and straight-through values."""

    z_c: np.ndarray
    indices: np.ndarray
    z_q: np.ndarray
    z_st: np.ndarray
    distances: np.ndarray

    def to_assignment(self) -> AssignmentBatch:
        return AssignmentBatch(indices=self.indices, distances=self.distances)


def reparameterize(g: LatentGaussian, eps: np.ndarray) -> np.ndarray:
    """z_c = mu + exp(0.5 log_var) * eps for a standard-normal draw eps."""
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    if eps.shape != g.mu.shape:
        raise ValueError(f"eps shape {eps.shape} != latent shape {g.mu.shape}")
    return g.mu + g.sigma * eps


def quantize_batch(z_c: np.ndarray, cb: Codebook) -> QuantizationResult:
    """Nearest-codeword quantization of each token vector.

    ``z_q`` rows are exact copies of the codebook entries at the chosen
    indices, and ``z_st`` equals ``z_q`` element-wise (the composite
    z_c + stop_gradient(z_q - z_c) evaluated forward).
    """
    z_c = np.atleast_2d(np.asarray(z_c, dtype=np.float64))
    batch = assign(z_c, cb)
    z_q = cb.entries[batch.indices].astype(np.float64)
    return QuantizationResult(
        z_c=z_c,
        indices=batch.indices,
        z_q=z_q,
        z_st=z_q.copy(),
        distances=batch.distances,
    )


def dual_path_forward(
    x: np.ndarray,
    model,
    cb: Codebook,
    eps: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, LatentGaussian, QuantizationResult]:
    """Encode, sample, quantize, and decode both latents with one decoder.

    Returns (x_hat_c, x_hat_q, posterior, quantization).  ``model`` only
    needs ``encode``/``decode`` methods, so test stubs can stand in.
    """
    g = model.encode(x)
    z_c = reparameterize(g, eps)
    qr = quantize_batch(z_c, cb)
    x_hat_c = model.decode(z_c)
    x_hat_q = model.decode(qr.z_st)
    return x_hat_c, x_hat_q, g, qr
