"""Scalar training objectives and their analytic gradients.

Terms:

* dual-path reconstruction: mean squared error of both decoded latents
* KL of the diagonal Gaussian posterior against N(0, I)
* RCS, the variance-weighted soft alignment between codewords and posterior
  means, with the variance detached from the gradient
* DCR, the closed-form squared 2-Wasserstein distance between the codebook's
  empirical Gaussian moments and N(0, I), minus the constant Tr(I) = d
* hard alignment, the plain l2 penalty used by the baseline configuration
* the weighted total with per-term ablation toggles

Normalization conventions: reconstruction and hard alignment are means per
element; KL and RCS sum over latent dimensions and average over tokens.
All functions promote to float64 and are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import numerics
from .codebook import Codebook
from .quantizer import LatentGaussian

# Ridge added to the codebook covariance before inverting its square root in
# the DCR gradient; sample covariances are rank-deficient when K < d or when
# the codebook degenerates early in training.
DCR_RIDGE = 1e-6

RCS_ROUTES = ("both", "encoder", "codebook")


@dataclass(frozen=True)
class LossConfig:
    """Ablation toggles and weights for the total objective."""

    vlq_on: bool = True
    rcs_on: bool = True
    dcr_on: bool = True
    hard_align_on: bool = False
    lambda_rcs: float = 1.0
    lambda_dcr: float = 0.1
    beta_kl: float = 1e-3
    beta_commit: float = 0.25
    rcs_route: str = "both"

    def __post_init__(self) -> None:
        if self.rcs_route not in RCS_ROUTES:
            raise ValueError(f"rcs_route must be one of {RCS_ROUTES}")


@dataclass
class LossBreakdown:
    """All scalar loss terms for one batch; disabled terms are None."""

    rec_c: Optional[float]
    rec_q: float
    kl: Optional[float]
    rcs: Optional[float]
    dcr: Optional[float]
    hard_align: Optional[float]
    total: float


def _entries(cb: Union[Codebook, np.ndarray]) -> np.ndarray:
    entries = cb.entries if isinstance(cb, Codebook) else cb
    return np.atleast_2d(np.asarray(entries, dtype=np.float64))


def reconstruction_loss(
    x: np.ndarray,
    x_hat_c: np.ndarray,
    x_hat_q: np.ndarray,
) -> tuple[float, float]:
    """Mean-per-element squared error of both reconstruction paths."""
    x = np.asarray(x, dtype=np.float64)
    x_hat_c = np.asarray(x_hat_c, dtype=np.float64)
    x_hat_q = np.asarray(x_hat_q, dtype=np.float64)
    if x_hat_c.shape != x.shape or x_hat_q.shape != x.shape:
        raise ValueError(
            f"shape mismatch: x {x.shape}, x_hat_c {x_hat_c.shape}, "
            f"x_hat_q {x_hat_q.shape}"
        )
    rec_c = float(np.mean((x - x_hat_c) ** 2))
    rec_q = float(np.mean((x - x_hat_q) ** 2))
    return rec_c, rec_q


def kl_loss(g: LatentGaussian) -> float:
    """KL(q || N(0, I)) for a diagonal Gaussian: summed over dims, per token.

    0.5 * sum_i (mu_i^2 + sigma_i^2 - 1 - log sigma_i^2), averaged over tokens.
    Non-negative, zero exactly at mu = 0, log_var = 0.
    """
    var = np.exp(g.log_var)
    per_token = 0.5 * np.sum(g.mu**2 + var - 1.0 - g.log_var, axis=1)
    return float(np.mean(per_token))


def kl_grads(g: LatentGaussian) -> tuple[np.ndarray, np.ndarray]:
    """Analytic (d kl / d mu, d kl / d log_var) under the per-token average."""
    n = g.n_tokens
    d_mu = g.mu / n
    d_log_var = 0.5 * (np.exp(g.log_var) - 1.0) / n
    return d_mu, d_log_var


def rcs_loss(z_q: np.ndarray, g: LatentGaussian, mode: str = "simplified") -> float:
    """Variance-weighted alignment of codewords to the posterior mean.

    ``simplified`` (the training objective): 0.5 * sum_i ((z_q_i - mu_i) /
    sigma_i)^2 per token, averaged over tokens, with sigma treated as a
    constant in the gradient.  ``full_nll`` is the diagnostic negative
    log-likelihood that adds 0.5 * sum_i log(2 pi sigma_i^2) and keeps sigma
    differentiable; it is never used for training.
    """
    if mode not in ("simplified", "full_nll"):
        raise ValueError(f"unknown rcs mode {mode!r}")
    z_q = np.atleast_2d(np.asarray(z_q, dtype=np.float64))
    if z_q.shape != g.mu.shape:
        raise ValueError(f"z_q shape {z_q.shape} != latent shape {g.mu.shape}")
    var = np.exp(g.log_var)
    per_token = 0.5 * np.sum((z_q - g.mu) ** 2 / var, axis=1)
    if mode == "full_nll":
        per_token = per_token + 0.5 * np.sum(
            np.log(2.0 * math.pi * var), axis=1
        )
    return float(np.mean(per_token))


def rcs_grads(
    z_q: np.ndarray,
    g: LatentGaussian,
    route: str = "both",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradients of the simplified alignment loss.

    Returns (d/d z_q, d/d mu, d/d log_var).  The variance is detached, so the
    log_var gradient is identically zero.  ``route`` zeroes one side for the
    one-sided experiment variants: "encoder" stops the codeword gradient,
    "codebook" stops the mean gradient.
    """
    if route not in RCS_ROUTES:
        raise ValueError(f"rcs route must be one of {RCS_ROUTES}")
    z_q = np.atleast_2d(np.asarray(z_q, dtype=np.float64))
    if z_q.shape != g.mu.shape:
        raise ValueError(f"z_q shape {z_q.shape} != latent shape {g.mu.shape}")
    n = g.n_tokens
    weighted = (z_q - g.mu) / np.exp(g.log_var) / n
    d_zq = weighted if route in ("both", "codebook") else np.zeros_like(weighted)
    d_mu = -weighted if route in ("both", "encoder") else np.zeros_like(weighted)
    return d_zq, d_mu, np.zeros_like(g.log_var)


def hard_alignment_loss(z_c: np.ndarray, z_q: np.ndarray) -> float:
    """Plain l2 alignment penalty, mean per element (baseline configuration)."""
    z_c = np.atleast_2d(np.asarray(z_c, dtype=np.float64))
    z_q = np.atleast_2d(np.asarray(z_q, dtype=np.float64))
    if z_c.shape != z_q.shape:
        raise ValueError(f"z_c shape {z_c.shape} != z_q shape {z_q.shape}")
    return float(np.mean((z_q - z_c) ** 2))


def dcr_loss(cb: Union[Codebook, np.ndarray]) -> float:
    """Codebook-to-prior alignment: ||mu_q||^2 + Tr(S_q) - 2 Tr(S_q^{1/2}).

    This equals the squared 2-Wasserstein distance between the codebook's
    empirical Gaussian N(mu_q, S_q) and N(0, I) minus the constant d, so its
    minimum over codebooks with exact unit sample moments is -d.
    """
    entries = _entries(cb)
    if entries.shape[0] < 2:
        raise ValueError(
            f"distribution regularizer needs K >= 2 codewords, got {entries.shape[0]}"
        )
    mu = numerics.mean_vector(entries)
    cov = numerics.sample_covariance(entries)
    root = numerics.sym_sqrt(cov)
    return float(np.sum(mu**2) + np.trace(cov) - 2.0 * np.trace(root))


def dcr_gradient(cb: Union[Codebook, np.ndarray]) -> np.ndarray:
    """Analytic gradient of :func:`dcr_loss` with respect to every codeword.

    Uses d Tr(S^{1/2}) / d S = 0.5 * S^{-1/2} chained through the sample
    moments, with a ridge of ``DCR_RIDGE`` making the inverse root well
    defined for rank-deficient covariances:

        grad_k = (2/K) mu_q + (2/(K-1)) (e_k - mu_q) (I - (S_q + delta I)^{-1/2})
    """
    entries = _entries(cb)
    k = entries.shape[0]
    if k < 2:
        raise ValueError(f"distribution regularizer needs K >= 2 codewords, got {k}")
    mu = numerics.mean_vector(entries)
    cov = numerics.sample_covariance(entries)
    w, v = np.linalg.eigh(cov)
    w = np.clip(w, 0.0, None) + DCR_RIDGE
    if not np.all(w > 0.0) or not np.all(np.isfinite(w)):
        raise ValueError("ridged codebook covariance is singular (degenerate codebook)")
    inv_root = (v / np.sqrt(w)) @ v.T
    centered = entries - mu
    grad_sigma = np.eye(entries.shape[1]) - numerics.symmetrize(inv_root)
    return (2.0 / k) * mu + (2.0 / (k - 1)) * centered @ grad_sigma


def total_loss(
    cfg: LossConfig,
    rec_c: Optional[float],
    rec_q: float,
    kl: Optional[float] = None,
    rcs: Optional[float] = None,
    dcr: Optional[float] = None,
    hard_align: Optional[float] = None,
) -> LossBreakdown:
    """Weighted sum of the enabled terms.

    total = (rec_c + rec_q) + lambda_rcs * rcs + lambda_dcr * dcr
            + beta_kl * kl + beta_commit * hard_align

    with rec_c and kl present only when the variational branch is on, and
    each regularizer present only when its toggle is on.  A required term
    that is missing or non-finite raises.
    """
    def _require(name: str, value: Optional[float]) -> float:
        if value is None:
            raise ValueError(f"loss term '{name}' is enabled but was not computed")
        if not math.isfinite(value):
            raise ValueError(f"loss term '{name}' is not finite ({value})")
        return float(value)

    total = _require("rec_q", rec_q)
    if cfg.vlq_on:
        total += _require("rec_c", rec_c)
        total += cfg.beta_kl * _require("kl", kl)
    if cfg.rcs_on:
        total += cfg.lambda_rcs * _require("rcs", rcs)
    if cfg.dcr_on and dcr is not None:
        # dcr may be None on steps the trainer skips via dcr_every_n_steps
        total += cfg.lambda_dcr * _require("dcr", dcr)
    if cfg.hard_align_on:
        total += cfg.beta_commit * _require("hard_align", hard_align)
    return LossBreakdown(
        rec_c=rec_c if cfg.vlq_on else None,
        rec_q=float(rec_q),
        kl=kl if cfg.vlq_on else None,
        rcs=rcs if cfg.rcs_on else None,
        dcr=dcr if cfg.dcr_on else None,
        hard_align=hard_align if cfg.hard_align_on else None,
        total=float(total),
    )
