"""Dense linear-algebra kernel shared by the quantization losses and tests.

Everything here is a pure function over numpy arrays and promotes its inputs
to float64: the moment and matrix-square-root computations feed the codebook
regularizer's gradient, which is sensitive to accumulated rounding when the
training tensors are float32.

Symmetric matrices are represented as plain (d, d) ndarrays that have been
passed through :func:`symmetrize`, so ``S[i, j] == S[j, i]`` holds exactly.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

# Eigenvalues of nominally-PSD inputs may dip slightly negative from rounding;
# anything above this magnitude is treated as a genuinely indefinite matrix.
EIGENVALUE_CLAMP_TOL = 1e-10


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Return 0.5 * (a + a.T) as float64, making symmetry exact."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return 0.5 * (a + a.T)


def mean_vector(points: np.ndarray) -> np.ndarray:
    """Component-wise arithmetic mean of the rows of a (K, d) matrix."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"expected a (K, d) matrix, got shape {points.shape}")
    if points.shape[0] < 1:
        raise ValueError("mean_vector requires at least one row")
    return points.mean(axis=0)


def sample_covariance(points: np.ndarray) -> np.ndarray:
    """Unbiased (K-1 denominator) sample covariance of the rows, symmetrized."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"expected a (K, d) matrix, got shape {points.shape}")
    k = points.shape[0]
    if k < 2:
        raise ValueError(f"sample_covariance requires at least 2 rows, got {k}")
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / (k - 1)
    return symmetrize(cov)


def sym_sqrt(s: np.ndarray, clamp_tol: float = EIGENVALUE_CLAMP_TOL) -> np.ndarray:
    """Unique PSD square root R of a symmetric PSD matrix, R @ R ~= S.

    Computed via symmetric eigendecomposition with eigenvalues clamped to
    zero inside ``[-clamp_tol, 0)``.  An eigenvalue below ``-clamp_tol``
    means the input is not PSD and raises.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {s.shape}")
    if not np.allclose(s, s.T, rtol=0.0, atol=1e-8):
        raise ValueError("sym_sqrt requires a symmetric matrix")
    w, v = np.linalg.eigh(symmetrize(s))
    if w.min(initial=0.0) < -clamp_tol:
        raise ValueError(
            f"matrix is not positive semi-definite (min eigenvalue {w.min():.3e})"
        )
    w = np.clip(w, 0.0, None)
    root = (v * np.sqrt(w)) @ v.T
    return symmetrize(root)


def gaussian_w2_squared(
    mu1: np.ndarray,
    s1: np.ndarray,
    mu2: np.ndarray,
    s2: np.ndarray,
) -> float:
    """Squared 2-Wasserstein distance between two Gaussians, in closed form.

    ||mu1 - mu2||^2 + Tr(S1 + S2) - 2 Tr(A) with A the Wasserstein geometric
    mean (S1^{1/2} S2 S1^{1/2})^{1/2}.  The result is clamped to zero when
    rounding makes it dip slightly (> -1e-9) negative.
    """
    mu1 = np.asarray(mu1, dtype=np.float64).reshape(-1)
    mu2 = np.asarray(mu2, dtype=np.float64).reshape(-1)
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    d = mu1.shape[0]
    if mu2.shape[0] != d or s1.shape != (d, d) or s2.shape != (d, d):
        raise ValueError(
            f"dimension mismatch: mu1 {mu1.shape}, mu2 {mu2.shape}, "
            f"S1 {s1.shape}, S2 {s2.shape}"
        )
    root1 = sym_sqrt(s1)
    cross = sym_sqrt(symmetrize(root1 @ s2 @ root1))
    value = float(
        np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross)
    )
    if value < 0.0:
        if value < -1e-9:
            raise ValueError(f"Wasserstein distance came out negative ({value:.3e})")
        value = 0.0
    return value


def finite_difference_gradient(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float,
) -> np.ndarray:
    """Central-difference gradient (f(x + h e_i) - f(x - h e_i)) / (2h).

    Non-finite values returned by ``f`` propagate into the corresponding
    component instead of raising; this is the test oracle used by every
    analytic-gradient check.
    """
    if h <= 0.0:
        raise ValueError(f"step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    grad = np.empty_like(x)
    for i in range(x.shape[0]):
        step = np.zeros_like(x)
        step[i] = h
        grad[i] = (f(x + step) - f(x - step)) / (2.0 * h)
    return grad
