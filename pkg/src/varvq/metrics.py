"""Reconstruction quality metrics and codebook usage diagnostics.

PSNR assumes unit dynamic range and is capped at 100 dB for exact
reconstructions.  SSIM uses uniform 8x8 sliding windows with stride 1 and
the conventional constants C1 = 0.01^2, C2 = 0.03^2; absolute values are
only internally comparable since window choices differ between
implementations.  Perplexity is the exponential entropy of an assignment
histogram: the effective number of codewords in use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

EVAL_CSV_HEADER = "run_id,config,epoch,psnr,ssim,mse,utilization,perplexity,n_images"


def _check_pair(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    for name, arr in (("first", x), ("second", y)):
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"{name} image values must lie in [0, 1]")
    return x, y


def mse(x: np.ndarray, x_hat: np.ndarray) -> float:
    x, x_hat = _check_pair(x, x_hat)
    return float(np.mean((x - x_hat) ** 2))


def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """10 log10(1 / mse) in dB for unit-range images, capped at 100 dB."""
    return psnr_from_mse(mse(x, x_hat))


def psnr_from_mse(mse_value: float) -> float:
    if mse_value < 0.0:
        raise ValueError(f"mse must be non-negative, got {mse_value}")
    if mse_value == 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse_value)))


def ssim(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Mean local SSIM over uniform 8x8 sliding windows, stride 1.

    Accepts a single (h, w) image or an (n, h, w) batch; for a batch the
    per-image SSIM values are averaged.
    """
    x, x_hat = _check_pair(x, x_hat)
    if x.ndim == 2:
        return _ssim_single(x, x_hat)
    if x.ndim == 3:
        return float(np.mean([_ssim_single(a, b) for a, b in zip(x, x_hat)]))
    raise ValueError(f"expected 2-D or 3-D images, got shape {x.shape}")


def _ssim_single(x: np.ndarray, y: np.ndarray) -> float:
    h, w = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(
            f"image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    wx = sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
    wy = sliding_window_view(y, (SSIM_WINDOW, SSIM_WINDOW))
    mu_x = wx.mean(axis=(2, 3))
    mu_y = wy.mean(axis=(2, 3))
    var_x = (wx * wx).mean(axis=(2, 3)) - mu_x**2
    var_y = (wy * wy).mean(axis=(2, 3)) - mu_y**2
    cov_xy = (wx * wy).mean(axis=(2, 3)) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov_xy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return float(np.mean(num / den))


def perplexity(assignment_histogram: np.ndarray) -> float:
    """exp(entropy) of the empirical assignment distribution."""
    counts = np.asarray(assignment_histogram, dtype=np.float64).reshape(-1)
    if np.any(counts < 0):
        raise ValueError("histogram counts must be non-negative")
    total = counts.sum()
    if total < 1:
        raise ValueError("histogram must contain at least one assignment")
    p = counts[counts > 0] / total
    entropy = -float(np.sum(p * np.log(p)))
    return float(np.exp(entropy))


@dataclass
class EvalReport:
    """One evaluation pass over a dataset, serializable as a CSV row."""

    run_id: str
    config: str
    epoch: int
    psnr: float
    ssim: float
    mse: float
    utilization: float
    perplexity: float
    n_images: int

    def __post_init__(self) -> None:
        expected = psnr_from_mse(self.mse)
        if abs(self.psnr - expected) > 1e-6:
            raise ValueError(
                f"psnr {self.psnr} inconsistent with mse {self.mse} "
                f"(expected {expected})"
            )

    @classmethod
    def from_mse(
        cls,
        run_id: str,
        config: str,
        epoch: int,
        mse_value: float,
        ssim_value: float,
        utilization: float,
        perplexity_value: float,
        n_images: int,
    ) -> "EvalReport":
        return cls(
            run_id=run_id,
            config=config,
            epoch=epoch,
            psnr=psnr_from_mse(mse_value),
            ssim=ssim_value,
            mse=mse_value,
            utilization=utilization,
            perplexity=perplexity_value,
            n_images=n_images,
        )

    def to_csv_row(self) -> str:
        return ",".join(
            [
                self.run_id,
                self.config,
                str(self.epoch),
                repr(float(self.psnr)),
                repr(float(self.ssim)),
                repr(float(self.mse)),
                repr(float(self.utilization)),
                repr(float(self.perplexity)),
                str(self.n_images),
            ]
        )

    @classmethod
    def from_csv_row(cls, row: str) -> "EvalReport":
        parts = row.strip().split(",")
        if len(parts) != 9:
            raise ValueError(f"expected 9 CSV fields, got {len(parts)}: {row!r}")
        return cls(
            run_id=parts[0],
            config=parts[1],
            epoch=int(parts[2]),
            psnr=float(parts[3]),
            ssim=float(parts[4]),
            mse=float(parts[5]),
            utilization=float(parts[6]),
            perplexity=float(parts[7]),
            n_images=int(parts[8]),
        )
