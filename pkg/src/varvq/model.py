"""Patch MLP encoder/decoder with hand-derived gradients, Adam, cosine LR.

Architecture: each image is split into non-overlapping square patches (one
token per patch, weights shared across patches).  The encoder maps a
flattened patch through one tanh hidden layer to a 2*d head holding the
posterior mean and log variance; the decoder mirrors it back to pixels
through a sigmoid so outputs stay in [0, 1].

Parameters are stored in ``Model.params`` (float32 during training so
checkpoints round-trip exactly); every forward/backward computation promotes
to float64.  Gradients are hand-written backprop, verified against central
finite differences.

Gradient routing rules implemented here:

* straight-through: reconstruction gradients of the quantized path pass to
  the sampled latent unchanged; codewords get none,
* RCS variance detachment: no RCS gradient reaches the log-variance head,
* the codebook is trained only by the alignment and distribution terms.

Because of those stop-gradients the routed gradient is NOT the derivative of
the loss as a plain function of the parameters.  For finite-difference
verification, :func:`forward_loss` accepts a :class:`FrozenStops` captured at
the base point, which pins every stop-gradient value (assignment indices,
straight-through residual, RCS sigma) so the surrogate is smooth and its
exact derivative equals the routed gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import losses
from .codebook import Codebook
from .losses import LossBreakdown, LossConfig
from .quantizer import (
    LOG_VAR_MAX,
    LOG_VAR_MIN,
    LatentGaussian,
    QuantizationResult,
    quantize_batch,
)

PARAM_ORDER = (
    "enc_w1",
    "enc_b1",
    "enc_w2",
    "enc_b2",
    "dec_w1",
    "dec_b1",
    "dec_w2",
    "dec_b2",
)


class TrainingDiverged(RuntimeError):
    """A loss term became non-finite; carries the offending term's name."""

    def __init__(self, term: str, value: float):
        super().__init__(f"loss term '{term}' is not finite ({value})")
        self.term = term


@dataclass
class Model:
    """Encoder/decoder parameters plus the layout they were built for."""

    image_size: int
    patch_size: int
    latent_dim: int
    hidden_dim: int
    params: dict[str, np.ndarray]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        missing = [k for k in PARAM_ORDER if k not in self.params]
        if missing:
            raise ValueError(f"model is missing parameters: {missing}")

    @property
    def tokens_per_image(self) -> int:
        grid = self.image_size // self.patch_size
        return grid * grid

    def encode(self, x: np.ndarray) -> LatentGaussian:
        return encode(self, x)

    def decode(self, z: np.ndarray) -> np.ndarray:
        return decode(self, z)

    def copy(self, dtype=None) -> "Model":
        params = {
            k: (v.astype(dtype) if dtype is not None else v.copy())
            for k, v in self.params.items()
        }
        return Model(
            image_size=self.image_size,
            patch_size=self.patch_size,
            latent_dim=self.latent_dim,
            hidden_dim=self.hidden_dim,
            params=params,
            activation=self.activation,
        )


def init_model(
    image_size: int,
    patch_size: int,
    latent_dim: int,
    hidden_dim: int,
    seed: int,
    dtype=np.float32,
) -> Model:
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases.

    Deterministic per seed; the draw order below is part of the contract.
    """
    if min(image_size, patch_size, latent_dim, hidden_dim) < 1:
        raise ValueError("all layer sizes must be positive")
    if image_size % patch_size != 0:
        raise ValueError(
            f"image size {image_size} not divisible by patch size {patch_size}"
        )
    rng = np.random.default_rng(seed)
    pixels = patch_size * patch_size

    def glorot(fan_in: int, fan_out: int) -> np.ndarray:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)

    params = {
        "enc_w1": glorot(pixels, hidden_dim),
        "enc_b1": np.zeros(hidden_dim, dtype=dtype),
        "enc_w2": glorot(hidden_dim, 2 * latent_dim),
        "enc_b2": np.zeros(2 * latent_dim, dtype=dtype),
        "dec_w1": glorot(latent_dim, hidden_dim),
        "dec_b1": np.zeros(hidden_dim, dtype=dtype),
        "dec_w2": glorot(hidden_dim, pixels),
        "dec_b2": np.zeros(pixels, dtype=dtype),
    }
    return Model(
        image_size=image_size,
        patch_size=patch_size,
        latent_dim=latent_dim,
        hidden_dim=hidden_dim,
        params=params,
    )


def patchify(x: np.ndarray, patch_size: int) -> np.ndarray:
    """(n, H, W) images -> (n * tokens, patch_size^2) rows, row-major grid."""
    x = np.asarray(x, dtype=np.float64)
    n, h, w = x.shape
    gh, gw = h // patch_size, w // patch_size
    tiles = x.reshape(n, gh, patch_size, gw, patch_size)
    tiles = tiles.transpose(0, 1, 3, 2, 4)
    return tiles.reshape(n * gh * gw, patch_size * patch_size)


def unpatchify(rows: np.ndarray, image_size: int, patch_size: int) -> np.ndarray:
    """Inverse of :func:`patchify` for square images."""
    grid = image_size // patch_size
    tokens = grid * grid
    n = rows.shape[0] // tokens
    tiles = rows.reshape(n, grid, grid, patch_size, patch_size)
    tiles = tiles.transpose(0, 1, 3, 2, 4)
    return tiles.reshape(n, image_size, image_size)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _params64(m: Model) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=np.float64) for k, v in m.params.items()}


def _check_images(m: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != m.image_size or x.shape[2] != m.image_size:
        raise ValueError(
            f"expected (n, {m.image_size}, {m.image_size}) images, got {x.shape}"
        )
    return x


def encode(m: Model, x: np.ndarray) -> LatentGaussian:
    """Per-token posterior parameters; log_var is clamped by LatentGaussian."""
    x = _check_images(m, x)
    p = _params64(m)
    xp = patchify(x, m.patch_size)
    h1 = np.tanh(xp @ p["enc_w1"] + p["enc_b1"])
    out = h1 @ p["enc_w2"] + p["enc_b2"]
    d = m.latent_dim
    return LatentGaussian(mu=out[:, :d], log_var=out[:, d:])


def decode(m: Model, z: np.ndarray) -> np.ndarray:
    """Decode (n * tokens, d) latents back to (n, H, W) pixels in [0, 1]."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != m.latent_dim:
        raise ValueError(f"latent dim {z.shape[1]} != model dim {m.latent_dim}")
    if z.shape[0] % m.tokens_per_image != 0:
        raise ValueError(
            f"{z.shape[0]} tokens is not a whole number of "
            f"{m.tokens_per_image}-token images"
        )
    p = _params64(m)
    h1 = np.tanh(z @ p["dec_w1"] + p["dec_b1"])
    y = _sigmoid(h1 @ p["dec_w2"] + p["dec_b2"])
    return unpatchify(y, m.image_size, m.patch_size)


@dataclass
class FrozenStops:
    """Stop-gradient values pinned at a base point for finite differencing.

    * ``indices``: assignment frozen so the surrogate stays in one argmin cell
    * ``st_residual``: z_q - z_c at the base point; the surrogate uses
      z_st = z_c + st_residual, reproducing the straight-through routing
    * ``rcs_sigma``: detached alignment denominator
    """

    indices: np.ndarray
    st_residual: np.ndarray
    rcs_sigma: Optional[np.ndarray]


@dataclass
class GradientResult:
    param_grads: dict[str, np.ndarray]
    codebook_grad: np.ndarray
    losses: LossBreakdown
    quantization: QuantizationResult


def _forward(
    m: Model,
    cb: Codebook,
    x: np.ndarray,
    cfg: LossConfig,
    eps: Optional[np.ndarray],
    frozen: Optional[FrozenStops],
    dcr_this_step: bool,
) -> dict:
    """Shared forward pass returning every intermediate the backward needs."""
    x = _check_images(m, x)
    p = _params64(m)
    d = m.latent_dim
    xp = patchify(x, m.patch_size)
    n_tok = xp.shape[0]

    a1 = xp @ p["enc_w1"] + p["enc_b1"]
    h1 = np.tanh(a1)
    out = h1 @ p["enc_w2"] + p["enc_b2"]
    mu = out[:, :d]
    lv_raw = out[:, d:]
    lv = np.clip(lv_raw, LOG_VAR_MIN, LOG_VAR_MAX)
    g = LatentGaussian(mu=mu, log_var=lv)

    if cfg.vlq_on:
        if eps is None:
            eps = np.zeros_like(mu)
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != mu.shape:
            raise ValueError(f"eps shape {eps.shape} != latent shape {mu.shape}")
        sigma = np.exp(0.5 * lv)
        z_c = mu + sigma * eps
    else:
        eps = None
        sigma = None
        z_c = mu

    entries64 = cb.entries.astype(np.float64)
    if frozen is None:
        qr = quantize_batch(z_c, cb)
        indices = qr.indices
        z_q = qr.z_q
        z_st = qr.z_st
    else:
        indices = frozen.indices
        z_q = entries64[indices]
        z_st = z_c + frozen.st_residual
        qr = QuantizationResult(
            z_c=z_c,
            indices=indices,
            z_q=z_q,
            z_st=z_st.copy(),
            distances=np.sum((z_c - z_q) ** 2, axis=1),
        )

    def _decode(z_in: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        h1d = np.tanh(z_in @ p["dec_w1"] + p["dec_b1"])
        y = _sigmoid(h1d @ p["dec_w2"] + p["dec_b2"])
        return h1d, y, unpatchify(y, m.image_size, m.patch_size)

    h1d_q, y_q, x_hat_q = _decode(z_st)
    if cfg.vlq_on:
        h1d_c, y_c, x_hat_c = _decode(z_c)
        rec_c, rec_q = losses.reconstruction_loss(x, x_hat_c, x_hat_q)
        kl = losses.kl_loss(g)
    else:
        h1d_c = y_c = x_hat_c = None
        rec_c = None
        kl = None
        rec_q = float(np.mean((x - x_hat_q) ** 2))

    rcs = None
    rcs_sigma = None
    if cfg.rcs_on:
        if frozen is None:
            rcs_sigma = g.sigma
            rcs = losses.rcs_loss(z_q, g, mode="simplified")
        else:
            rcs_sigma = frozen.rcs_sigma
            rcs = float(
                np.mean(0.5 * np.sum((z_q - mu) ** 2 / rcs_sigma**2, axis=1))
            )
    hard = losses.hard_alignment_loss(z_c, z_q) if cfg.hard_align_on else None
    dcr = losses.dcr_loss(cb) if (cfg.dcr_on and dcr_this_step) else None

    for term, value in (
        ("rec_c", rec_c),
        ("rec_q", rec_q),
        ("kl", kl),
        ("rcs", rcs),
        ("dcr", dcr),
        ("hard_align", hard),
    ):
        if value is not None and not math.isfinite(value):
            raise TrainingDiverged(term, value)

    breakdown = losses.total_loss(
        cfg, rec_c=rec_c, rec_q=rec_q, kl=kl, rcs=rcs, dcr=dcr, hard_align=hard
    )
    return dict(
        xp=xp, n_tok=n_tok, a1=a1, h1=h1, mu=mu, lv_raw=lv_raw, lv=lv, g=g,
        eps=eps, sigma=sigma, z_c=z_c, indices=indices, z_q=z_q, z_st=z_st,
        qr=qr, h1d_q=h1d_q, y_q=y_q, h1d_c=h1d_c, y_c=y_c,
        rcs_sigma=rcs_sigma, breakdown=breakdown, params=p,
    )


def forward_loss(
    m: Model,
    cb: Codebook,
    x: np.ndarray,
    cfg: LossConfig,
    eps: Optional[np.ndarray] = None,
    frozen: Optional[FrozenStops] = None,
    dcr_this_step: bool = True,
) -> LossBreakdown:
    """Loss terms for one batch without gradients.

    With ``frozen`` supplied, evaluates the stop-gradient surrogate (see the
    module docstring); this is what finite-difference oracles must call.
    """
    return _forward(m, cb, x, cfg, eps, frozen, dcr_this_step)["breakdown"]


def capture_frozen(
    m: Model,
    cb: Codebook,
    x: np.ndarray,
    cfg: LossConfig,
    eps: Optional[np.ndarray] = None,
) -> FrozenStops:
    """Pin stop-gradient values at the current parameters for FD checks."""
    fw = _forward(m, cb, x, cfg, eps, frozen=None, dcr_this_step=True)
    return FrozenStops(
        indices=fw["indices"].copy(),
        st_residual=(fw["z_q"] - fw["z_c"]).copy(),
        rcs_sigma=None if fw["rcs_sigma"] is None else fw["rcs_sigma"].copy(),
    )


def compute_gradients(
    m: Model,
    cb: Codebook,
    x: np.ndarray,
    cfg: LossConfig,
    eps: Optional[np.ndarray] = None,
    dcr_this_step: bool = True,
) -> GradientResult:
    """Analytic gradients of the total objective for one batch.

    Returns gradients for every model parameter and every codeword, plus the
    loss breakdown and the quantization result (for usage/EMA bookkeeping).
    The codebook gradient combines only the alignment and distribution terms;
    the reconstruction path is blocked by the straight-through rule.
    """
    fw = _forward(m, cb, x, cfg, eps, frozen=None, dcr_this_step=dcr_this_step)
    p = fw["params"]
    xp, n_tok = fw["xp"], fw["n_tok"]
    d = m.latent_dim
    n_elem = xp.size

    grads = {k: np.zeros_like(v) for k, v in p.items()}
    d_entries = np.zeros_like(cb.entries, dtype=np.float64)

    def _decoder_backward(
        z_in: np.ndarray, h1d: np.ndarray, y: np.ndarray, dy: np.ndarray
    ) -> np.ndarray:
        da2 = dy * y * (1.0 - y)
        grads["dec_w2"] += h1d.T @ da2
        grads["dec_b2"] += da2.sum(axis=0)
        dh1 = da2 @ p["dec_w2"].T
        da1 = dh1 * (1.0 - h1d**2)
        grads["dec_w1"] += z_in.T @ da1
        grads["dec_b1"] += da1.sum(axis=0)
        return da1 @ p["dec_w1"].T

    d_z_c = np.zeros_like(fw["z_c"])
    d_mu = np.zeros_like(fw["mu"])
    d_lv = np.zeros_like(fw["lv"])

    # quantized reconstruction path; straight-through sends dz to z_c
    dy_q = 2.0 * (fw["y_q"] - xp) / n_elem
    d_z_c += _decoder_backward(fw["z_st"], fw["h1d_q"], fw["y_q"], dy_q)

    if cfg.vlq_on:
        dy_c = 2.0 * (fw["y_c"] - xp) / n_elem
        d_z_c += _decoder_backward(fw["z_c"], fw["h1d_c"], fw["y_c"], dy_c)
        kl_d_mu, kl_d_lv = losses.kl_grads(fw["g"])
        d_mu += cfg.beta_kl * kl_d_mu
        d_lv += cfg.beta_kl * kl_d_lv

    if cfg.rcs_on:
        rcs_d_zq, rcs_d_mu, _ = losses.rcs_grads(fw["z_q"], fw["g"], cfg.rcs_route)
        d_mu += cfg.lambda_rcs * rcs_d_mu
        np.add.at(d_entries, fw["indices"], cfg.lambda_rcs * rcs_d_zq)

    if cfg.hard_align_on:
        resid = 2.0 * (fw["z_q"] - fw["z_c"]) / (n_tok * d)
        np.add.at(d_entries, fw["indices"], cfg.beta_commit * resid)
        d_z_c += -cfg.beta_commit * resid

    if cfg.dcr_on and dcr_this_step:
        d_entries += cfg.lambda_dcr * losses.dcr_gradient(cb)

    # reparameterization: z_c = mu + exp(0.5 lv) * eps
    d_mu += d_z_c
    if cfg.vlq_on:
        d_lv += d_z_c * fw["eps"] * 0.5 * fw["sigma"]
    clamp_mask = (fw["lv_raw"] > LOG_VAR_MIN) & (fw["lv_raw"] < LOG_VAR_MAX)
    d_out = np.concatenate([d_mu, d_lv * clamp_mask], axis=1)

    grads["enc_w2"] += fw["h1"].T @ d_out
    grads["enc_b2"] += d_out.sum(axis=0)
    dh1 = d_out @ p["enc_w2"].T
    da1 = dh1 * (1.0 - fw["h1"] ** 2)
    grads["enc_w1"] += xp.T @ da1
    grads["enc_b1"] += da1.sum(axis=0)

    return GradientResult(
        param_grads=grads,
        codebook_grad=d_entries,
        losses=fw["breakdown"],
        quantization=fw["qr"],
    )


def flatten_params(params: dict[str, np.ndarray]) -> np.ndarray:
    """Concatenate parameters in PARAM_ORDER (or sorted order for extras)."""
    keys = [k for k in PARAM_ORDER if k in params]
    keys += sorted(k for k in params if k not in PARAM_ORDER)
    return np.concatenate([np.asarray(params[k], dtype=np.float64).ravel() for k in keys])


def unflatten_params(vec: np.ndarray, template: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Inverse of :func:`flatten_params` against a shape template."""
    keys = [k for k in PARAM_ORDER if k in template]
    keys += sorted(k for k in template if k not in PARAM_ORDER)
    out = {}
    offset = 0
    for k in keys:
        size = template[k].size
        out[k] = np.asarray(vec[offset : offset + size], dtype=np.float64).reshape(
            template[k].shape
        )
        offset += size
    if offset != vec.size:
        raise ValueError(f"vector length {vec.size} != template size {offset}")
    return out


@dataclass
class AdamState:
    """First/second moment accumulators plus the schedule parameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    base_lr: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam_state(
    params: dict[str, np.ndarray], base_lr: float, total_steps: int
) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        step=0,
        base_lr=base_lr,
        total_steps=total_steps,
    )


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps)), clamped past the end."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    step = min(step, total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update in place, at the cosine-schedule rate for this step.

    Math runs in float64; parameters and moments are written back in their
    storage dtype, so a float32 training state remains exactly resumable
    from a float32 checkpoint.
    """
    lr = cosine_lr(min(state.step, state.total_steps), state.total_steps, state.base_lr)
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, param in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != param.shape:
            raise ValueError(
                f"gradient shape {grad.shape} != parameter shape {param.shape} "
                f"for '{name}'"
            )
        m64 = state.beta1 * state.m[name].astype(np.float64) + (1.0 - state.beta1) * grad
        v64 = state.beta2 * state.v[name].astype(np.float64) + (1.0 - state.beta2) * grad**2
        state.m[name] = m64.astype(state.m[name].dtype)
        state.v[name] = v64.astype(state.v[name].dtype)
        update = lr * (m64 / bc1) / (np.sqrt(v64 / bc2) + state.eps)
        params[name] = (param.astype(np.float64) - update).astype(param.dtype)
    state.step = t
    return params, state
