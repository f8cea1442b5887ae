"""Training orchestration: ablation configs, runs, checkpoints, reports.

A run is fully determined by its config (including the seed): data, model
and codebook init, shuffles, and sampling noise all derive from
``SeedSequence((seed, stream, epoch))``, so single-threaded reruns emit
byte-identical CSVs and checkpoints, and a run resumed from the epoch-t
checkpoint reproduces epoch t+1 exactly.

Named ablation configurations:

========  ====  ====  ====  ==============
name      VLQ   RCS   DCR   hard alignment
========  ====  ====  ====  ==============
baseline  off   off   off   on
M1        on    off   off   off
M2        on    on    off   off
M3        on    off   on    off
full      on    on    on    off
========  ====  ====  ====  ==============

``baseline`` is a deterministic autoencoder with nearest-neighbor VQ and the
plain l2 alignment penalty; it decodes only the quantized path and computes
no KL/RCS/DCR terms at all.

Checkpoint format (little-endian throughout), version 1:

* 8-byte magic ``VAEVQCK1`` (7-byte tag + 1 version character)
* u32 length + canonical config text (``key = value`` lines, field order)
* u32 completed epochs, u32 optimizer steps, u32 root seed,
  u32 codebook generation, u32 array count
* 30 arrays, each ``u32 dtype code (0=f32, 1=u32), u32 ndim, u32 dims...,
  payload``, in this order: the 8 model parameters (enc_w1, enc_b1, enc_w2,
  enc_b2, dec_w1, dec_b1, dec_w2, dec_b2; float32), codebook entries
  (float32), usage counts (uint32), EMA counts (float32), EMA sums
  (float32), then Adam first moments and second moments for the 8 model
  parameters plus the codebook (float32).

The RNG state is the (root seed, completed epochs) pair stored above; all
stochastic streams are re-derived from it.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import codebook as codebook_mod
from . import model as model_mod
from .codebook import Codebook, init_codebook, record_usage, reset_usage, utilization
from .data import generate_mixture
from .losses import LossBreakdown, LossConfig
from .metrics import EVAL_CSV_HEADER, EvalReport, perplexity
from .metrics import ssim as ssim_metric
from .model import (
    PARAM_ORDER,
    AdamState,
    Model,
    TrainingDiverged,
    adam_step,
    compute_gradients,
    init_adam_state,
    init_model,
)
from .quantizer import quantize_batch

CHECKPOINT_MAGIC_TAG = b"VAEVQCK"
CHECKPOINT_VERSION = b"1"


class ConfigError(ValueError):
    """Bad config file contents or inconsistent configuration."""


class CheckpointFormatError(ValueError):
    """Bad magic, unsupported version, truncation, or shape mismatch."""


# Hard alignment is the standard VQ commitment penalty; the soft coherence
# loss replaces it wherever RCS is enabled, so the non-RCS configurations
# keep it (a codebook with no alignment term would never train).
NAMED_CONFIGS = {
    "baseline": dict(vlq_on=False, rcs_on=False, dcr_on=False, hard_align_on=True),
    "M1": dict(vlq_on=True, rcs_on=False, dcr_on=False, hard_align_on=True),
    "M2": dict(vlq_on=True, rcs_on=True, dcr_on=False, hard_align_on=False),
    "M3": dict(vlq_on=True, rcs_on=False, dcr_on=True, hard_align_on=True),
    "full": dict(vlq_on=True, rcs_on=True, dcr_on=True, hard_align_on=False),
}


@dataclass
class TrainConfig:
    """Everything a run needs; named configs force their ablation toggles."""

    config_name: str = "custom"
    seed: int = 1
    vlq_on: bool = True
    rcs_on: bool = True
    dcr_on: bool = True
    ema_on: bool = False
    hard_align_on: bool = False
    lambda_rcs: float = 1.0
    lambda_dcr: float = 0.1
    beta_kl: float = 1e-3
    beta_commit: float = 0.25
    rcs_route: str = "both"
    codebook_size: int = 256
    latent_dim: int = 8
    image_size: int = 16
    patch_size: int = 8
    hidden_dim: int = 128
    n_train: int = 4096
    n_test: int = 512
    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 1e-4
    dcr_every_n_steps: int = 1
    ema_decay: float = 0.99

    def __post_init__(self) -> None:
        if self.config_name in NAMED_CONFIGS:
            forced = NAMED_CONFIGS[self.config_name]
            actual = {key: getattr(self, key) for key in forced}
            if actual != forced:
                raise ConfigError(
                    f"config '{self.config_name}' forces toggles {forced}, got {actual}"
                )
            if self.ema_on:
                raise ConfigError(
                    f"named config '{self.config_name}' does not use EMA updates"
                )
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if min(self.codebook_size, self.latent_dim, self.hidden_dim) < 1:
            raise ConfigError("codebook_size, latent_dim, hidden_dim must be >= 1")
        if self.image_size < 8 or self.patch_size < 1:
            raise ConfigError("image_size must be >= 8 and patch_size >= 1")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size "
                f"{self.patch_size}"
            )
        if min(self.n_train, self.n_test, self.batch_size) < 1:
            raise ConfigError("n_train, n_test, batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.dcr_every_n_steps < 1:
            raise ConfigError("dcr_every_n_steps must be >= 1")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in (0, 1)")
        if self.rcs_route not in ("both", "encoder", "codebook"):
            raise ConfigError(f"unknown rcs_route {self.rcs_route!r}")

    @property
    def n_tokens(self) -> int:
        grid = self.image_size // self.patch_size
        return grid * grid

    @property
    def run_id(self) -> str:
        return f"{self.config_name}_seed{self.seed}"

    def loss_config(self) -> LossConfig:
        return LossConfig(
            vlq_on=self.vlq_on,
            rcs_on=self.rcs_on,
            dcr_on=self.dcr_on,
            hard_align_on=self.hard_align_on,
            lambda_rcs=self.lambda_rcs,
            lambda_dcr=self.lambda_dcr,
            beta_kl=self.beta_kl,
            beta_commit=self.beta_commit,
            rcs_route=self.rcs_route,
        )


def make_config(name: str, seed: int = 1, **overrides) -> TrainConfig:
    """Build a named (or custom) config; toggles of named configs are fixed."""
    values: dict = dict(config_name=name, seed=seed)
    if name in NAMED_CONFIGS:
        clash = set(overrides) & (set(NAMED_CONFIGS[name]) | {"ema_on"})
        if clash:
            raise ConfigError(
                f"cannot override toggles {sorted(clash)} of named config '{name}'"
            )
        values.update(NAMED_CONFIGS[name])
    elif name != "custom":
        raise ConfigError(
            f"unknown config name {name!r}; expected one of "
            f"{sorted(NAMED_CONFIGS)} or 'custom'"
        )
    values.update(overrides)
    return TrainConfig(**values)


def config_to_text(cfg: TrainConfig) -> str:
    """Canonical flat ``key = value`` serialization in field order."""
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "".join(line + "\n" for line in lines)


def config_from_text(text: str) -> TrainConfig:
    """Parse ``key = value`` lines; unknown or duplicate keys are errors."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        ftype = fields[key].type
        try:
            if ftype == "bool":
                if value.lower() not in ("true", "false"):
                    raise ValueError(f"expected true/false, got {value!r}")
                values[key] = value.lower() == "true"
            elif ftype == "int":
                values[key] = int(value)
            elif ftype == "float":
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return TrainConfig(**values)


def load_config_file(path) -> TrainConfig:
    return config_from_text(Path(path).read_text(encoding="utf-8"))


# Seed-stream tags; every random draw in a run derives from one of these.
_STREAM_MODEL = 1
_STREAM_CODEBOOK = 2
_STREAM_TRAIN_DATA = 3
_STREAM_TEST_DATA = 4
_STREAM_SHUFFLE = 5
_STREAM_NOISE = 6


def derived_seed(root_seed: int, stream: int, index: int = 0) -> int:
    return int(np.random.SeedSequence((root_seed, stream, index)).generate_state(1)[0])


@dataclass
class Checkpoint:
    config: TrainConfig
    epoch: int
    step: int
    model: Model
    codebook: Codebook
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]


@dataclass
class EpochRecord:
    epoch: int
    report: EvalReport
    train_losses: Optional[LossBreakdown]


_DTYPE_F32 = 0
_DTYPE_U32 = 1


def _write_array(chunks: list[bytes], arr: np.ndarray, code: int) -> None:
    dtype = "<f4" if code == _DTYPE_F32 else "<u4"
    arr = np.ascontiguousarray(arr.astype(dtype))
    chunks.append(struct.pack("<II", code, arr.ndim))
    chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    chunks.append(arr.tobytes())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint {self.path}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def array(self) -> np.ndarray:
        code, ndim = self.u32(), self.u32()
        if code not in (_DTYPE_F32, _DTYPE_U32):
            raise CheckpointFormatError(
                f"bad array dtype code {code} in {self.path}"
            )
        shape = tuple(self.u32() for _ in range(ndim))
        dtype = "<f4" if code == _DTYPE_F32 else "<u4"
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = self.take(count * 4)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def _adam_keys() -> tuple[str, ...]:
    return PARAM_ORDER + ("codebook",)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    config_text = config_to_text(ckpt.config).encode("utf-8")
    chunks: list[bytes] = [CHECKPOINT_MAGIC_TAG + CHECKPOINT_VERSION]
    chunks.append(struct.pack("<I", len(config_text)))
    chunks.append(config_text)
    usage = ckpt.codebook.usage_counts
    if np.any(usage < 0) or np.any(usage > 0xFFFFFFFF):
        raise CheckpointFormatError("usage counts exceed the uint32 range")
    header = struct.pack(
        "<IIIII",
        ckpt.epoch,
        ckpt.step,
        ckpt.config.seed,
        ckpt.codebook.generation,
        8 + 4 + 2 * len(_adam_keys()),
    )
    chunks.append(header)
    for name in PARAM_ORDER:
        _write_array(chunks, ckpt.model.params[name], _DTYPE_F32)
    _write_array(chunks, ckpt.codebook.entries, _DTYPE_F32)
    _write_array(chunks, usage, _DTYPE_U32)
    _write_array(chunks, ckpt.codebook.ema_counts, _DTYPE_F32)
    _write_array(chunks, ckpt.codebook.ema_sums, _DTYPE_F32)
    for store in (ckpt.adam_m, ckpt.adam_v):
        for name in _adam_keys():
            _write_array(chunks, store[name], _DTYPE_F32)
    Path(path).write_bytes(b"".join(chunks))


def _expected_param_shapes(cfg: TrainConfig) -> dict[str, tuple[int, ...]]:
    pixels = cfg.patch_size * cfg.patch_size
    d, h = cfg.latent_dim, cfg.hidden_dim
    return {
        "enc_w1": (pixels, h),
        "enc_b1": (h,),
        "enc_w2": (h, 2 * d),
        "enc_b2": (2 * d,),
        "dec_w1": (d, h),
        "dec_b1": (h,),
        "dec_w2": (h, pixels),
        "dec_b2": (pixels,),
    }


def load_checkpoint(path) -> Checkpoint:
    reader = _Reader(Path(path).read_bytes(), path)
    magic = reader.take(8)
    if magic[:7] != CHECKPOINT_MAGIC_TAG:
        raise CheckpointFormatError(f"bad checkpoint magic {magic!r} in {path}")
    if magic[7:8] != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version {magic[7:8]!r} in {path} "
            f"(expected {CHECKPOINT_VERSION!r})"
        )
    config_text = reader.take(reader.u32()).decode("utf-8")
    try:
        cfg = config_from_text(config_text)
    except ConfigError as exc:
        raise CheckpointFormatError(f"bad embedded config in {path}: {exc}") from exc
    epoch, step, seed, generation, n_arrays = (reader.u32() for _ in range(5))
    if seed != cfg.seed:
        raise CheckpointFormatError(f"seed field disagrees with config in {path}")
    if n_arrays != 8 + 4 + 2 * len(_adam_keys()):
        raise CheckpointFormatError(f"unexpected array count {n_arrays} in {path}")

    expected = _expected_param_shapes(cfg)
    params = {}
    for name in PARAM_ORDER:
        arr = reader.array()
        if arr.shape != expected[name]:
            raise CheckpointFormatError(
                f"parameter '{name}' has shape {arr.shape}, expected "
                f"{expected[name]} in {path}"
            )
        params[name] = arr
    entries = reader.array()
    if entries.shape != (cfg.codebook_size, cfg.latent_dim):
        raise CheckpointFormatError(
            f"codebook shape {entries.shape} does not match config "
            f"({cfg.codebook_size}, {cfg.latent_dim}) in {path}"
        )
    usage = reader.array()
    ema_counts = reader.array()
    ema_sums = reader.array()
    adam_m = {name: reader.array() for name in _adam_keys()}
    adam_v = {name: reader.array() for name in _adam_keys()}

    model = Model(
        image_size=cfg.image_size,
        patch_size=cfg.patch_size,
        latent_dim=cfg.latent_dim,
        hidden_dim=cfg.hidden_dim,
        params=params,
    )
    cb = Codebook(
        entries=entries,
        usage_counts=usage.astype(np.int64),
        ema_counts=ema_counts,
        ema_sums=ema_sums,
        generation=generation,
    )
    return Checkpoint(
        config=cfg,
        epoch=epoch,
        step=step,
        model=model,
        codebook=cb,
        adam_m=adam_m,
        adam_v=adam_v,
    )


def evaluate(
    model: Model,
    cb: Codebook,
    images: np.ndarray,
    run_id: str,
    config_name: str,
    epoch: int,
    batch_size: int = 64,
) -> EvalReport:
    """One deterministic evaluation pass (zero-noise latents).

    Usage counters are reset first, so utilization and perplexity describe
    exactly this pass's assignment stream.  Reported MSE/PSNR/SSIM compare
    the quantized-path reconstruction against the input.
    """
    images = np.asarray(images, dtype=np.float64)
    reset_usage(cb)
    sq_err = 0.0
    ssim_sum = 0.0
    for start in range(0, images.shape[0], batch_size):
        batch = images[start : start + batch_size]
        g = model.encode(batch)
        qr = quantize_batch(g.mu, cb)
        record_usage(cb, qr.to_assignment())
        x_hat = model.decode(qr.z_st)
        sq_err += float(np.sum((batch - x_hat) ** 2))
        ssim_sum += sum(ssim_metric(a, b) for a, b in zip(batch, x_hat))
    mse_value = sq_err / images.size
    return EvalReport.from_mse(
        run_id=run_id,
        config=config_name,
        epoch=epoch,
        mse_value=mse_value,
        ssim_value=ssim_sum / images.shape[0],
        utilization=utilization(cb),
        perplexity_value=perplexity(cb.usage_counts),
        n_images=images.shape[0],
    )


LOSS_CSV_HEADER = "epoch,rec_c,rec_q,kl,rcs,dcr,hard_align,total"

_LOSS_FIELDS = ("rec_c", "rec_q", "kl", "rcs", "dcr", "hard_align", "total")


def _loss_csv_row(epoch: int, lb: LossBreakdown) -> str:
    cells = [str(epoch)]
    for name in _LOSS_FIELDS:
        value = getattr(lb, name)
        cells.append("" if value is None else repr(float(value)))
    return ",".join(cells)


def _mean_breakdown(breakdowns: list[LossBreakdown]) -> LossBreakdown:
    def _mean(name: str) -> Optional[float]:
        values = [getattr(b, name) for b in breakdowns if getattr(b, name) is not None]
        return float(np.mean(values)) if values else None

    return LossBreakdown(
        rec_c=_mean("rec_c"),
        rec_q=_mean("rec_q"),
        kl=_mean("kl"),
        rcs=_mean("rcs"),
        dcr=_mean("dcr"),
        hard_align=_mean("hard_align"),
        total=_mean("total"),
    )


def train_run(
    cfg: TrainConfig,
    out_dir,
    resume_from=None,
    export_test_data: bool = False,
) -> list[EpochRecord]:
    """Train one configuration, writing CSVs and checkpoints into ``out_dir``.

    Emits ``metrics.csv`` (one evaluation row per epoch, including epoch 0
    for the initialized state), ``losses.csv`` (mean training losses per
    epoch), ``config.txt``, per-epoch checkpoints under ``checkpoints/``,
    and the final state as ``checkpoint.ckpt``.

    ``resume_from`` must be a checkpoint of an identical config; training
    continues from its epoch, and this invocation's files cover only the
    epochs it ran.  On a non-finite loss the last completed epoch's state is
    persisted to ``checkpoint.ckpt`` and the error re-raised.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    train_set = generate_mixture(
        cfg.n_train, cfg.image_size, derived_seed(cfg.seed, _STREAM_TRAIN_DATA)
    )
    test_set = generate_mixture(
        cfg.n_test, cfg.image_size, derived_seed(cfg.seed, _STREAM_TEST_DATA)
    )
    if export_test_data:
        from .data import save_dataset

        save_dataset(out_dir / "test_data", test_set, prefix="test")

    steps_per_epoch = math.ceil(cfg.n_train / cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if config_to_text(ckpt.config) != config_to_text(cfg):
            raise ConfigError(
                "resume checkpoint config does not match the requested config"
            )
        model, cb = ckpt.model, ckpt.codebook
        adam = AdamState(
            m=ckpt.adam_m,
            v=ckpt.adam_v,
            step=ckpt.step,
            base_lr=cfg.base_lr,
            total_steps=total_steps,
        )
        start_epoch = ckpt.epoch
        if start_epoch > cfg.epochs:
            raise ConfigError(
                f"checkpoint is at epoch {start_epoch}, beyond epochs={cfg.epochs}"
            )
    else:
        model = init_model(
            cfg.image_size,
            cfg.patch_size,
            cfg.latent_dim,
            cfg.hidden_dim,
            derived_seed(cfg.seed, _STREAM_MODEL),
        )
        cb = init_codebook(
            cfg.codebook_size, cfg.latent_dim, derived_seed(cfg.seed, _STREAM_CODEBOOK)
        )
        adam = init_adam_state(
            {**model.params, "codebook": cb.entries}, cfg.base_lr, total_steps
        )
        start_epoch = 0

    loss_cfg = cfg.loss_config()
    history: list[EpochRecord] = []
    metric_rows: list[str] = []
    loss_rows: list[str] = []

    def _snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(
            config=cfg,
            epoch=epoch,
            step=adam.step,
            model=model.copy(),
            codebook=cb.copy(),
            adam_m={k: v.copy() for k, v in adam.m.items()},
            adam_v={k: v.copy() for k, v in adam.v.items()},
        )

    if start_epoch == 0:
        report = evaluate(
            model, cb, test_set.values, cfg.run_id, cfg.config_name, 0, cfg.batch_size
        )
        history.append(EpochRecord(epoch=0, report=report, train_losses=None))
        metric_rows.append(report.to_csv_row())

    last_good = _snapshot(start_epoch)

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        perm = np.random.default_rng(
            derived_seed(cfg.seed, _STREAM_SHUFFLE, epoch)
        ).permutation(cfg.n_train)
        noise_rng = np.random.default_rng(derived_seed(cfg.seed, _STREAM_NOISE, epoch))
        epoch_breakdowns: list[LossBreakdown] = []

        for b in range(steps_per_epoch):
            batch = train_set.values[perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            n_tok = batch.shape[0] * cfg.n_tokens
            eps = (
                noise_rng.standard_normal((n_tok, cfg.latent_dim))
                if cfg.vlq_on
                else None
            )
            dcr_this_step = cfg.dcr_on and (adam.step % cfg.dcr_every_n_steps == 0)
            try:
                result = compute_gradients(
                    model, cb, batch, loss_cfg, eps, dcr_this_step=dcr_this_step
                )
            except TrainingDiverged:
                save_checkpoint(out_dir / "checkpoint.ckpt", last_good)
                _write_run_files(out_dir, cfg, metric_rows, loss_rows)
                raise
            record_usage(cb, result.quantization.to_assignment())

            params = {k: model.params[k] for k in PARAM_ORDER}
            grads = dict(result.param_grads)
            if not cfg.ema_on:
                params["codebook"] = cb.entries
                grads["codebook"] = result.codebook_grad
            adam_step(adam, params, grads)
            for name in PARAM_ORDER:
                model.params[name] = params[name]
            if cfg.ema_on:
                codebook_mod.ema_update(
                    cb,
                    result.quantization.z_c,
                    result.quantization.to_assignment(),
                    cfg.ema_decay,
                )
            else:
                cb.entries = params["codebook"]
                cb.generation += 1
            epoch_breakdowns.append(result.losses)

        report = evaluate(
            model, cb, test_set.values, cfg.run_id, cfg.config_name, epoch,
            cfg.batch_size,
        )
        epoch_losses = _mean_breakdown(epoch_breakdowns)
        history.append(
            EpochRecord(epoch=epoch, report=report, train_losses=epoch_losses)
        )
        metric_rows.append(report.to_csv_row())
        loss_rows.append(_loss_csv_row(epoch, epoch_losses))
        last_good = _snapshot(epoch)
        save_checkpoint(ckpt_dir / f"epoch_{epoch:04d}.ckpt", last_good)

    save_checkpoint(out_dir / "checkpoint.ckpt", last_good)
    _write_run_files(out_dir, cfg, metric_rows, loss_rows)
    return history


def _write_run_files(
    out_dir: Path, cfg: TrainConfig, metric_rows: list[str], loss_rows: list[str]
) -> None:
    (out_dir / "config.txt").write_text(config_to_text(cfg), encoding="utf-8")
    (out_dir / "metrics.csv").write_text(
        "".join(line + "\n" for line in [EVAL_CSV_HEADER] + metric_rows),
        encoding="utf-8",
    )
    (out_dir / "losses.csv").write_text(
        "".join(line + "\n" for line in [LOSS_CSV_HEADER] + loss_rows),
        encoding="utf-8",
    )


ABLATION_CSV_HEADER = "config,seed,epoch,mse,psnr,ssim,utilization,perplexity"


def _final_report(run_dir: Path) -> tuple[TrainConfig, EvalReport]:
    config_path = run_dir / "config.txt"
    metrics_path = run_dir / "metrics.csv"
    if not config_path.is_file() or not metrics_path.is_file():
        raise ValueError(f"run directory {run_dir} is missing config.txt/metrics.csv")
    cfg = config_from_text(config_path.read_text(encoding="utf-8"))
    lines = [
        line
        for line in metrics_path.read_text(encoding="utf-8").splitlines()
        if line and not line.startswith("run_id,")
    ]
    if not lines:
        raise ValueError(f"{metrics_path} contains no evaluation rows")
    reports = [EvalReport.from_csv_row(line) for line in lines]
    return cfg, max(reports, key=lambda r: r.epoch)


def report_ablation(run_dirs, out_csv=None) -> str:
    """Tabulate final-epoch metrics per run, with per-config medians.

    One row per run sorted by (config, seed), plus a ``median`` row after
    each config that has more than one run.  Returns the CSV text and
    optionally writes it to ``out_csv``.
    """
    run_dirs = [Path(p) for p in run_dirs]
    if len(run_dirs) < 2:
        raise ValueError(f"ablation report needs at least 2 runs, got {len(run_dirs)}")
    finals = [_final_report(p) for p in run_dirs]

    by_config: dict[str, list[tuple[TrainConfig, EvalReport]]] = {}
    for cfg, rep in finals:
        by_config.setdefault(cfg.config_name, []).append((cfg, rep))

    lines = [ABLATION_CSV_HEADER]
    for name in sorted(by_config):
        group = sorted(by_config[name], key=lambda item: item[0].seed)
        for cfg, rep in group:
            lines.append(
                ",".join(
                    [
                        name,
                        str(cfg.seed),
                        str(rep.epoch),
                        repr(rep.mse),
                        repr(rep.psnr),
                        repr(rep.ssim),
                        repr(rep.utilization),
                        repr(rep.perplexity),
                    ]
                )
            )
        if len(group) > 1:
            reps = [rep for _, rep in group]
            lines.append(
                ",".join(
                    [
                        name,
                        "median",
                        str(int(np.median([r.epoch for r in reps]))),
                        repr(float(np.median([r.mse for r in reps]))),
                        repr(float(np.median([r.psnr for r in reps]))),
                        repr(float(np.median([r.ssim for r in reps]))),
                        repr(float(np.median([r.utilization for r in reps]))),
                        repr(float(np.median([r.perplexity for r in reps]))),
                    ]
                )
            )
    text = "".join(line + "\n" for line in lines)
    if out_csv is not None:
        Path(out_csv).write_text(text, encoding="utf-8")
    return text
