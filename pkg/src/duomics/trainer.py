"""Deterministic pretraining loop, gradient verification, checkpointing.

Determinism contract: given (dataset, TrainConfig, ModelConfig) the final
parameters are bitwise reproducible on a single thread. All randomness is
derived from the config seed through named substreams (init, per-epoch
shuffle, per-epoch per-sample bag draws, per-step mask and style draws), so
no call order or global state leaks in. train() pins torch to one thread.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data_model import Dataset, FormatError, ValidationError, sample_bag
from .encoders import ModelConfig
from .objectives import PretrainModel, build_pretrain_model, derive_seed, total_loss

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MIRC"
CHECKPOINT_VERSION = 1

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8

PRECISIONS = {"f32": torch.float32, "f64": torch.float64}


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 2e-5
    lambda_align: float = 1.0
    lambda_retention: float = 1.0
    lambda_style: float = 1.0
    tau: float = 10.0
    kappa: float = 5.0
    mask_ratio_slide: float = 0.25
    mask_ratio_rna: float = 0.25
    seed: int = 0
    precision: str = "f32"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")
        # learning_rate 0 is allowed so a no-op epoch can serve as an
        # identity check; negative rates are rejected.
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        for name in ("lambda_align", "lambda_retention", "lambda_style"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.tau <= 0 or self.kappa <= 0:
            raise ValidationError("tau and kappa must be positive")
        for name in ("mask_ratio_slide", "mask_ratio_rna"):
            if not 0 < getattr(self, name) < 1:
                raise ValidationError(f"{name} must be in (0, 1)")
        if self.precision not in PRECISIONS:
            raise ValidationError("precision must be 'f32' or 'f64'")


class Adam:
    """Adam with externally visible moment buffers, keyed by parameter name.

    torch.optim.Adam would work, but its state dict keys parameters by
    position; named buffers keep the checkpoint format self-describing.
    """

    def __init__(self, named_params, lr: float):
        self.named = [(n, p) for n, p in named_params]
        self.lr = lr
        self.m = {n: torch.zeros_like(p) for n, p in self.named}
        self.v = {n: torch.zeros_like(p) for n, p in self.named}
        self.t = 0

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - _ADAM_BETA1**self.t
        bc2 = 1.0 - _ADAM_BETA2**self.t
        for name, p in self.named:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m.mul_(_ADAM_BETA1).add_(g, alpha=1.0 - _ADAM_BETA1)
            v.mul_(_ADAM_BETA2).addcmul_(g, g, value=1.0 - _ADAM_BETA2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(_ADAM_EPS), value=-self.lr)


@dataclass
class TrainResult:
    model: PretrainModel
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    optimizer: Adam
    history: list[dict] = field(default_factory=list)

    def epoch_mean(self, key: str, epoch: int) -> float:
        vals = [row[key] for row in self.history if row["epoch"] == epoch]
        return float(np.mean(vals))


def _batch_tensors(
    ds: Dataset, indices, n_fixed: int, dtype: torch.dtype, bag_seeds
) -> tuple[torch.Tensor, torch.Tensor]:
    feats = [sample_bag(ds.samples[i].bag, n_fixed, seed)[0] for i, seed in zip(indices, bag_seeds)]
    bags = torch.tensor(np.stack(feats), dtype=dtype)
    expr = torch.tensor(
        np.stack([ds.samples[i].rna.values for i in indices]), dtype=dtype
    )
    return bags, expr


def train(
    ds: Dataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Run the pretraining loop; optionally write train_log.csv to out_dir."""
    model_cfg.validate()
    cfg.validate()
    n = len(ds.samples)
    if n < cfg.batch_size:
        raise ValidationError(f"dataset has {n} samples, need >= batch_size={cfg.batch_size}")
    torch.set_num_threads(1)

    dtype = PRECISIONS[cfg.precision]
    model = build_pretrain_model(model_cfg, derive_seed(cfg.seed, "init"), dtype)
    optimizer = Adam(model.named_parameters(), cfg.learning_rate)

    history: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, "shuffle", epoch)).permutation(n)
        for start in range(0, n, cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            if len(chunk) < 2:
                logger.warning("skipping trailing batch of size 1 at epoch %d", epoch)
                continue
            bag_seeds = [derive_seed(cfg.seed, "bag", epoch, int(i)) for i in chunk]
            bags, expr = _batch_tensors(ds, chunk, model_cfg.n_fixed, dtype, bag_seeds)
            breakdown = total_loss(
                model,
                bags,
                expr,
                lambda_align=cfg.lambda_align,
                lambda_retention=cfg.lambda_retention,
                lambda_style=cfg.lambda_style,
                tau=cfg.tau,
                kappa=cfg.kappa,
                mask_ratio_slide=cfg.mask_ratio_slide,
                mask_ratio_rna=cfg.mask_ratio_rna,
                seed=derive_seed(cfg.seed, "step", step),
                training=True,
            )
            terms = breakdown.floats()
            if not math.isfinite(terms["l_total"]):
                raise ValidationError(f"non-finite loss at step {step}")
            optimizer.zero_grad()
            breakdown.l_total.backward()
            optimizer.step()
            model.renormalize_centers()
            history.append({"epoch": epoch, "step": step, **terms})
            step += 1

    result = TrainResult(model, model_cfg, cfg, optimizer, history)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_train_log(out_dir / "train_log.csv", history)
    return result


def write_train_log(path: str | Path, history: list[dict]) -> None:
    columns = ["epoch", "step", "l_total", "l_align", "l_retention", "l_style", "l_cluster"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in history:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])


# ------------------------------------------------------------------ gradcheck


@dataclass
class FdReport:
    per_tensor: dict[str, float]
    tolerance: float
    passed: bool

    @property
    def worst(self) -> float:
        return max(self.per_tensor.values()) if self.per_tensor else 0.0


def finite_diff_check(
    model: torch.nn.Module,
    loss_fn,
    tolerance: float = 1e-4,
    coords_per_tensor: int = 20,
    seed: int = 0,
) -> FdReport:
    """Compare analytic gradients of loss_fn() against central differences on
    a seeded subsample of coordinates of every learnable tensor.

    loss_fn must be a pure function of the model parameters (no fresh
    randomness per call). 64-bit parameters are required; float32 roundoff
    swamps the tolerance.
    """
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if any(p.dtype != torch.float64 for _, p in params):
        raise ValidationError("gradient check requires float64 parameters")
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for (name, p), g in zip(params, grads):
        flat = p.data.view(-1)
        n_coords = min(coords_per_tensor, flat.numel())
        idx = rng.choice(flat.numel(), size=n_coords, replace=False)
        worst = 0.0
        for i in idx:
            orig = float(flat[i])
            h = 1e-5 * max(1.0, abs(orig))
            with torch.no_grad():
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            analytic = 0.0 if g is None else float(g.view(-1)[i])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
            worst = max(worst, err)
        report[name] = worst
    return FdReport(report, tolerance, all(v <= tolerance for v in report.values()))


def total_loss_check_fn(model: PretrainModel, bags: torch.Tensor, expr: torch.Tensor, **kwargs):
    """Closure over total_loss suitable for finite_diff_check: retention
    targets are frozen at the current parameters (they are stop-gradients,
    so perturbed re-evaluations must not move them)."""
    with torch.no_grad():
        ref = model.forward_encoders(bags, expr)
    frozen = (ref.slide_tokens.clone(), ref.rna_tokens.clone())

    def fn():
        return total_loss(
            model, bags, expr, training=True, retention_targets=frozen, **kwargs
        ).l_total

    return fn


# ---------------------------------------------------------------- checkpoints


def _write_record(fh, name: str, array: np.ndarray) -> None:
    encoded = name.encode()
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", array.ndim))
    for dim in array.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError("checkpoint truncated")
    return data


def _read_record(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode()
    (rank,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(shape)
    return name, data


_CFG_FIELDS = (
    "d_p", "d_model", "d_t", "n_heads", "depth", "mlp_ratio",
    "n_fixed", "g_t", "k_genes", "d_z", "n_clusters",
)


def save_checkpoint(
    path: str | Path,
    model: PretrainModel,
    optimizer: Adam | None = None,
    step: int = 0,
    precision: str = "f32",
) -> None:
    """Single binary file: magic, version, then (name, rank, dims, float64
    data) records covering parameters, optimizer moments, and scalar
    metadata sufficient to rebuild the model."""
    records: list[tuple[str, np.ndarray]] = []
    for name, p in model.named_parameters():
        records.append((name, p.detach().numpy(force=True).astype(np.float64)))
    if optimizer is not None:
        for name, _ in optimizer.named:
            records.append((f"adam.m.{name}", optimizer.m[name].numpy(force=True).astype(np.float64)))
            records.append((f"adam.v.{name}", optimizer.v[name].numpy(force=True).astype(np.float64)))
        records.append(("meta.adam_t", np.float64(optimizer.t)))
        records.append(("meta.lr", np.float64(optimizer.lr)))
    records.append(("meta.step", np.float64(step)))
    records.append(("meta.precision", np.float64(0 if precision == "f32" else 1)))
    for field_name in _CFG_FIELDS:
        records.append((f"meta.cfg.{field_name}", np.float64(getattr(model.cfg, field_name))))

    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(records)))
        for name, array in records:
            _write_record(fh, name, np.asarray(array))


@dataclass
class LoadedCheckpoint:
    model: PretrainModel
    model_cfg: ModelConfig
    optimizer: Adam | None
    step: int
    precision: str


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    with open(path, "rb") as fh:
        magic, version, n_records = struct.unpack("<4sII", _read_exact(fh, 12))
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        records = dict(_read_record(fh) for _ in range(n_records))
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint records")

    missing = [f"meta.cfg.{f}" for f in _CFG_FIELDS if f"meta.cfg.{f}" not in records]
    if missing:
        raise FormatError(f"checkpoint missing config records: {missing}")
    cfg = ModelConfig(**{f: int(records[f"meta.cfg.{f}"]) for f in _CFG_FIELDS})
    precision = "f32" if int(records.get("meta.precision", 0)) == 0 else "f64"
    dtype = PRECISIONS[precision]
    model = PretrainModel(cfg).to(dtype)

    param_names = {name for name, _ in model.named_parameters()}
    known_meta = {"meta.step", "meta.precision", "meta.adam_t", "meta.lr"}
    known_meta |= {f"meta.cfg.{f}" for f in _CFG_FIELDS}
    for name in records:
        bare = name
        if name.startswith("adam.m.") or name.startswith("adam.v."):
            bare = name[len("adam.m."):]
            if bare in param_names:
                continue
        elif name in known_meta or name in param_names:
            continue
        raise FormatError(f"unknown tensor name in checkpoint: {name}")

    state = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in records:
                raise FormatError(f"checkpoint missing tensor: {name}")
            value = torch.tensor(records[name], dtype=dtype).reshape(p.shape)
            p.copy_(value)
            state[name] = p

    optimizer = None
    if "meta.adam_t" in records:
        optimizer = Adam(model.named_parameters(), float(records.get("meta.lr", 0.0)))
        optimizer.t = int(records["meta.adam_t"])
        for name, p in optimizer.named:
            m_key, v_key = f"adam.m.{name}", f"adam.v.{name}"
            if m_key in records:
                optimizer.m[name] = torch.tensor(records[m_key], dtype=dtype).reshape(p.shape)
            if v_key in records:
                optimizer.v[name] = torch.tensor(records[v_key], dtype=dtype).reshape(p.shape)

    return LoadedCheckpoint(model, cfg, optimizer, int(records["meta.step"]), precision)
