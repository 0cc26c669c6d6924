"""Losses, masked metrics, the training loop and a finite-difference gradient checker."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .data import DataSplit, WindowSet
from .errors import ConfigError, DataError, TrainingError
from .model import HimNet, HimNetConfig

log = logging.getLogger(__name__)

# Per-dataset optimizer settings (weight decay, LR milestones, loss).
TRAIN_PRESETS = {
    "METRLA": dict(weight_decay=5e-4, milestones=(30, 40), loss="mae"),
    "PEMSBAY": dict(weight_decay=1e-4, milestones=(25, 35), loss="mae"),
    "PEMS04": dict(weight_decay=1e-4, milestones=(30, 50), loss="huber"),
    "PEMS07": dict(weight_decay=1e-4, milestones=(40, 60), loss="huber"),
    "PEMS08": dict(weight_decay=0.0, milestones=(40, 60, 80), loss="huber"),
}


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 20
    milestones: tuple = (30, 40)
    lr_decay: float = 0.1
    weight_decay: float = 5e-4
    adam_eps: float = 1e-3
    grad_clip: float = 5.0
    loss: str = "mae"
    # Huber threshold in normalized units; scaled by the data std at use.
    huber_delta: float = 1.0
    mask_zeros: bool = True
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if list(self.milestones) != sorted(self.milestones):
            raise ConfigError(f"milestones must be ascending, got {self.milestones}")
        if self.loss not in ("mae", "huber"):
            raise ConfigError(f"loss must be 'mae' or 'huber', got {self.loss!r}")
        for name in ("batch_size", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lr", "weight_decay", "grad_clip", "lr_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.adam_eps <= 0 or self.huber_delta <= 0:
            raise ConfigError("adam_eps and huber_delta must be positive")

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["milestones"] = list(self.milestones)
        return out


# --------------------------------------------------------------------------
# Losses and metrics


def target_mask(y: torch.Tensor, mask_zeros: bool) -> torch.Tensor:
    if mask_zeros:
        return y != 0
    return torch.ones_like(y, dtype=torch.bool)


def _masked(pred, y, mask_zeros):
    if pred.shape != y.shape:
        raise DataError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(y.shape)}")
    mask = target_mask(y, mask_zeros)
    count = int(mask.sum())
    if count == 0:
        raise DataError("degenerate batch: every target is masked")
    return pred - y, mask, count


def mae_loss(pred: torch.Tensor, y: torch.Tensor, mask_zeros: bool = False) -> torch.Tensor:
    err, mask, count = _masked(pred, y, mask_zeros)
    return torch.where(mask, err.abs(), torch.zeros_like(err)).sum() / count


def huber_loss(pred: torch.Tensor, y: torch.Tensor, delta: float = 1.0, mask_zeros: bool = False) -> torch.Tensor:
    if delta <= 0:
        raise ConfigError(f"huber delta must be positive, got {delta}")
    err, mask, count = _masked(pred, y, mask_zeros)
    a = err.abs()
    per = torch.where(a <= delta, 0.5 * err * err, delta * (a - 0.5 * delta))
    return torch.where(mask, per, torch.zeros_like(per)).sum() / count


@dataclass
class EvalReport:
    """Per-horizon (index 0 = first predicted step) and overall masked errors."""
    mae: list
    rmse: list
    mape: list
    avg_mae: float
    avg_rmse: float
    avg_mape: float

    def horizon(self, step: int) -> tuple[float, float, float]:
        """Metrics for 1-based horizon ``step``."""
        i = step - 1
        return self.mae[i], self.rmse[i], self.mape[i]

    def rows(self, horizons: Optional[Sequence[int]] = None, average: bool = True):
        steps = horizons if horizons is not None else range(1, len(self.mae) + 1)
        out = [(str(s), *self.horizon(s)) for s in steps]
        if average:
            out.append(("avg", self.avg_mae, self.avg_rmse, self.avg_mape))
        return out

    def table(self, horizons: Optional[Sequence[int]] = None, average: bool = True) -> str:
        lines = [f"{'horizon':>8} {'MAE':>10} {'RMSE':>10} {'MAPE%':>10}"]
        for name, mae, rmse, mape in self.rows(horizons, average):
            lines.append(f"{name:>8} {mae:10.4f} {rmse:10.4f} {mape:10.4f}")
        return "\n".join(lines)

    def to_csv(self, horizons: Optional[Sequence[int]] = None, average: bool = True) -> str:
        lines = ["horizon,mae,rmse,mape"]
        for name, mae, rmse, mape in self.rows(horizons, average):
            lines.append(f"{name},{mae!r},{rmse!r},{mape!r}")
        return "\n".join(lines) + "\n"


def _errors(pred: np.ndarray, y: np.ndarray, mask: np.ndarray) -> tuple[float, float, float]:
    if not mask.any():
        raise DataError("degenerate batch: every target is masked")
    e = (pred - y)[mask]
    yy = y[mask]
    nz = yy != 0
    mape = float(np.mean(np.abs(e[nz]) / np.abs(yy[nz])) * 100) if nz.any() else float("nan")
    return float(np.mean(np.abs(e))), float(np.sqrt(np.mean(e * e))), mape


def metrics(pred, y, mask_zeros: bool = False) -> EvalReport:
    """Masked MAE / RMSE / MAPE(%) per horizon step and over all steps; inputs [B, T', N]."""
    pred = np.asarray(pred.detach().cpu() if torch.is_tensor(pred) else pred, dtype=np.float64)
    y = np.asarray(y.detach().cpu() if torch.is_tensor(y) else y, dtype=np.float64)
    if pred.shape != y.shape:
        raise DataError(f"prediction shape {pred.shape} != target shape {y.shape}")
    mask = y != 0 if mask_zeros else np.ones(y.shape, dtype=bool)
    per = [_errors(pred[:, t], y[:, t], mask[:, t]) for t in range(y.shape[1])]
    avg = _errors(pred, y, mask)
    return EvalReport([p[0] for p in per], [p[1] for p in per], [p[2] for p in per], *avg)


# --------------------------------------------------------------------------
# Optimization helpers


def lr_at_epoch(epoch: int, base_lr: float, milestones: Sequence[int], decay: float) -> float:
    """Learning rate for 0-based ``epoch``: decayed once per milestone already reached."""
    return base_lr * decay ** sum(1 for m in milestones if epoch >= m)


def clip_grad_norm(parameters: Iterable[torch.Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    return float(nn.utils.clip_grad_norm_(list(parameters), max_norm))


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


def _to_torch(batch, dtype):
    x, y, tod, dow = batch
    return (torch.as_tensor(x, dtype=dtype), torch.as_tensor(y, dtype=dtype),
            torch.as_tensor(tod, dtype=torch.long), torch.as_tensor(dow, dtype=torch.long))


def compute_loss(model: HimNet, pred, y, cfg: TrainConfig) -> torch.Tensor:
    if cfg.loss == "huber":
        return huber_loss(pred, y, cfg.huber_delta * model.stats.std, cfg.mask_zeros)
    return mae_loss(pred, y, cfg.mask_zeros)


@torch.no_grad()
def predict(model: HimNet, part: WindowSet, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Predictions and targets for every sample of ``part``, both [M, T', N]."""
    was_training = model.training
    model.eval()
    dtype = model.head_weight.dtype
    preds, ys = [], []
    for start in range(0, len(part), batch_size):
        x, y, tod, dow = _to_torch(part.batch(np.arange(start, min(start + batch_size, len(part)))), dtype)
        preds.append(model(x, tod, dow).numpy())
        ys.append(y.numpy())
    model.train(was_training)
    return np.concatenate(preds), np.concatenate(ys)


def evaluate(model: HimNet, part: WindowSet, mask_zeros: bool = True, batch_size: int = 64) -> EvalReport:
    pred, y = predict(model, part, batch_size)
    return metrics(pred, y, mask_zeros)


@dataclass
class TrainResult:
    model: HimNet
    optimizer: torch.optim.Optimizer
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    epochs_run: int = 0

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,val_mae,lr"]
        for h in self.history:
            lines.append(f"{h['epoch']},{h['train_loss']!r},{h['val_mae']!r},{h['lr']!r}")
        return "\n".join(lines) + "\n"


def train(split: DataSplit, cfg: TrainConfig, model_cfg: HimNetConfig, model: Optional[HimNet] = None,
          dtype=torch.float32, eval_batch_size: int = 64, callback: Optional[Callable[[dict], None]] = None
          ) -> TrainResult:
    """Train with AdamW + milestone decay + clipping; restore the best-validation state."""
    if min(len(split.train), len(split.val)) == 0:
        raise DataError("train and validation partitions must be non-empty")
    torch.manual_seed(cfg.seed)
    if model is None:
        model = HimNet(model_cfg, split.stats, seed=cfg.seed, dtype=dtype)
    dtype = model.head_weight.dtype
    opt = make_optimizer(model, cfg)
    result = TrainResult(model, opt)
    best_state = None
    wait = 0
    n = len(split.train)
    for epoch in range(cfg.max_epochs):
        lr = lr_at_epoch(epoch, cfg.lr, cfg.milestones, cfg.lr_decay)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total, batches = 0.0, 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            x, y, tod, dow = _to_torch(split.train.batch(order[start:start + cfg.batch_size]), dtype)
            pred = model(x, tod, dow)
            try:
                loss = compute_loss(model, pred, y, cfg)
            except DataError:
                continue  # every target missing
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                clip_grad_norm(model.parameters(), cfg.grad_clip)
            opt.step()
            total += loss.item()
            batches += 1
        val = evaluate(model, split.val, cfg.mask_zeros, eval_batch_size).avg_mae
        record = dict(epoch=epoch, train_loss=total / max(batches, 1), val_mae=val, lr=lr)
        result.history.append(record)
        result.epochs_run = epoch + 1
        log.info("epoch %d  train %.4f  val MAE %.4f  lr %.2e", epoch, record["train_loss"], val, lr)
        if callback:
            callback(record)
        if val < result.best_val:
            result.best_val, result.best_epoch, wait = val, epoch, 0
            best_state = (copy.deepcopy(model.state_dict()), copy.deepcopy(opt.state_dict()))
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state[0])
        opt.load_state_dict(best_state[1])
    return result


# --------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict
    tolerance: float

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.max_rel_error.items() if not v < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def table(self) -> str:
        lines = [f"{'leaf':<20} {'max rel err':>12}  status"]
        for k, v in self.max_rel_error.items():
            lines.append(f"{k:<20} {v:12.3e}  {'ok' if v < self.tolerance else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    if analytic.numel() == 0:
        return 0.0
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(analytic, floor))
    return float(((analytic - numeric).abs() / denom).max())


def check_gradients(loss_fn: Callable[[], torch.Tensor], leaves: dict, tolerance: float = 1e-4,
                    eps: float = 1e-4, corrupt: Optional[dict] = None) -> GradCheckReport:
    """Compare autograd gradients of ``loss_fn()`` with central differences, leaf by leaf.

    ``corrupt`` maps leaf names to functions applied to the analytic gradient
    before comparison (to exercise the harness itself).
    """
    for p in leaves.values():
        p.grad = None
    loss_fn().backward()
    analytic = {k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for k, p in leaves.items()}
    errors = {}
    with torch.no_grad():
        for name, p in leaves.items():
            flat = p.data.view(-1)
            numeric = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = loss_fn().item()
                flat[i] = orig - eps
                lo = loss_fn().item()
                flat[i] = orig
                numeric[i] = (hi - lo) / (2 * eps)
            grad = analytic[name]
            if corrupt and name in corrupt:
                grad = corrupt[name](grad)
            errors[name] = relative_error(grad.view(-1), numeric)
    return GradCheckReport(errors, tolerance)


def grad_check(model_cfg: Optional[HimNetConfig] = None, tolerance: float = 1e-4, batch_size: int = 2,
               seed: int = 0, eps: float = 1e-4, corrupt: Optional[dict] = None) -> GradCheckReport:
    """Finite-difference check of every trainable leaf of a small float64 HimNet under MAE loss."""
    if model_cfg is None:
        model_cfg = HimNetConfig(num_nodes=3, in_steps=2, out_steps=2, hidden_dim=3, order=1,
                                 d_tod=2, d_dow=2, d_s=2, d_st=2, steps_per_day=4)
    from .data import NormStats

    gen = torch.Generator().manual_seed(seed)
    model = HimNet(model_cfg, NormStats(1.5, 2.0), seed=seed, dtype=torch.float64)
    B, N = batch_size, model_cfg.num_nodes
    x = torch.randn(B, model_cfg.in_steps, N, generator=gen, dtype=torch.float64)
    y = torch.randn(B, model_cfg.out_steps, N, generator=gen, dtype=torch.float64) * 2 + 1.5
    tod = torch.randint(0, model_cfg.steps_per_day, (B,), generator=gen)
    dow = torch.randint(0, model_cfg.days_per_week, (B,), generator=gen)
    leaves = dict(model.named_parameters())
    return check_gradients(lambda: mae_loss(model(x, tod, dow), y), leaves, tolerance, eps, corrupt)
