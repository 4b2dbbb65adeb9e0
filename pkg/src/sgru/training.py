"""MAE objective, Adam, and the epoch loop with early stopping."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import DataError, Standardizer, WindowedDataset
from .metrics import DEFAULT_MAPE_THRESHOLD, MetricsReport, compute_metrics
from .model import (STREAM_SHUFFLE, Checkpoint, ModelDims, SgruParams, Variant, clone_params,
                    init_params, rng_for, sgru_forward)
from .tensor import DimensionError, NumericError, Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, message, checkpoint: Checkpoint | None, history: list):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history


@dataclass
class TrainConfig:
    variant: str = "sgru"
    P: int = 12
    F: int = 12
    d: int = 2
    d_emb: int = 16
    H: int = 64
    D_out: int = 1
    batch_size: int = 64
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 100
    patience: int = 15
    seed: int = 1
    gradient_clip_norm: float = 5.0
    # optional cap on optimizer steps; None trains by epochs only
    max_steps: int | None = None
    mape_threshold: float = DEFAULT_MAPE_THRESHOLD

    def __post_init__(self):
        self.variant = Variant(self.variant).value
        for name in ("P", "F", "d", "d_emb", "H", "D_out", "batch_size", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("adam_eps", "gradient_clip_norm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.patience > self.max_epochs:
            raise ValueError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive when given")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def dims_for(self, data: WindowedDataset) -> ModelDims:
        if (data.P, data.F) != (self.P, self.F):
            raise DimensionError(f"config (P,F)=({self.P},{self.F}) but dataset has ({data.P},{data.F})")
        return ModelDims(P=self.P, F=self.F, N=data.N, D=data.D, D_out=self.D_out,
                         d=self.d, d_emb=self.d_emb, H=self.H)


# ---------------------------------------------------------------- objective

def mae_loss(pred: Tensor, target) -> Tensor:
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mae_loss: pred {pred.shape} vs target {target.shape}")
    return T.mean(T.absolute(pred - target))


def to_original_scale(out: Tensor, scaler: Standardizer | None) -> Tensor:
    if scaler is None:
        return out
    k = out.shape[-1]
    return out * scaler.std[:k] + scaler.mean[:k]


# --------------------------------------------------------------------- adam

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params) -> AdamState:
        tensors = [p for _, p in params]
        return cls([np.zeros(p.shape) for p in tensors], [np.zeros(p.shape) for p in tensors])


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


def adam_step(params, grads, state: AdamState, cfg: TrainConfig) -> float:
    """Update (name, tensor) pairs in place; returns the pre-clip global gradient norm."""
    params = list(params)
    grads = [np.zeros(p.shape) if g is None else g for (_, p), g in zip(params, grads)]
    for (name, _), g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    grads, norm = clip_by_global_norm(grads, cfg.gradient_clip_norm)
    state.t += 1
    b1, b2, lr, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.learning_rate, cfg.adam_eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, ((_, p), g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return norm


# ---------------------------------------------------------------- inference

def predict_windows(params: SgruParams, inputs: np.ndarray, scaler: Standardizer | None,
                    batch_size: int = 256) -> np.ndarray:
    """Forecasts in original units for standardized windows (W, P, N, D)."""
    outs = []
    with T.no_grad():
        for start in range(0, inputs.shape[0], batch_size):
            out = sgru_forward(inputs[start:start + batch_size], params)
            outs.append(to_original_scale(out, scaler).data)
    if not outs:
        d = params.dims
        return np.zeros((0, d.F, d.N, d.D_out))
    return np.concatenate(outs, axis=0)


def split_mae(params: SgruParams, data: WindowedDataset, split: str) -> float:
    pred = predict_windows(params, data.inputs[split], data.standardizer)
    return float(np.mean(np.abs(pred - data.targets[split])))


def _checkpoint_scaler(ckpt: Checkpoint, data: WindowedDataset) -> Standardizer:
    if ckpt.standardizer is not None:
        return Standardizer.from_dict(ckpt.standardizer)
    return data.standardizer


def check_compatible(ckpt: Checkpoint, data: WindowedDataset) -> None:
    d = ckpt.params.dims
    if (d.P, d.F, d.N, d.D) != (data.P, data.F, data.N, data.D):
        raise DimensionError(f"checkpoint expects (P,F,N,D)={(d.P, d.F, d.N, d.D)}, "
                             f"data has {(data.P, data.F, data.N, data.D)}")


def evaluate(ckpt: Checkpoint, data: WindowedDataset, split: str = "test",
             horizons=(3, 6, 9, 12), mape_threshold: float = DEFAULT_MAPE_THRESHOLD) -> MetricsReport:
    check_compatible(ckpt, data)
    if data.count(split) == 0:
        raise DataError(f"split {split!r} has no windows")
    pred = predict_windows(ckpt.params, data.inputs[split], _checkpoint_scaler(ckpt, data))
    horizons = [h for h in horizons if h <= data.F]
    return compute_metrics(pred, data.targets[split], mape_threshold, horizons=horizons)


# -------------------------------------------------------------------- train

@dataclass
class EpochRecord:
    epoch: int
    train_mae: float
    val_mae: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochRecord] = field(default_factory=list)
    steps: int = 0
    best_epoch: int = 0
    # parameters after the last optimizer step (the checkpoint holds the best-val ones)
    final_params: SgruParams | None = None

    def __iter__(self):
        # unpacks as (checkpoint, history)
        return iter((self.checkpoint, self.history))


def history_csv(history: list[EpochRecord]) -> str:
    lines = ["epoch,train_mae,val_mae"]
    lines += [f"{r.epoch},{r.train_mae!r},{r.val_mae!r}" for r in history]
    return "\n".join(lines) + "\n"


def batch_loss(params: SgruParams, X: np.ndarray, Y: np.ndarray, scaler: Standardizer) -> Tensor:
    return mae_loss(to_original_scale(sgru_forward(X, params), scaler), Y)


def train(cfg: TrainConfig, data: WindowedDataset) -> TrainResult:
    if data.count("train") == 0 or data.count("val") == 0:
        raise DataError("training needs at least one train and one val window")
    dims = cfg.dims_for(data)
    params = init_params(dims, cfg.variant, cfg.seed)
    named = list(params.named_parameters())
    state = AdamState.zeros(named)
    shuffle = rng_for(cfg.seed, STREAM_SHUFFLE)
    scaler = data.standardizer
    X, Y = data.inputs["train"], data.targets["train"]

    def snapshot(p):
        return Checkpoint(p, cfg.seed, scaler.to_dict(), {"config": cfg.to_dict()})

    history: list[EpochRecord] = []
    best, best_val, best_epoch, stale, steps = None, math.inf, 0, 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle.permutation(X.shape[0])
        loss_sum, seen = 0.0, 0
        for start in range(0, X.shape[0], cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                loss = batch_loss(params, X[idx], Y[idx], scaler)
            except NumericError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", best and snapshot(best), history) from exc
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"epoch {epoch}: loss is not finite",
                                       best and snapshot(best), history)
            T.zero_grads(p for _, p in named)
            T.backward(loss)
            adam_step(named, [p.grad for _, p in named], state, cfg)
            loss_sum += loss.item() * len(idx)
            seen += len(idx)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        try:
            val = split_mae(params, data, "val")
        except NumericError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}", best and snapshot(best), history) from exc
        history.append(EpochRecord(epoch, loss_sum / seen, val))
        log.info("epoch %d train_mae %.4f val_mae %.4f", epoch, loss_sum / seen, val)
        if val < best_val:
            best, best_val, best_epoch, stale = clone_params(params), val, epoch, 0
        else:
            stale += 1
        if stale >= cfg.patience:
            break
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    return TrainResult(snapshot(best), history, steps, best_epoch, params)
