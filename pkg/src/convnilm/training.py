"""Losses, Adam, and the cross-validated training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SignalWindow, stack_windows
from .model import ModelConfig, forward, init_params

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 5
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    # taken at face value from the published settings; far larger than the usual 1e-8
    eps: float = 0.01
    k_folds: int = 10
    seed: int = 0
    loss: str = "wmse"
    precision: str = "float64"
    clip_norm: float | None = None

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr, batch_size and epochs must be non-negative (batch_size >= 1)")


class TrainingDiverged(ArithmeticError):
    """Loss blew up; ``params`` holds the last good parameters."""

    def __init__(self, message: str, params: dict[str, np.ndarray], epoch: int):
        super().__init__(message)
        self.params = params
        self.epoch = epoch


# ---------------------------------------------------------------------------
# Losses


def _check_shapes(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")


def wmse(pred: Tensor, target) -> Tensor:
    """Squared error summed over appliances, averaged over time.

    For (..., C, T) inputs the per-window values are averaged over the
    leading axes.
    """
    target = ad.as_tensor(target)
    _check_shapes(pred, target)
    d = pred - target
    windows = int(np.prod(pred.shape[:-2])) if pred.ndim > 2 else 1
    return (d * d).sum() / (pred.shape[-1] * windows)


def mse_mean(pred: Tensor, target) -> Tensor:
    """Squared error averaged over appliances and time."""
    target = ad.as_tensor(target)
    _check_shapes(pred, target)
    d = pred - target
    return (d * d).mean()


LOSSES: dict[str, Callable[[Tensor, Tensor], Tensor]] = {"wmse": wmse, "mse-mean": mse_mean}


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def to_blobs(self) -> dict[str, np.ndarray]:
        blobs = {f"m.{k}": a for k, a in self.m.items()}
        blobs.update({f"v.{k}": a for k, a in self.v.items()})
        blobs["step"] = np.array([float(self.step)])
        return blobs

    @classmethod
    def from_blobs(cls, blobs: dict[str, np.ndarray]) -> "AdamState":
        state = cls(step=int(blobs["step"][0]) if "step" in blobs else 0)
        for key, arr in blobs.items():
            if key.startswith("m."):
                state.m[key[2:]] = arr.copy()
            elif key.startswith("v."):
                state.v[key[2:]] = arr.copy()
        return state


class NonFiniteGradient(ArithmeticError):
    pass


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    if cfg.clip_norm:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > cfg.clip_norm:
            grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}

    state.step += 1
    c1 = 1 - cfg.beta1 ** state.step
    c2 = 1 - cfg.beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        p.data = p.data - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# ---------------------------------------------------------------------------
# Collapse monitor


class CollapseMonitor:
    """Flags runs whose outputs have gone to zero.

    Alarms once predictions stay below ``ratio`` times the target magnitude
    for ``patience`` consecutive epochs. Disabled when targets are all zero.
    """

    def __init__(self, ratio: float = 1e-6, patience: int = 5):
        self.ratio = ratio
        self.patience = patience
        self.streak = 0
        self.alarm = False

    def update(self, pred: np.ndarray, target: np.ndarray) -> bool:
        scale = float(np.mean(np.abs(target)))
        if scale == 0.0:
            self.streak = 0
            return False
        if float(np.mean(np.abs(pred))) < self.ratio * scale:
            self.streak += 1
        else:
            self.streak = 0
        if self.streak >= self.patience and not self.alarm:
            self.alarm = True
            log.warning("collapse: outputs near zero for %d consecutive epochs", self.streak)
        return self.alarm


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class EpochRecord:
    fold: int
    epoch: int
    train_loss: float
    val_wmse: float
    seconds: float
    collapsed: bool = False

    def line(self) -> str:
        return (f"fold={self.fold} epoch={self.epoch} train_loss={self.train_loss:.6e} "
                f"val_wmse={self.val_wmse:.6e} time={self.seconds:.3f}"
                + (" collapse=1" if self.collapsed else ""))


@dataclass
class FoldResult:
    fold: int
    params: dict[str, np.ndarray]
    best_epoch: int
    best_val: float
    history: list[EpochRecord]
    collapsed: bool = False


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in params.items()}


def _as_params(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(a, requires_grad=True) for k, a in arrays.items()}


def evaluate_loss(params, config: ModelConfig, mixtures: np.ndarray, targets: np.ndarray,
                  batch_size: int = 8) -> tuple[float, np.ndarray]:
    """Mean per-window WMSE and the stacked predictions, without recording gradients."""
    preds = []
    with ad.no_grad():
        for i in range(0, len(mixtures), batch_size):
            x = Tensor(mixtures[i:i + batch_size, None, :])
            preds.append(forward(x, params, config).data)
    pred = np.concatenate(preds)
    n = min(pred.shape[-1], targets.shape[-1])
    err = (pred[..., :n] - targets[..., :n]) ** 2
    return float(err.sum() / (n * len(pred))), pred


def train_fold(config: ModelConfig, train: list[SignalWindow], val: list[SignalWindow],
               cfg: TrainConfig, fold: int = 0, params: dict[str, np.ndarray] | None = None,
               state: AdamState | None = None, start_epoch: int = 0,
               on_epoch: Callable | None = None) -> FoldResult:
    """Train one fold; returns the parameters with the best validation WMSE."""
    ad.set_precision(cfg.precision)
    x_tr, y_tr = stack_windows(train)
    x_va, y_va = stack_windows(val)
    length = config.output_length(config.n_frames(x_tr.shape[-1]))
    if length != x_tr.shape[-1]:
        log.warning("window length %d is not covered by whole frames; last %d samples not scored",
                    x_tr.shape[-1], x_tr.shape[-1] - length)
    y_tr = y_tr[..., :length]

    live = _as_params(params) if params is not None else init_params(config, cfg.seed + fold)
    state = state or AdamState()
    loss_fn = LOSSES[cfg.loss]
    monitor = CollapseMonitor()
    best = _snapshot(live)
    best_val, best_epoch = np.inf, start_epoch
    history = []

    for epoch in range(start_epoch, cfg.epochs):
        tic = time.perf_counter()
        # seeded per epoch so a resumed run replays the same batches
        order = np.random.default_rng([cfg.seed, fold, epoch]).permutation(len(x_tr))
        losses = []
        good = _snapshot(live)
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            with ad.fresh_tape() as tape:
                pred = forward(Tensor(x_tr[idx, None, :]), live, config)
                loss = loss_fn(pred, y_tr[idx])
                value = float(loss.data)
                if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
                    raise TrainingDiverged(f"fold {fold} epoch {epoch}: loss {value}", good, epoch)
                tape.backward(loss, live.values())
            try:
                adam_step(live, {k: t.grad for k, t in live.items()}, state, cfg)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(f"fold {fold} epoch {epoch}: {exc}", good, epoch) from exc
            losses.append(value)

        val_wmse, val_pred = evaluate_loss(live, config, x_va, y_va)
        collapsed = monitor.update(val_pred, y_va[..., :val_pred.shape[-1]])
        record = EpochRecord(fold, epoch + 1, float(np.mean(losses)), val_wmse,
                             time.perf_counter() - tic, collapsed)
        history.append(record)
        log.debug(record.line())
        if val_wmse < best_val:
            best_val, best_epoch, best = val_wmse, epoch + 1, _snapshot(live)
        if on_epoch is not None:
            on_epoch(record, live, state)

    return FoldResult(fold, best, best_epoch, float(best_val), history, monitor.alarm)


def train(config: ModelConfig, folds: list[tuple[list, list]], cfg: TrainConfig,
          params: dict[str, np.ndarray] | None = None, on_epoch: Callable | None = None,
          only: list[int] | None = None) -> list[FoldResult]:
    """Train every fold (or the ``only`` subset) from the same starting point."""
    if not folds:
        raise ValueError("at least one fold is required")
    shapes = {w.targets.shape for tr, va in folds for w in tr + va}
    if len(shapes) != 1:
        raise ValueError(f"windows disagree in (C, T): {sorted(shapes)}")
    (n_src, _), = shapes
    if n_src != config.n_sources:
        raise ValueError(f"data has {n_src} appliances, model expects {config.n_sources}")
    results = []
    for i, (tr, va) in enumerate(folds):
        if only is not None and i not in only:
            continue
        results.append(train_fold(config, tr, va, cfg, fold=i, params=params, on_epoch=on_epoch))
    return results
