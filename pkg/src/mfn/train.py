"""Training orchestration: loss adjoints, AdamW, loops, metrics.

All gradients come from the hand-derived adjoints on the tape; there is no
autodiff framework underneath.  Runs are deterministic for a fixed seed:
data order comes from a seeded generator and every reduction is ordered.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, PreconditionError
from .graphs import Dataset
from .model import LayerConfig, ModelParams, forward, forward_vars, init_params
from .tape import Tape, Var

logger = logging.getLogger("mfn.train")

__all__ = [
    "OptState",
    "TrainConfig",
    "backward",
    "adamw_step",
    "loss_on_tape",
    "train",
    "evaluate",
    "classify_value",
]

GRAD_CLIP = 10.0  # single global-norm safety clip


def backward(tape: Tape, loss: Var, param_vars: dict) -> dict:
    """Reverse sweep: gradients of a scalar loss for every parameter Var."""
    return tape.gradients(loss, param_vars)


@dataclass
class OptState:
    """AdamW accumulators (decoupled weight decay, bias-corrected moments)."""

    m: dict
    v: dict
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-5

    @classmethod
    def init(cls, params: ModelParams, lr: float, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8,
             weight_decay: float = 5e-5) -> "OptState":
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()},
                   step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                   weight_decay=weight_decay)


def adamw_step(params: ModelParams, grads: dict, state: OptState) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        mhat = state.m[name] / bc1
        vhat = state.v[name] / bc2
        params[name] = p - state.lr * (mhat / (np.sqrt(vhat) + state.eps)
                                       + state.weight_decay * p)


@dataclass
class TrainConfig:
    """Loop hyperparameters plus the model architecture."""

    model: LayerConfig
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    loss: str = "mse"  # mse | mae | cross_entropy
    patience: int = 25
    factor: float = 0.5
    min_lr: float = 1e-6
    weight_decay: float = 5e-5
    val_fraction: float = 0.0

    def __post_init__(self):
        # lr = 0 is allowed as an explicit no-op (training dry runs)
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise PreconditionError("epochs, batch size and lr must be positive")


def loss_on_tape(tape: Tape, pred: Var, target, kind: str) -> Var:
    """Scalar loss with its adjoint, built from primitives."""
    if kind == "mse":
        d = tape.sub(pred, np.asarray(target, dtype=np.float64).reshape(pred.shape))
        return tape.sum(tape.mul(d, d))
    if kind == "mae":
        d = tape.sub(pred, np.asarray(target, dtype=np.float64).reshape(pred.shape))
        return tape.sum(tape.absval(d))
    if kind == "cross_entropy":
        y = int(target)
        shift = float(np.max(pred.value))  # constant shift, exact gradient
        z = tape.sub(pred, shift)
        lse = tape.log(tape.sum(tape.exp(z)))
        return tape.sub(lse, tape.getitem(z, (y,)))
    raise PreconditionError(f"unknown loss {kind!r}")


def _graph_gradient(graph, params: ModelParams, config: LayerConfig, loss_kind: str):
    tape = Tape()
    pvars = {k: tape.leaf(v) for k, v in params.items()}
    pred, _ = forward_vars(tape, graph, pvars, config)
    loss = loss_on_tape(tape, pred, graph.target, loss_kind)
    grads = tape.gradients(loss, pvars)
    return float(loss.value), grads


def _clip_global(grads: dict, max_norm: float) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def _check_finite(loss: float, grads: dict, params: ModelParams, epoch: int) -> None:
    bad = not np.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grads.values())
    if bad:
        lines = [f"non-finite loss/gradient at epoch {epoch}; diagnostic dump:"]
        for k, v in params.items():
            gn = float(np.abs(grads[k]).max()) if k in grads else float("nan")
            lines.append(f"  {k}: |param|max={np.abs(v).max():.3e} |grad|max={gn:.3e}")
        logger.error("\n".join(lines))
        raise NumericalError(f"non-finite loss at epoch {epoch}")


def train(dataset: Dataset, config: TrainConfig, train_idx=None, val_idx=None):
    """Full-dataset training loop.

    Returns (best parameters, history) where history rows are
    (epoch, split, metric, value).  Best means lowest validation loss, or
    lowest train loss when no validation split exists.  Deterministic for a
    fixed seed.
    """
    rng = np.random.default_rng(config.seed)
    mconf = config.model
    params = init_params(mconf, rng)
    state = OptState.init(params, lr=config.lr, weight_decay=config.weight_decay)

    n = len(dataset)
    if train_idx is None:
        train_idx = np.arange(n)
    train_idx = np.asarray(train_idx)
    if val_idx is None and config.val_fraction > 0:
        k = max(1, int(round(config.val_fraction * len(train_idx))))
        shuffled = train_idx[rng.permutation(len(train_idx))]
        val_idx, train_idx = shuffled[:k], shuffled[k:]

    history: list[tuple[int, str, str, float]] = []
    best_loss = np.inf
    best_params = params.copy()
    stall = 0

    for epoch in range(config.epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            acc: dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in params.items()}
            batch_loss = 0.0
            for gi in batch:
                loss_val, grads = _graph_gradient(dataset.graphs[gi], params, mconf,
                                                  config.loss)
                batch_loss += loss_val
                for k in acc:
                    acc[k] += grads[k]
            scale = 1.0 / len(batch)
            for k in acc:
                acc[k] *= scale
            batch_loss *= scale
            _check_finite(batch_loss, acc, params, epoch)
            _clip_global(acc, GRAD_CLIP)
            adamw_step(params, acc, state)
            epoch_loss += batch_loss * len(batch)
        epoch_loss /= max(1, len(order))
        history.append((epoch, "train", "loss", epoch_loss))

        monitor = epoch_loss
        if val_idx is not None and len(val_idx):
            val_metrics = evaluate(params, mconf, dataset, val_idx, loss_kind=config.loss)
            monitor = val_metrics["loss"]
            for name, value in val_metrics.items():
                history.append((epoch, "val", name, value))
        if monitor < best_loss - 1e-12:
            best_loss = monitor
            best_params = params.copy()
            stall = 0
        else:
            stall += 1
            if stall > config.patience and state.lr > config.min_lr:
                state.lr = max(config.min_lr, state.lr * config.factor)
                history.append((epoch, "train", "lr", state.lr))
                stall = 0
    return best_params, history


def classify_value(value: np.ndarray, num_classes: int) -> int:
    """Deterministic label from an output vector.

    Multi-logit outputs take the argmax (first index on ties); scalar outputs
    classify by sign with ties broken toward the positive class.
    """
    value = np.asarray(value).ravel()
    if value.size > 1:
        return int(np.argmax(value))
    if num_classes == 2:
        return 1 if value[0] >= 0 else 0
    raise PreconditionError("scalar outputs support binary classification only")


def evaluate(params: ModelParams, mconf: LayerConfig, dataset: Dataset,
             indices=None, loss_kind: str | None = None) -> dict:
    """MAE, RMSE (plus per-atom variants for geometric data) or accuracy."""
    if indices is None:
        indices = np.arange(len(dataset))
    preds = []
    targets = []
    sizes = []
    for gi in indices:
        g = dataset.graphs[gi]
        preds.append(forward(g, params, mconf).value)
        targets.append(g.target)
        sizes.append(g.n)
    out: dict[str, float] = {}
    if dataset.task == "classification":
        correct = 0
        total_loss = 0.0
        for p, y in zip(preds, targets):
            label = classify_value(p, dataset.num_classes)
            correct += int(label == int(y))
            if loss_kind == "cross_entropy":
                z = p - p.max()
                total_loss += float(np.log(np.exp(z).sum()) - z[int(y)])
        out["accuracy"] = correct / max(1, len(preds))
        if loss_kind == "cross_entropy":
            out["loss"] = total_loss / max(1, len(preds))
        else:
            out["loss"] = 1.0 - out["accuracy"]
    else:
        p = np.array([float(np.ravel(v)[0]) for v in preds])
        y = np.array([float(t) for t in targets])
        err = p - y
        out["mae"] = float(np.abs(err).mean())
        out["rmse"] = float(np.sqrt((err**2).mean()))
        sizes_arr = np.array(sizes, dtype=np.float64)
        out["mae_per_atom"] = float(np.abs(err / sizes_arr).mean())
        out["rmse_per_atom"] = float(np.sqrt(((err / sizes_arr) ** 2).mean()))
        out["loss"] = out["mae"] if loss_kind == "mae" else out["rmse"] ** 2
    return out
