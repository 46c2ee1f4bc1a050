"""Multi-step unrolled training with AdamW and warmup + cosine schedule."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import WindowBatch, batch_stream
from .models import PredictorModel, save_checkpoint, unroll

log = logging.getLogger(__name__)

UNSTABLE_UNROLL = 10


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingInstabilityError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 50_000
    batch_size: int = 512
    lr_peak: float = 3e-4
    warmup_iters: int = 5_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    unroll: int = 1
    grad_clip: float | None = None  # None: 10.0 when unroll > 5, else off
    seed: int = 0
    eval_interval: int = 500
    val_windows: int = 256
    val_horizon: int = 60
    max_bad_iters: int = 10

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 <= self.warmup_iters < self.iterations:
            raise ValueError("warmup_iters must be in [0, iterations)")
        if self.unroll < 1:
            raise ValueError("unroll must be >= 1")
        if self.batch_size < 1 or self.lr_peak < 0:
            raise ValueError("batch_size must be >= 1 and lr_peak >= 0")

    @property
    def clip_norm(self):
        if self.grad_clip is not None:
            return self.grad_clip if self.grad_clip > 0 else None
        return 10.0 if self.unroll > 5 else None

    @classmethod
    def from_mapping(cls, values):
        """Build from string values (config file / CLI), ignoring unknown keys."""
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            if key not in types or raw is None:
                continue
            typ = types[key]
            if isinstance(raw, str):
                if "None" in typ and raw.strip().lower() in ("", "none", "off"):
                    kwargs[key] = None
                    continue
                kwargs[key] = int(raw) if typ == "int" else float(raw)
            else:
                kwargs[key] = raw
        return cls(**kwargs)


def lr_schedule(iteration, config: TrainConfig):
    """Constant ``lr_peak`` during warmup, then cosine decay towards zero."""
    if iteration < config.warmup_iters:
        return config.lr_peak
    span = config.iterations - config.warmup_iters
    progress = (iteration - config.warmup_iters) / span
    return config.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


def adamw_step(params, grads, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8,
               weight_decay=1e-4):
    """In-place AdamW update of the parameters' data.

    Weight decay multiplies the weights by ``1 - lr * weight_decay``
    directly, independent of the gradient.
    """
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ad.ShapeError("adamw_step", p.shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {p.name or p.shape}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        data = p.data * (1.0 - lr * weight_decay) if weight_decay else p.data
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _step_error(pred: Tensor, target: np.ndarray):
    """Summed squared error of predicted rows against targets.

    The predicted quaternion is sign-aligned with the target first; the
    flip is treated as a constant.
    """
    dots = np.sum(pred.data[:, 6:10] * target[:, 6:10], axis=1)
    if (dots < 0).any():
        signs = np.ones(pred.shape)
        signs[dots < 0, 6:10] = -1.0
        pred = ad.multiply(pred, Tensor(signs))
    return ad.sum_(ad.squared_difference(pred, Tensor(target)))


def one_step_loss(model: PredictorModel, batch: WindowBatch):
    """Mean over the batch of the squared next-state error."""
    model.begin_unroll()
    pred = model.step(Tensor(batch.states), Tensor(batch.actions))
    return ad.multiply(_step_error(pred, batch.target_states[:, 0]), 1.0 / len(batch))


def multi_step_loss(model: PredictorModel, batch: WindowBatch, unroll_steps):
    """Squared state error accumulated over ``unroll_steps`` recursive
    predictions, divided by ``unroll_steps * batch``."""
    if unroll_steps > batch.horizon:
        raise ValueError(
            f"unroll {unroll_steps} exceeds the {batch.horizon} target steps in the batch"
        )
    preds = unroll(model, batch.states, batch.actions, batch.future_actions, unroll_steps)
    total = None
    for i, pred in enumerate(preds):
        err = _step_error(pred, batch.target_states[:, i])
        total = err if total is None else total + err
    return ad.multiply(total, 1.0 / (unroll_steps * len(batch)))


LOG_COLUMNS = ["iteration", "loss", "lr", "grad_norm",
               "val_delta_z", "val_delta_v", "val_delta_omega", "val_delta_q"]


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def record(self, iteration, loss, lr, grad_norm):
        self.rows.append({"iteration": iteration, "loss": loss, "lr": lr, "grad_norm": grad_norm})

    def record_validation(self, metrics):
        row = self.rows[-1]
        for key in ("delta_z", "delta_v", "delta_omega", "delta_q"):
            row["val_" + key] = metrics[key]

    @property
    def losses(self):
        return np.array([r["loss"] for r in self.rows])

    @property
    def validations(self):
        return [r for r in self.rows if "val_delta_v" in r]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, restval="")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


def train(model: PredictorModel, train_windows: WindowBatch, config: TrainConfig,
          val_windows: WindowBatch | None = None, checkpoint_dir=None, log_path=None,
          progress=None):
    """Fit ``model`` in place; returns ``(model, TrainLog)``.

    When validation windows are given the parameters with the lowest
    validation δ_v are restored at the end (and written to
    ``checkpoint_dir`` whenever they improve).
    """
    from .evaluate import evaluate_windows

    if train_windows.horizon < config.unroll:
        raise ValueError(f"training windows carry {train_windows.horizon} targets < unroll {config.unroll}")
    params = model.parameters()
    state = AdamState.zeros_like(params)
    stream = batch_stream(train_windows, config.batch_size, config.seed)
    clip = config.clip_norm
    betas = (config.beta1, config.beta2)
    tlog = TrainLog()

    val = None
    if val_windows is not None and len(val_windows):
        if val_windows.horizon < config.val_horizon:
            raise ValueError("validation windows shorter than val_horizon")
        rng = np.random.default_rng(config.seed + 1)
        n = min(config.val_windows, len(val_windows))
        val = val_windows.take(np.sort(rng.choice(len(val_windows), n, replace=False)))
    best_score, best_state = math.inf, None
    bad = 0

    for it in range(config.iterations):
        batch = next(stream)
        lr = lr_schedule(it, config)
        model.train()
        with Tape() as tape:
            loss = multi_step_loss(model, batch, config.unroll)
        loss_value = float(loss.data)
        grads = None
        if math.isfinite(loss_value):
            gmap = tape.backward(loss, params)
            grads = [gmap[p] for p in params]
            gnorm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        else:
            gnorm = math.nan
        if not math.isfinite(gnorm):
            bad += 1
            log.warning("iteration %d: non-finite loss/gradient, update skipped", it)
            tlog.record(it, loss_value, lr, gnorm)
            if bad >= config.max_bad_iters:
                raise TrainingInstabilityError(
                    f"training instability: {bad} consecutive non-finite iterations "
                    f"(unrolls beyond {UNSTABLE_UNROLL} steps are known to blow up gradients)"
                )
            continue
        bad = 0
        if clip is not None and gnorm > clip:
            grads = [g * (clip / gnorm) for g in grads]
        adamw_step(params, grads, state, lr, betas, config.eps, config.weight_decay)
        tlog.record(it, loss_value, lr, gnorm)

        done = it + 1
        if val is not None and (done % config.eval_interval == 0 or done == config.iterations):
            metrics = evaluate_windows(model, val, config.val_horizon).summary()
            tlog.record_validation(metrics)
            if metrics["delta_v"] < best_score:
                best_score = metrics["delta_v"]
                best_state = model.state_dict()
                if checkpoint_dir is not None:
                    save_checkpoint(model, checkpoint_dir, {"iteration": done, "val": metrics})
        if progress is not None:
            progress(it, loss_value)

    if best_state is not None:
        model.load_state_dict(best_state)
    elif checkpoint_dir is not None:
        save_checkpoint(model, checkpoint_dir, {"iteration": config.iterations})
    model.eval()
    if log_path is not None:
        tlog.to_csv(log_path)
    return model, tlog
