"""Adam training of EchoPT with best-validation model selection."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .model import ModelParams, build_model, forward_tensor, input_scale, scale_velocities


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"loss became {loss} in epoch {epoch}; lower the learning rate")
        self.epoch = epoch


# JSON keys follow the usual optimizer-options naming.
_JSON_NAMES = {
    "beta1": "GradientDecayFactor",
    "beta2": "SquaredGradientDecayFactor",
    "epsilon": "Epsilon",
    "learn_rate": "InitialLearnRate",
    "max_epochs": "MaxEpochs",
    "batch_size": "MiniBatchSize",
    "l2": "L2Regularization",
    "shuffle": "Shuffle",
    "output_network": "OutputNetwork",
    "max_seconds": "MaxTrainingSeconds",
}


@dataclass
class OptimSettings:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learn_rate: float = 5e-5
    max_epochs: int = 1000
    batch_size: int = 64
    l2: float = 1e-4
    shuffle: str = "every-epoch"
    output_network: str = "best-validation-loss"
    max_seconds: float | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 0 or self.learn_rate < 0:
            raise ValueError("batch_size >= 1, max_epochs >= 0 and learn_rate >= 0 are required")
        if self.shuffle not in ("every-epoch", "once", "never"):
            raise ValueError(f"unknown Shuffle mode {self.shuffle!r}")
        if self.output_network not in ("best-validation-loss", "last-iteration"):
            raise ValueError(f"unknown OutputNetwork {self.output_network!r}")

    @classmethod
    def toy(cls, **overrides):
        """Settings for the desk-scale model: a larger step and smaller batches
        than the table values, no weight decay, stopped by a time budget."""
        kw = dict(learn_rate=2e-3, batch_size=8, l2=0.0, max_epochs=100, max_seconds=840.0)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self):
        d = {"Optimizer": "adam"}
        d.update({_JSON_NAMES[f.name]: getattr(self, f.name) for f in fields(self)})
        return d

    @classmethod
    def from_dict(cls, d):
        inv = {v: k for k, v in _JSON_NAMES.items()}
        kwargs = {}
        for k, v in d.items():
            if k == "Optimizer":
                if str(v).lower() != "adam":
                    raise ValueError(f"only the Adam optimizer is supported, got {v!r}")
                continue
            if k not in inv:
                raise ValueError(f"unknown optimizer setting {k!r}; known: {sorted(inv)}")
            kwargs[inv[k]] = v
        return cls(**kwargs)


class Adam:
    """Adam with coupled L2 on weight matrices only (biases, norms exempt)."""

    def __init__(self, params: ModelParams, s: OptimSettings):
        self.params = params
        self.s = s
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.tensors.items()}
        self.decay = {k for k in params.tensors if k.endswith(".w") or k == "posembed"}

    def step(self):
        s = self.s
        self.t += 1
        c1 = 1.0 - s.beta1 ** self.t
        c2 = 1.0 - s.beta2 ** self.t
        lr = s.learn_rate * math.sqrt(c2) / c1
        for k, p in self.params.tensors.items():
            g = p.grad
            if s.l2 and k in self.decay:
                g = g + s.l2 * p.data
            m, v = self.m[k], self.v[k]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            if lr:
                p.data -= (lr * m / (np.sqrt(v) + s.epsilon * math.sqrt(c2))).astype(p.dtype)


def prepare_batch(cfg, frames, velocities, targets, dtype):
    """Normalise a batch by each stack's input RMS."""
    f = np.asarray(frames, dtype=np.float64)
    sc = input_scale(f)
    x = (f / sc[:, None, None, None]).astype(dtype)
    y = (np.asarray(targets, dtype=np.float64) / sc[:, None, None]).astype(dtype)[:, None]
    v = scale_velocities(cfg, velocities).astype(dtype)
    return x, v, y


def batch_loss(params: ModelParams, frames, velocities, targets, training):
    x, v, y = prepare_batch(params.cfg, frames, velocities, targets, params.dtype)
    pred = forward_tensor(params, x, v, training=training)
    return T.mean_sq_error(pred, T.Tensor(y))


def evaluate_loss(params, frames, velocities, targets, batch_size=64):
    """Sample-weighted mean MSE in normalised units (inference mode)."""
    n = frames.shape[0]
    if n == 0:
        return math.nan
    total = 0.0
    for i in range(0, n, batch_size):
        j = min(i + batch_size, n)
        total += float(batch_loss(params, frames[i:j], velocities[i:j], targets[i:j], False).data) * (j - i)
    return total / n


@dataclass
class TrainResult:
    params: ModelParams
    history: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def train_losses(self):
        return [h["train_loss"] for h in self.history]


def train(train_set, optim: OptimSettings, rng, cfg=None, params: ModelParams | None = None,
          val_set=None, log=None) -> TrainResult:
    """Fit EchoPT by minibatch Adam on the mean squared error.

    ``train_set``/``val_set`` are ``(frames, velocities, targets)`` arrays
    shaped (N, n_frames, R, A), (N, 2*(n_frames+1)) and (N, R, A). Epoch 0
    in the history is the untrained model.
    """
    frames, vels, targets = train_set
    n = frames.shape[0]
    if n == 0:
        raise ValueError("training set is empty")
    if params is None:
        params = build_model(cfg, rng)
    opt = Adam(params, optim)
    has_val = val_set is not None and val_set[0].shape[0] > 0
    select = optim.output_network == "best-validation-loss"

    start = time.perf_counter()
    # the untrained loss is estimated on an evenly spaced subset to save time
    sub = np.unique(np.linspace(0, n - 1, min(n, 512)).astype(int))
    init_train = evaluate_loss(params, frames[sub], vels[sub], targets[sub])
    init_val = evaluate_loss(params, *val_set) if has_val else math.nan
    result = TrainResult(params, [{"epoch": 0, "train_loss": init_train, "val_loss": init_val,
                                   "seconds": 0.0}])
    best = init_val if has_val else init_train
    best_state = {k: a.copy() for k, a in params.state_arrays().items()}
    order = np.arange(n)
    if optim.shuffle == "once":
        order = rng.permutation(n)
    for epoch in range(1, optim.max_epochs + 1):
        if optim.shuffle == "every-epoch":
            order = rng.permutation(n)
        running, seen = 0.0, 0
        for i in range(0, n, optim.batch_size):
            idx = np.sort(order[i:i + optim.batch_size])
            params.zero_grad()
            loss = batch_loss(params, frames[idx], vels[idx], targets[idx], True)
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingDiverged(epoch, lv)
            loss.backward()
            opt.step()
            running += lv * idx.size
            seen += idx.size
            if optim.max_seconds and time.perf_counter() - start > optim.max_seconds:
                result.stopped_early = True
                break
        train_loss = running / seen
        val_loss = evaluate_loss(params, *val_set) if has_val else math.nan
        monitor = val_loss if has_val else train_loss
        if not math.isfinite(monitor):
            raise TrainingDiverged(epoch, monitor)
        result.history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                               "seconds": time.perf_counter() - start})
        if log:
            log(f"epoch {epoch}: train {train_loss:.5f} val {val_loss:.5f}")
        if monitor < best:
            best = monitor
            result.best_epoch = epoch
            best_state = {k: a.copy() for k, a in params.state_arrays().items()}
        if result.stopped_early:
            break
    if select:
        params.load_state_arrays(best_state)
    else:
        result.best_epoch = len(result.history) - 1
    return result
