"""Optimisation harness: Adam, loss assembly, early stopping and the
training recipes for the spread net (U), bias net (B) and CRPS
calibration (C).
"""
from __future__ import annotations

import copy
import csv
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .metrics import crps_gaussian, ssim
from .models import BiasNet, ModelConfig, SpreadNet, predict
from .preprocess import Batch, mean_channel
from .tensor import Module, Tensor, backward, l1_adjacent_penalty, no_grad, tmean, tsum
from .tensor.kernels import flush_denormals
from .tensor.nn import truncated_normal

LOSSES = ("mse", "neg_ssim", "crps")


class TrainingError(RuntimeError):
    """Raised when a run diverges; the model holds the last good parameters."""


@dataclass
class TrainConfig:
    loss: str = "mse"
    lr: float = 1e-3
    batch_size: int = 2
    max_steps: int = 1500
    l2_weight: float = 1e-5
    l1_adjacent_weight: float | None = None  # None: use each parameter's own weight
    early_stop_patience: int = 10
    eval_every: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.eval_every < 1 or self.max_steps < 0:
            raise ValueError("eval_every must be >= 1 and max_steps >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, lr_scale: dict | None = None) -> None:
    """In-place bias-corrected Adam update of ``params`` (name -> array).

    Raises ``FloatingPointError`` naming the parameter if a gradient is not finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = lr * (lr_scale or {}).get(name, 1.0)
        p -= (step * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def init_truncated_normal(shape, std: float, seed: int) -> np.ndarray:
    return truncated_normal(shape, std, np.random.default_rng(seed))


# -- losses -------------------------------------------------------------------

def regularization(model: Module, cfg: TrainConfig):
    """l2 and adjacent-filter l1 terms, or ``None`` when both are off."""
    total = None
    if cfg.l2_weight:
        for p in model.parameters():
            if p.l2:
                term = tsum(p * p) * cfg.l2_weight
                total = term if total is None else total + term
    for p in model.parameters():
        if not p.lcn:
            continue
        lam = p.l1_adjacent_weight if cfg.l1_adjacent_weight is None else cfg.l1_adjacent_weight
        if lam:
            term = l1_adjacent_penalty(p) * lam
            total = term if total is None else total + term
    return total


def mean_std(batch: Batch) -> np.ndarray:
    """Standardised reduced-ensemble 48 h mean, (N, 1, H, W)."""
    c = mean_channel(batch.n_members, 48)
    return batch.inputs[:, c:c + 1]


def spread_loss(kind: str) -> Callable:
    def mse(model, b: Batch):
        d = model(Tensor(b.inputs)) - b.spread_target
        return tmean(d * d)

    def neg_ssim(model, b: Batch):
        target = b.spread_target
        rng = float(target.max() - target.min()) or 1.0
        return -ssim(model(Tensor(b.inputs)), Tensor(target), data_range=rng)
    return {"mse": mse, "neg_ssim": neg_ssim}[kind]


def bias_loss(model, b: Batch):
    d = model(Tensor(b.inputs)) - (b.truth - mean_std(b))
    return tmean(d * d)


def crps_loss(model, b: Batch):
    """Mean CRPS in standardised units with the frozen bias correction in extras."""
    mu = mean_std(b) + b.extras["delta"]
    return tmean(crps_gaussian(mu, model(Tensor(b.inputs)), b.truth))


# -- the training loop ------------------------------------------------------------

@dataclass
class TrainState:
    step: int = 0
    adam: AdamState = field(default_factory=AdamState)
    best_val_loss: float = math.inf
    best_step: int = 0
    best_state: OrderedDict | None = None
    history: list = field(default_factory=list)  # (step, train_loss, val_loss)
    stopped_early: bool = False


def evaluate(model: Module, loss_fn: Callable, data: Batch, batch_size: int = 8) -> float:
    """Sample-weighted mean of ``loss_fn`` over ``data`` in eval mode."""
    was = model.training
    model.eval()
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(data), batch_size):
            sub = data.subset(np.arange(i, min(i + batch_size, len(data))))
            total += float(loss_fn(model, sub).data) * len(sub)
            count += len(sub)
    model.train(was)
    return total / count


def _snapshot(model: Module) -> OrderedDict:
    return OrderedDict((k, np.array(v, copy=True)) for k, v in model.state_dict().items())


def train(model: Module, loss_fn: Callable, train_data: Batch, val_data: Batch, cfg: TrainConfig,
          log: Callable | None = None, val_loss_fn: Callable | None = None) -> TrainState:
    """Adam with early stopping; the model ends holding its best-validation parameters.

    The validation loss is evaluated before the first update too, so a run
    that never improves returns the initial parameters. Subnormal floats
    are flushed to zero for the duration (see ``kernels.flush_denormals``).
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("training and validation splits must be non-empty")
    with flush_denormals():
        return _train(model, loss_fn, train_data, val_data, cfg, log, val_loss_fn)


def _train(model, loss_fn, train_data, val_data, cfg, log, val_loss_fn) -> TrainState:
    val_loss_fn = val_loss_fn or loss_fn
    rng = np.random.default_rng(cfg.seed)
    state = TrainState()
    named = OrderedDict(model.named_parameters())
    scales = {n: p.lr_scale for n, p in named.items() if p.lr_scale != 1.0}
    order: list = []
    window: list = []
    since_best = 0

    def record(train_loss):
        nonlocal since_best
        val = evaluate(model, val_loss_fn, val_data)
        if not math.isfinite(val):
            raise TrainingError(f"validation loss became {val} at step {state.step}")
        state.history.append((state.step, train_loss, val))
        if val < state.best_val_loss:
            state.best_val_loss, state.best_step = val, state.step
            state.best_state = _snapshot(model)
            since_best = 0
        else:
            since_best += 1
        if log:
            log(f"step {state.step:6d}  train {train_loss:.6f}  val {val:.6f}")

    record(evaluate(model, loss_fn, train_data.subset(np.arange(min(cfg.batch_size, len(train_data))))))
    model.train()
    try:
        while state.step < cfg.max_steps:
            if not order:
                order = list(rng.permutation(len(train_data)))
            idx = [order.pop(0) for _ in range(min(cfg.batch_size, len(order)))]
            batch = train_data.subset(idx)
            model.zero_grad()
            data_loss = loss_fn(model, batch)
            reg = regularization(model, cfg)
            loss = data_loss if reg is None else data_loss + reg
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"loss became {value} at step {state.step}")
            backward(loss)
            grads = OrderedDict((n, p.grad) for n, p in named.items() if p.grad is not None)
            try:
                adam_step({n: named[n].data for n in grads}, grads, state.adam, cfg.lr, cfg.beta1,
                          cfg.beta2, cfg.adam_eps, scales)
            except FloatingPointError as exc:
                raise TrainingError(f"{exc} at step {state.step}") from exc
            state.step += 1
            window.append(float(data_loss.data))
            if state.step % cfg.eval_every == 0 or state.step == cfg.max_steps:
                record(float(np.mean(window)))
                window = []
                model.train()
                if since_best >= cfg.early_stop_patience:
                    state.stopped_early = True
                    break
    finally:
        if state.best_state is not None:
            model.load_state_dict(state.best_state)
        model.eval()
    return state


def write_history(path, state: TrainState) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "train_loss", "val_loss"])
        for step, tr, va in state.history:
            w.writerow([step, repr(float(tr)), repr(float(va))])


def read_history(path) -> list[tuple]:
    with open(path, newline="") as fh:
        return [(int(r["step"]), float(r["train_loss"]), float(r["val_loss"])) for r in csv.DictReader(fh)]


# -- recipes -----------------------------------------------------------------------

def train_spread(train_data: Batch, val_data: Batch, model_cfg: ModelConfig | None = None,
                 cfg: TrainConfig | None = None, log=None) -> tuple[SpreadNet, TrainState]:
    """U recipe: fit the spread net to the full-ensemble spread."""
    model_cfg = model_cfg or ModelConfig(head="spread", n_input_members=train_data.n_members,
                                         height=train_data.inputs.shape[2], width=train_data.inputs.shape[3])
    cfg = cfg or TrainConfig(loss="mse", max_steps=1500)
    if cfg.loss == "crps":
        raise ValueError("use train_calibration for the CRPS recipe")
    net = SpreadNet(model_cfg)
    return net, train(net, spread_loss(cfg.loss), train_data, val_data, cfg, log)


def train_bias(train_data: Batch, val_data: Batch, model_cfg: ModelConfig | None = None,
               cfg: TrainConfig | None = None, log=None) -> tuple[BiasNet, TrainState]:
    """B recipe: regress the standardised truth-minus-mean difference."""
    model_cfg = model_cfg or ModelConfig(head="bias", n_input_members=train_data.n_members,
                                         height=train_data.inputs.shape[2], width=train_data.inputs.shape[3])
    cfg = cfg or TrainConfig(loss="mse", max_steps=5000)
    net = BiasNet(model_cfg)
    return net, train(net, bias_loss, train_data, val_data, cfg, log)


def with_bias_correction(data: Batch, bias: BiasNet) -> Batch:
    """Copy of ``data`` carrying the frozen bias net's correction in extras."""
    out = copy.copy(data)
    out.extras = dict(data.extras)
    out.extras["delta"] = predict(bias, data.inputs).astype(data.inputs.dtype)
    return out


def train_calibration(spread_init: SpreadNet, bias: BiasNet, train_data: Batch, val_data: Batch,
                      cfg: TrainConfig | None = None, log=None) -> tuple[SpreadNet, TrainState]:
    """C recipe: fine-tune a copy of the spread net on CRPS around the
    bias-corrected mean (the bias net stays frozen)."""
    if bias is None:
        raise ValueError("CRPS calibration needs a trained bias net")
    cfg = cfg or TrainConfig(loss="crps", max_steps=1000)
    if cfg.loss != "crps":
        raise ValueError("calibration trains on the crps loss")
    mcfg = ModelConfig.from_dict({**spread_init.config.to_dict(), "head": "crps"})
    net = SpreadNet(mcfg)
    net.load_state_dict(spread_init.state_dict())
    net.las_fingerprint = getattr(spread_init, "las_fingerprint", "")
    tr = with_bias_correction(train_data, bias)
    va = with_bias_correction(val_data, bias)
    return net, train(net, crps_loss, tr, va, cfg, log)


def run_manifest(train_cfg: TrainConfig, model_cfg: dict | None, dataset_hash: str, **extra) -> dict:
    return {"train_config": train_cfg.to_dict(), "model_config": model_cfg, "dataset_manifest_sha256": dataset_hash,
            **extra}


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))
