"""SGD training, masked fine-tuning and evaluation."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import forward, gradient, loss
from .data import Batch
from .errors import ConfigurationError
from .models import Network

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    decay_at: tuple = (0.6, 0.8)   # fractions of the schedule
    decay_factor: float = 0.1
    bn_momentum: float = 0.1
    dtype: str = "float64"

    def __post_init__(self):
        self.decay_at = tuple(self.decay_at)
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0 or not (0 <= self.momentum < 1):
            raise ConfigurationError("invalid optimizer hyperparameters")
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError(f"unsupported dtype {self.dtype!r}")

    def milestones(self):
        return [int(round(f * self.epochs)) for f in self.decay_at]

    def lr_at(self, epoch):
        k = sum(1 for m in self.milestones() if epoch >= m)
        return self.lr * self.decay_factor ** k

    def to_dict(self):
        d = asdict(self)
        d["decay_at"] = list(self.decay_at)
        return d


@dataclass
class TrainResult:
    params: np.ndarray
    buffers: np.ndarray
    history: list = field(default_factory=list)


def evaluate(net: Network, params, buffers, batch: Batch, kind="cross_entropy", chunk=500):
    """(mean loss, accuracy) in eval mode.  Accuracy is nan for squared loss."""
    n = len(batch)
    tot_loss, correct = 0.0, 0
    for lo in range(0, n, chunk):
        x = batch.inputs[lo:lo + chunk]
        t = batch.targets[lo:lo + chunk]
        out = forward(net, np.asarray(params, dtype=np.float64), x, buffers)
        tot_loss += loss(out, t, kind) * len(x)
        if kind == "cross_entropy":
            correct += int(np.sum(out.argmax(axis=1) == t))
    acc = correct / n if kind == "cross_entropy" else float("nan")
    return tot_loss / n, acc


def accuracy(net, params, buffers, batch, kind="cross_entropy"):
    return evaluate(net, params, buffers, batch, kind)[1]


def _update_running(net, buffers, tr, momentum):
    for i, (mu, var, count) in tr.batch_stats.items():
        op = net.ops[i]
        off_m, c = op.buffers["mean"]
        off_v, _ = op.buffers["var"]
        unbiased = var * count / max(count - 1, 1)
        buffers[off_m:off_m + c] = (1 - momentum) * buffers[off_m:off_m + c] + momentum * mu
        buffers[off_v:off_v + c] = (1 - momentum) * buffers[off_v:off_v + c] + momentum * unbiased


def train(net: Network, params, buffers, data: Batch, cfg: TrainConfig, seed=0, kind="cross_entropy",
          zero_idx=None, test: Batch | None = None, epoch_offset=0):
    """Minibatch SGD with momentum and decoupled-from-H weight decay.

    ``zero_idx`` lists parameter indices held at zero (masked fine-tuning).
    The data order of epoch e is drawn from ``default_rng([seed, e])``.
    """
    dt = np.dtype(cfg.dtype)
    params = np.array(params, dtype=dt)
    buffers = (net.init_buffers() if buffers is None else np.array(buffers)).astype(dt)
    frozen = net.frozen_mask()
    hold = np.zeros(net.P, dtype=bool)
    if zero_idx is not None:
        hold[np.asarray(zero_idx, dtype=np.int64)] = True
        params[hold] = 0
    vel = np.zeros_like(params)
    n = len(data)
    history = []
    has_bn = net.has_batchnorm()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng([seed, epoch_offset + epoch]).permutation(n)
        run_loss, run_correct = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            if has_bn and len(idx) < 2:
                continue
            x = data.inputs[idx].astype(dt)
            t = data.targets[idx]
            g, lval, tr = gradient(net, params, x, t, kind, buffers, mode="train", return_loss=True)
            run_loss += lval * len(idx)
            if kind == "cross_entropy":
                run_correct += int(np.sum(tr.vals[-1].argmax(axis=1) == t))
            if has_bn:
                _update_running(net, buffers, tr, cfg.bn_momentum)
            g = g + cfg.weight_decay * params
            g[frozen | hold] = 0
            vel = cfg.momentum * vel + g
            params = params - dt.type(lr) * vel
            params[hold] = 0
        rec = {"epoch": epoch_offset + epoch, "lr": lr, "train_loss": run_loss / n,
               "train_acc": run_correct / n if kind == "cross_entropy" else float("nan")}
        if test is not None:
            rec["test_loss"], rec["test_acc"] = evaluate(net, params, buffers, test, kind)
        history.append(rec)
        log.info("epoch %d lr %.4g loss %.4f", rec["epoch"], lr, rec["train_loss"])
    return TrainResult(params.astype(np.float64), buffers.astype(np.float64), history)
