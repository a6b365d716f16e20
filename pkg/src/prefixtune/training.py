"""Training loop, optimizer, schedule, early stopping and the low-data grid."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .strategies import Batch, TunedModel, count_trainable, make_batch


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, log: "RunLog"):
        super().__init__(message)
        self.log = log


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 5
    learning_rate: float = 5e-5
    prefix_len: int = 10
    seed: int = 0
    warmup_steps: int = 0
    early_stop_patience: int = 0  # 0 disables early stopping
    dev_fraction: float = 0.3
    weight_decay: float = 0.01
    grad_clip: float = 0.0  # 0 disables clipping
    max_steps: int = 0  # 0 means epochs * batches
    loss_on: str = "target"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.dev_fraction < 1.0:
            raise ValueError("dev_fraction must be in (0, 1)")
        if min(self.warmup_steps, self.early_stop_patience, self.max_steps, self.prefix_len) < 0:
            raise ValueError("counts must be non-negative")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ValueError("weight_decay and grad_clip must be non-negative")
        if self.loss_on not in ("target", "all"):
            raise ValueError("loss_on must be 'target' or 'all'")


# ----------------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay, applied to matrix parameters only."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    @property
    def state_keys(self) -> set:
        return set(self.m)

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= lr * self.weight_decay * p.data
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def linear_schedule(step: int, total: int, warmup: int = 0) -> float:
    """Multiplier for update ``step`` (0-based): warmup ramp then linear decay to 0."""
    if warmup and step < warmup:
        return (step + 1) / warmup
    span = max(total - warmup, 1)
    return max(0.0, (total - step) / span)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                              for p in params.values() if p.grad is not None)))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


# ----------------------------------------------------------------------------
# run log
# ----------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    step: int
    train_loss: float
    dev_loss: Optional[float]
    dev_metric: Optional[float]
    wall_time: float
    lr: float


@dataclass
class RunLog:
    strategy: str
    seed: int
    trainable_params: int
    epochs: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False
    meta: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        head = {"strategy": self.strategy, "seed": self.seed, "trainable_params": self.trainable_params}
        head.update(self.meta)
        lines = [json.dumps({**head, **asdict(e)}) for e in self.epochs]
        return "\n".join(lines) + ("\n" if lines else "")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    @property
    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def best_dev_metric(self) -> Optional[float]:
        if self.best_epoch is None:
            return None
        return self.epochs[self.best_epoch].dev_metric


SUMMARY_COLUMNS = ["strategy", "size", "seed", "subset", "best_dev_metric", "test_metric", "trainable_params"]


def summary_csv(rows: Sequence[dict], columns: Sequence[str] = SUMMARY_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in columns})
    return buf.getvalue()


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.6f}"
    return "" if x is None else x


# ----------------------------------------------------------------------------
# early stopping
# ----------------------------------------------------------------------------


def early_stop(history: Sequence[float], patience: int) -> tuple[bool, int]:
    """(stop, best) for a dev-metric history where higher is better.

    ``best`` is the 0-based index of the maximum (earliest on ties).  Stops once
    the last ``patience`` epochs brought no improvement; patience 0 never stops.
    """
    if not len(history):
        raise ValueError("empty dev history")
    hist = np.asarray(history, dtype=float)
    best = int(np.argmax(hist))
    stop = patience > 0 and (len(hist) - 1 - best) >= patience
    return stop, best


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: TunedModel
    log: RunLog
    optimizer: AdamW


def batches(data: Sequence, batch_size: int, seed: int, epoch: int, ids: tuple) -> list[Batch]:
    order = np.random.default_rng([seed, epoch]).permutation(len(data))
    sep, eos, pad = ids
    return [make_batch([data[i] for i in order[s: s + batch_size]], sep, eos, pad)
            for s in range(0, len(data), batch_size)]


def dev_loss(tuned: TunedModel, data: Sequence, batch_size: int = 32, loss_on: str = "target") -> float:
    """Token-weighted mean target NLL over ``data`` (no gradients)."""
    total, count = 0.0, 0
    ids = (tuned.sep_id, tuned.eos_id, tuned.pad_id)
    for s in range(0, len(data), batch_size):
        b = make_batch(data[s: s + batch_size], *ids)
        logits, labels, mask = tuned.batch_logits(b, loss_on)
        n = int(mask.sum())
        total += float(ad.cross_entropy(logits, labels, mask).data) * n
        count += n
    return total / count


def train(
    tuned: TunedModel,
    data: Sequence,
    config: TrainConfig,
    dev: Optional[Sequence] = None,
    dev_metric: Optional[Callable[[TunedModel], float]] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Optimize ``tuned``'s trainable set on encoded examples.

    ``dev_metric`` (higher is better) drives best-epoch selection and early
    stopping; without it the negated dev loss is used, and without dev data the
    last epoch is kept.  The best epoch's parameters are restored at the end.
    """
    if not data:
        raise ValueError("no training data")
    params = tuned.trainable()
    if not params:
        raise ValueError("strategy has no trainable parameters")
    opt = AdamW(params, config.learning_rate, weight_decay=config.weight_decay)
    ids = (tuned.sep_id, tuned.eos_id, tuned.pad_id)
    per_epoch = -(-len(data) // config.batch_size)
    total = config.epochs * per_epoch
    if config.max_steps:
        total = min(total, config.max_steps)
    log = RunLog(tuned.strategy.label, config.seed, count_trainable(tuned.strategy, tuned.config)[0])
    scores: list[float] = []
    best_snap = None
    step = 0
    start = time.perf_counter()
    for epoch in range(config.epochs):
        losses = []
        for b in batches(data, config.batch_size, config.seed, epoch, ids):
            if step >= total:
                break
            for p in params.values():
                p.grad = None
            with ad.Tape():
                loss = tuned.loss(b, config.loss_on)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at step {step}", log)
            ad.backward(loss)
            if config.grad_clip:
                clip_grad_norm(params, config.grad_clip)
            lr = config.learning_rate * linear_schedule(step, total, config.warmup_steps)
            opt.step(lr)
            losses.append(value)
            step += 1
            if on_step is not None:
                on_step(step, value)
        if not losses:
            break
        dl = dev_loss(tuned, dev) if dev else None
        if dev_metric is not None:
            dm = float(dev_metric(tuned))
        else:
            dm = None if dl is None else -dl
        log.epochs.append(EpochRecord(epoch, step, float(np.mean(losses)), dl, dm,
                                      time.perf_counter() - start, lr))
        if dm is not None:
            scores.append(dm)
            stop, best = early_stop(scores, config.early_stop_patience)
            if best == len(scores) - 1:
                best_snap = tuned.snapshot()
            log.best_epoch = best
            if stop:
                log.stopped_early = True
                break
        if step >= total:
            break
    if best_snap is not None:
        tuned.restore(best_snap)
    elif log.epochs:
        log.best_epoch = len(log.epochs) - 1
    return TrainResult(tuned, log, opt)


# ----------------------------------------------------------------------------
# low-data protocol
# ----------------------------------------------------------------------------

LOWDATA_SIZES = (50, 100, 200, 500)


@dataclass
class LowDataRun:
    size: int
    subset: int
    seed: int
    train: list
    dev: list


def dev_size(train_size: int, dev_fraction: float = 0.3) -> int:
    return int(round(dev_fraction * train_size))


def subsample_lowdata(
    dataset: Sequence,
    sizes: Sequence[int] = LOWDATA_SIZES,
    n_subsets: int = 5,
    n_seeds: int = 2,
    seed: int = 0,
    dev_fraction: float = 0.3,
) -> list[LowDataRun]:
    """``n_subsets`` sampled datasets per size, each trained under ``n_seeds`` seeds.

    Subsets of one size are disjoint whenever the pool is large enough;
    otherwise each subset is an independent sample without replacement.
    """
    if not sizes:
        raise ValueError("no sizes given")
    runs = []
    for size in sizes:
        n_dev = dev_size(size, dev_fraction)
        need = size + n_dev
        if len(dataset) < need:
            raise ValueError(f"dataset has {len(dataset)} examples; size {size} needs {need}")
        rng = np.random.default_rng([seed, size])
        disjoint = need * n_subsets <= len(dataset)
        perm = rng.permutation(len(dataset))
        for k in range(n_subsets):
            idx = perm[k * need:(k + 1) * need] if disjoint else rng.permutation(len(dataset))[:need]
            train_part = [dataset[i] for i in idx[:size]]
            dev_part = [dataset[i] for i in idx[size:]]
            for s in range(n_seeds):
                runs.append(LowDataRun(size, k, s, train_part, dev_part))
    return runs
