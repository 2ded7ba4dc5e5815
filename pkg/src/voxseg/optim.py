"""Adam optimizer, gradient accumulation, and the training loop."""

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import LossConfig, deep_supervision_loss, downsample_target, loss_fn, one_hot
from .params import ConfigurationError


@dataclass
class TrainConfig:
    lr: float = 1e-3
    physical_batch: int = 2
    accumulation_steps: int = 1
    patience_epochs: int = 30
    max_epochs: int = 1000
    checkpoint_policy: str = "total_loss"  # total_loss | top_level_loss
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.patience_epochs < 1 or self.physical_batch < 1 or self.accumulation_steps < 1:
            raise ConfigurationError("invalid TrainConfig")
        if self.checkpoint_policy not in ("total_loss", "top_level_loss"):
            raise ConfigurationError(f"unknown checkpoint policy: {self.checkpoint_policy}")

    @property
    def effective_batch(self):
        return self.physical_batch * self.accumulation_steps

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Adam:
    """Standard bias-corrected Adam over a named parameter collection."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)  # (name, Tensor) pairs
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def _batch_loss(model, images, labels, loss_config, training, rng):
    """Forward one batch and build its (deep-supervised) loss."""
    x = np.stack(images)[:, None]  # (B,1,D,H,W)
    preds = model.forward(Tensor(np.asarray(x, dtype=model.store.dtype)),
                          training=training, rng=rng)
    y = np.stack(labels)
    targets = [one_hot(t, model.config.classes).astype(model.store.dtype)
               for t in downsample_target(y, model.config.levels)]
    if len(preds) == 1:
        total = loss_fn(preds[0], targets[-1], loss_config)
        return total, [float(total.data)]
    return deep_supervision_loss(preds, targets, loss_config)


def accumulated_step(model, optimizer, sub_batches, loss_config, rng=None, training=True):
    """n forward/backward passes, gradients averaged, one optimizer step.

    Each sub-batch loss is scaled by 1/n before backward so the accumulated
    gradient equals the gradient of the mean loss over all sub-batches,
    i.e. the same gradients as one step over the larger batch.
    """
    n = len(sub_batches)
    optimizer.zero_grad()
    total = 0.0
    for images, labels in sub_batches:
        loss, _ = _batch_loss(model, images, labels, loss_config, training, rng)
        (loss * (1.0 / n)).backward()
        total += float(loss.data)
    optimizer.step()
    return total / n


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_top_loss: float
    val_level_losses: list
    seconds: float


@dataclass
class TrainingResult:
    best_state: dict
    best_epoch: int
    best_val_loss: float
    history: list = field(default_factory=list)
    stopped_early: bool = False


def evaluate_loss(model, pairs, loss_config, batch=2):
    """Validation losses: (total, top-level, per-level list)."""
    totals, tops, levels = [], [], None
    with ad.no_grad():
        for i in range(0, len(pairs), batch):
            chunk = pairs[i: i + batch]
            images = [p[0] for p in chunk]
            labels = [p[1] for p in chunk]
            loss, per_level = _batch_loss(model, images, labels, loss_config,
                                          training=False, rng=None)
            w = len(chunk)
            totals.append((float(loss.data), w))
            tops.append((per_level[-1], w))
            if levels is None:
                levels = [[] for _ in per_level]
            for acc, lv in zip(levels, per_level):
                acc.append((lv, w))

    def wmean(vals):
        return sum(v * w for v, w in vals) / sum(w for _, w in vals)

    return wmean(totals), wmean(tops), [wmean(acc) for acc in levels]


def training_loop(model, train_pairs, val_pairs, train_config, loss_config,
                  augment_fn=None, log=None):
    """Train with early stopping; returns best checkpoint state and history.

    train_pairs / val_pairs: lists of (image, label) volumes. The best
    weights are chosen per checkpoint_policy on the validation loss, and the
    same monitored loss drives the patience-based early stop.
    """
    if not train_pairs or not val_pairs:
        raise ConfigurationError("empty train or validation set")
    cfg = train_config
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    best = TrainingResult(best_state=model.state_dict(), best_epoch=0,
                          best_val_loss=np.inf)
    epochs_since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        tic = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_pairs))
        batches = []
        for i in range(0, len(order), cfg.physical_batch):
            idx = order[i: i + cfg.physical_batch]
            images, labels = [], []
            for j in idx:
                img, lab = train_pairs[j]
                if augment_fn is not None and cfg.augment:
                    img, lab = augment_fn(img, lab, rng)
                images.append(img)
                labels.append(lab)
            batches.append((images, labels))
        train_losses = []
        for i in range(0, len(batches), cfg.accumulation_steps):
            group = batches[i: i + cfg.accumulation_steps]
            train_losses.append(accumulated_step(model, optimizer, group,
                                                 loss_config, rng=rng))
        val_total, val_top, val_levels = evaluate_loss(model, val_pairs, loss_config,
                                                       batch=cfg.physical_batch)
        monitored = val_top if cfg.checkpoint_policy == "top_level_loss" else val_total
        rec = EpochRecord(epoch=epoch,
                          train_loss=float(np.mean(train_losses)),
                          val_loss=val_total, val_top_loss=val_top,
                          val_level_losses=val_levels,
                          seconds=time.perf_counter() - tic)
        best.history.append(rec)
        if log is not None:
            log(rec)
        if monitored < best.best_val_loss:
            best.best_val_loss = monitored
            best.best_epoch = epoch
            best.best_state = model.state_dict()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience_epochs:
                best.stopped_early = True
                break
    model.load_state_dict(best.best_state)
    return best
