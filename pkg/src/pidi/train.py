"""Losses, Adam, learning-rate schedule and the training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag

log = logging.getLogger(__name__)

EPS = 1e-7


class NonFiniteError(FloatingPointError):
    """Training produced a NaN/Inf; ``name`` identifies the first offending tensor."""

    def __init__(self, name: str, step: int):
        super().__init__(f"non-finite values in {name} at step {step}")
        self.name = name
        self.step = step


@dataclass(frozen=True)
class LossParams:
    lam: float = 1.1
    eta: float = 0.3

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")


def edge_loss_weights(gt: np.ndarray, params: LossParams):
    """Per-pixel weights ``(neg_w, pos_w)`` and the per-image negative share ``beta``.

    Negatives (y = 0) get ``alpha = lam * (1 - beta)``, positives (y >= eta)
    get ``beta``; pixels with ``0 < y < eta`` get neither.
    """
    gt = np.asarray(gt)
    axes = tuple(range(1, gt.ndim))
    neg = gt == 0
    pos = gt >= params.eta
    beta = neg.mean(axis=axes, keepdims=True)
    alpha = params.lam * (1 - beta)
    return alpha * neg, beta * pos, beta


def edge_loss_map(pred: np.ndarray, gt: np.ndarray, params: LossParams) -> np.ndarray:
    neg_w, pos_w, _ = edge_loss_weights(gt, params)
    p = np.clip(np.asarray(pred, dtype=np.float64), EPS, 1 - EPS)
    return -(neg_w * np.log1p(-p) + pos_w * np.log(p))


def edge_loss(pred: np.ndarray, gt: np.ndarray, params: LossParams = LossParams()) -> float:
    """Annotator-robust weighted cross-entropy, summed over pixels."""
    return float(edge_loss_map(pred, gt, params).sum())


def edge_loss_grad(pred: np.ndarray, gt: np.ndarray, params: LossParams = LossParams()) -> np.ndarray:
    neg_w, pos_w, _ = edge_loss_weights(gt, params)
    pred = np.asarray(pred)
    p = np.clip(pred.astype(np.float64), EPS, 1 - EPS)
    g = neg_w / (1 - p) - pos_w / p
    g[(pred < EPS) | (pred > 1 - EPS)] = 0.0
    return g


def edge_loss_var(preds, gt: np.ndarray, params: LossParams = LossParams()) -> ag.Var:
    """Total loss over a list of predicted maps (deep supervision)."""
    if isinstance(preds, ag.Var):
        preds = [preds]
    terms = []
    for p in preds:
        value = np.array(edge_loss(p.data, gt, params))
        grad = edge_loss_grad(p.data, gt, params).astype(p.data.dtype)
        terms.append(ag._make(value, (p,), lambda g, grad=grad: (g * grad,)))
    return ag.total(terms)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    lp = log_softmax(np.asarray(logits, dtype=np.float64))
    return float(-lp[np.arange(len(labels)), labels].mean())


def cross_entropy_grad(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels)
    p = np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))
    p[np.arange(len(labels)), labels] -= 1
    return p / len(labels)


def cross_entropy_var(logits: ag.Var, labels) -> ag.Var:
    value = np.array(cross_entropy(logits.data, labels))
    grad = cross_entropy_grad(logits.data, labels).astype(logits.data.dtype)
    return ag._make(value, (logits,), lambda g: (g * grad,))


# --- optimizer ------------------------------------------------------------------

def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update with bias correction.

    ``state`` is ``{"t": int, "m": [...], "v": [...]}``; pass ``{}`` on the
    first call.  Returns ``(new_params, new_state)``.
    """
    b1, b2 = betas
    t = state.get("t", 0) + 1
    ms = state.get("m") or [np.zeros_like(p) for p in params]
    vs = state.get("v") or [np.zeros_like(p) for p in params]
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, ms, vs):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_p.append((p - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype))
        new_m.append(m)
        new_v.append(v)
    return new_p, {"t": t, "m": new_m, "v": new_v}


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state: dict = {}

    def step(self):
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        new, self.state = adam_step([p.data for p in self.params], grads, self.state, self.lr, self.betas, self.eps)
        for p, d in zip(self.params, new):
            p.data = d

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass(frozen=True)
class MultiStepLR:
    """Learning rate multiplied by ``gamma`` at each milestone epoch (0-based)."""

    base_lr: float
    milestones: tuple = ()
    gamma: float = 0.1

    def __call__(self, epoch: int) -> float:
        return self.base_lr * self.gamma ** sum(epoch >= m for m in self.milestones)


@dataclass(frozen=True)
class LinearDecayLR:
    """Learning rate falling linearly from ``base_lr`` towards zero over ``epochs``."""

    base_lr: float
    epochs: int

    def __call__(self, epoch: int) -> float:
        return self.base_lr * max(0.0, 1.0 - epoch / self.epochs)


EDGE_LR = 0.005
CLS_LR = 0.001


def edge_schedule(epochs: int = 20, lr: float = EDGE_LR) -> MultiStepLR:
    """Decay by 0.1 at epochs 10 and 16 of a 20-epoch run, scaled to ``epochs``."""
    return MultiStepLR(lr, tuple(sorted({max(1, round(epochs * f)) for f in (0.5, 0.8)})), 0.1)


def cls_schedule(epochs: int = 10, lr: float = CLS_LR) -> LinearDecayLR:
    return LinearDecayLR(lr, epochs)


# --- training loop ------------------------------------------------------------------

@dataclass
class History:
    rows: list = field(default_factory=list)

    def append(self, epoch, step, loss, metric, lr):
        self.rows.append({"epoch": epoch, "step": step, "loss": loss, "metric": metric, "lr": lr})

    @property
    def losses(self):
        return [r["loss"] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=["epoch", "step", "loss", "metric", "lr"])
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _check_finite(loss: ag.Var, model, step: int) -> None:
    # a corrupted parameter is reported before the loss it poisons
    params = list(model.named_parameters())
    for name, p in params:
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError(name, step)
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("loss", step)
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"grad of {name}", step)


def batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i: i + batch_size]


def train_loop(model, dataset, loss_fn, optimizer, epochs: int, seed: int = 0, batch_size: int = 8,
               schedule=None, history_path=None, on_epoch=None) -> History:
    """Minibatch training.

    ``dataset`` is a tuple of equally long arrays; ``loss_fn(model, *arrays)``
    returns ``(loss_var, metric)`` for one batch.  One history row is kept per
    epoch with the mean batch loss and metric.
    """
    rng = np.random.default_rng(seed)
    n = len(dataset[0])
    history = History()
    step = 0
    model.train()
    for epoch in range(epochs):
        if schedule is not None:
            optimizer.lr = schedule(epoch)
        losses, metrics = [], []
        for idx in batches(n, batch_size, rng):
            optimizer.zero_grad()
            loss, metric = loss_fn(model, *(a[idx] for a in dataset))
            loss.backward()
            _check_finite(loss, model, step)
            optimizer.step()
            step += 1
            losses.append(float(loss.data))
            metrics.append(float(metric))
        history.append(epoch, step, float(np.mean(losses)), float(np.mean(metrics)), float(optimizer.lr))
        log.info("epoch %d loss %.5g metric %.4f lr %.3g", epoch, history.rows[-1]["loss"],
                 history.rows[-1]["metric"], optimizer.lr)
        if on_epoch is not None:
            on_epoch(epoch, history)
    if history_path is not None:
        history.write_csv(history_path)
    return history


# --- task-specific glue ----------------------------------------------------------------

def edge_batch_loss(params: LossParams = LossParams()):
    def fn(model, images, gts):
        preds = model(images)
        loss = edge_loss_var(preds, gts, params)
        return loss, pixel_f1(preds[-1].data, gts, params.eta)
    return fn


def cls_batch_loss(model, images, labels):
    logits = model(images)
    acc = float((logits.data.argmax(axis=1) == labels).mean())
    return cross_entropy_var(logits, labels), acc


def pixel_f1(pred: np.ndarray, gt: np.ndarray, eta: float = 0.3, threshold: float = 0.5) -> float:
    """Pixel-wise F1 of ``pred > threshold`` against ``gt >= eta``; pixels with 0 < gt < eta are ignored."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    valid = (gt == 0) | (gt >= eta)
    p = (pred > threshold) & valid
    t = (gt >= eta)
    tp = np.sum(p & t)
    fp = np.sum(p & ~t)
    fn = np.sum(~p & t & valid)
    if tp == 0:
        return 0.0 if (fp or fn) else 1.0
    return float(2 * tp / (2 * tp + fp + fn))


def predict_edges(model, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    model.eval()
    out = [model(images[i: i + batch_size])[-1].data for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def predict_logits(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    return np.concatenate([model(images[i: i + batch_size]).data for i in range(0, len(images), batch_size)])


def accuracy(model, images, labels) -> float:
    return float((predict_logits(model, images).argmax(axis=1) == labels).mean())
