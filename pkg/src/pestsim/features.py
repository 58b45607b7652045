"""Counting-task features and the feed-forward counting head.

The head is a two-layer ReLU network trained with Adam on softmax
cross-entropy; gradients are derived by hand so they can be checked against
finite differences.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

STAT_NAMES = ("mean", "sd", "max", "median", "q25", "q75", "iqr", "skewness", "kurtosis", "energy")
N_CLASSES = 3


def stat_features(x) -> dict[str, float]:
    """Ten summary statistics of a single channel.

    Skewness and excess kurtosis are standardised moments; both are defined
    as 0 for constant input.
    """
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("empty channel")
    mean = x.mean()
    dev = x - mean
    var = np.mean(dev**2)
    sd = np.sqrt(var)
    q25, med, q75 = np.percentile(x, [25, 50, 75])
    # relative guard: rounding noise on a constant must not register as spread
    if sd <= 1e-12 * max(1.0, abs(mean)):
        skew = kurt = 0.0
    else:
        skew = np.mean(dev**3) / sd**3
        kurt = np.mean(dev**4) / var**2 - 3.0
    return {
        "mean": float(mean),
        "sd": float(sd),
        "max": float(x.max()),
        "median": float(med),
        "q25": float(q25),
        "q75": float(q75),
        "iqr": float(q75 - q25),
        "skewness": float(skew),
        "kurtosis": float(kurt),
        "energy": float(np.sum(x**2)),
    }


def _pad_to_multiple(x: np.ndarray, b: int) -> np.ndarray:
    rem = (-x.size) % b
    return np.pad(x, (0, rem), mode="edge") if rem else x


def reduce(x, bins: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Bin-averaged waveform and bin-averaged DFT magnitude (first half)."""
    x = _pad_to_multiple(np.asarray(x, dtype=float), bins)
    time_red = x.reshape(bins, -1).mean(axis=1)
    mag = np.abs(np.fft.fft(x))[: x.size // 2]
    mag = _pad_to_multiple(mag, bins)
    freq_red = mag.reshape(bins, -1).mean(axis=1)
    return time_red, freq_red


def baseline_subtract(record) -> np.ndarray:
    """``(2, T)`` channels with their per-record median removed."""
    x = np.stack([np.asarray(record.ch1, float), np.asarray(record.ch2, float)])
    return x - np.median(x, axis=1, keepdims=True)


def feature_names(bins: int = 16) -> list[str]:
    names = []
    for c in (1, 2):
        names += [f"ch{c}_{s}" for s in STAT_NAMES]
        names += [f"ch{c}_time{b:02d}" for b in range(bins)]
        names += [f"ch{c}_freq{b:02d}" for b in range(bins)]
    return names


def record_features(record, bins: int = 16) -> np.ndarray:
    """Feature vector in :func:`feature_names` order."""
    parts = []
    for ch in baseline_subtract(record):
        st = stat_features(ch)
        tr, fr = reduce(ch, bins)
        parts += [np.array([st[s] for s in STAT_NAMES]), tr, fr]
    return np.concatenate(parts)


def feature_matrix(records, bins: int = 16) -> np.ndarray:
    return np.stack([record_features(r, bins) for r in records])


def write_feature_csv(records, path, bins: int = 16, labels=None) -> None:
    names = feature_names(bins)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id"] + (["label"] if labels is not None else []) + names)
        for k, rec in enumerate(records):
            row = [rec.record_id] + ([labels[k]] if labels is not None else [])
            w.writerow(row + [f"{v:.9g}" for v in record_features(rec, bins)])


# --- counting head -----------------------------------------------------------


@dataclass
class CountingParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    mu: np.ndarray = field(default=None)
    sigma: np.ndarray = field(default=None)

    NAMES = ("W1", "b1", "W2", "b2")

    @classmethod
    def init(cls, n_in: int, hidden: int = 64, n_out: int = N_CLASSES, seed: int = 0) -> "CountingParams":
        rng = np.random.default_rng(seed)
        return cls(
            W1=rng.normal(0, np.sqrt(2.0 / n_in), (n_in, hidden)),
            b1=np.zeros(hidden),
            W2=rng.normal(0, np.sqrt(1.0 / hidden), (hidden, n_out)),
            b2=np.zeros(n_out),
            mu=np.zeros(n_in),
            sigma=np.ones(n_in),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.NAMES}

    def copy(self) -> "CountingParams":
        return CountingParams(*(getattr(self, k).copy() for k in self.NAMES),
                              mu=self.mu.copy(), sigma=self.sigma.copy())


def _scaled(features, params: CountingParams) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=float))
    if x.shape[1] != params.W1.shape[0]:
        raise ValueError(f"expected {params.W1.shape[0]} features, got {x.shape[1]}")
    return (x - params.mu) / params.sigma


def counting_forward(features, params: CountingParams) -> np.ndarray:
    """Logits of shape ``(n, 3)`` (or ``(3,)`` for a single feature vector)."""
    single = np.ndim(features) == 1
    x = _scaled(features, params)
    h = np.maximum(x @ params.W1 + params.b1, 0.0)
    out = h @ params.W2 + params.b2
    return out[0] if single else out


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def counting_loss_and_grads(features, labels, params: CountingParams):
    """Mean softmax cross-entropy and its gradients for each tensor."""
    x = _scaled(features, params)
    y = np.asarray(labels, dtype=int)
    n = x.shape[0]
    pre = x @ params.W1 + params.b1
    h = np.maximum(pre, 0.0)
    logits = h @ params.W2 + params.b2
    p = softmax(logits)
    loss = -np.mean(np.log(p[np.arange(n), y] + 1e-300))
    d_logits = p.copy()
    d_logits[np.arange(n), y] -= 1.0
    d_logits /= n
    grads = {
        "W2": h.T @ d_logits,
        "b2": d_logits.sum(axis=0),
    }
    d_pre = (d_logits @ params.W2.T) * (pre > 0)
    grads["W1"] = x.T @ d_pre
    grads["b1"] = d_pre.sum(axis=0)
    return float(loss), grads


def counting_grad_check(features, labels, params: CountingParams, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    _, grads = counting_loss_and_grads(features, labels, params)
    worst = 0.0
    for name in CountingParams.NAMES:
        t = getattr(params, name)
        flat = t.reshape(-1)
        g = grads[name].reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + step
            lp, _ = counting_loss_and_grads(features, labels, params)
            flat[k] = old - step
            lm, _ = counting_loss_and_grads(features, labels, params)
            flat[k] = old
            num = (lp - lm) / (2 * step)
            denom = max(abs(num), abs(g[k]), 1e-7)
            worst = max(worst, abs(num - g[k]) / denom)
    return worst


class Adam:
    def __init__(self, shapes: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, tensors: dict, grads: dict) -> None:
        self.t += 1
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1**self.t)
            vhat = self.v[k] / (1 - self.b2**self.t)
            tensors[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def counting_train(
    features,
    labels,
    *,
    val_features=None,
    val_labels=None,
    hidden: int = 64,
    epochs: int = 100,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
    params: CountingParams | None = None,
):
    """Train the counting head; returns ``(params, history)``.

    Features are standardised with training-set statistics stored in the
    params. With validation data the epoch with the best validation accuracy
    is kept.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    rng = np.random.default_rng(seed)
    if params is None:
        params = CountingParams.init(X.shape[1], hidden, seed=seed)
        params.mu = X.mean(axis=0)
        sd = X.std(axis=0)
        params.sigma = np.where(sd > 1e-12, sd, 1.0)
    elif X.shape[1] != params.W1.shape[0]:
        raise ValueError("feature dimension does not match the params")
    tensors = params.tensors()
    opt = Adam({k: v.shape for k, v in tensors.items()}, lr=lr)
    history = []
    best, best_acc = params.copy(), -1.0
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        losses = []
        for s in range(0, len(y), batch_size):
            idx = order[s : s + batch_size]
            loss, grads = counting_loss_and_grads(X[idx], y[idx], params)
            opt.step(tensors, grads)
            losses.append(loss)
        train_acc = float(np.mean(counting_forward(X, params).argmax(axis=1) == y))
        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "train_acc": train_acc}
        if val_features is not None and len(val_labels):
            val_acc = float(np.mean(counting_forward(val_features, params).argmax(axis=1) == np.asarray(val_labels)))
            entry["val_acc"] = val_acc
            if val_acc > best_acc:
                best, best_acc = params.copy(), val_acc
        history.append(entry)
    if val_features is None or not len(val_labels):
        best = params
    return best, history
