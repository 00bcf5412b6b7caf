"""Post-training evaluation: linear probe, held-out view-stack norms, and
gradient diagnostics on the loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import AugmentPolicy, StreamKey, augment
from .encoder import EncoderPair, mlp_forward
from .errors import ConfigError, ShapeError
from .linalg import jacobi_svd
from .losses import PriorConfig, lorac_instance_loss
from .tensor import Tape, Tensor
from .trainer import cosine_lr

_TAG_PROBE = 10
_TAG_QHAT = 11


@dataclass(frozen=True)
class ProbeConfig:
    train_frac: float = 0.8
    iters: int = 500
    lr_base: float = 1.0
    lr_final: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.train_frac < 1.0:
            raise ConfigError(f"train_frac must lie in (0, 1), got {self.train_frac}")
        if self.iters < 1:
            raise ConfigError(f"iters must be >= 1, got {self.iters}")
        if not self.lr_base >= self.lr_final >= 0.0:
            raise ConfigError("need lr_base >= lr_final >= 0")


@dataclass
class ProbeResult:
    accuracy: float
    n_train: int
    n_test: int
    n_classes: int
    iters: int


def encode_dataset(pair: EncoderPair, samples: np.ndarray,
                   batch_size: int = 512) -> np.ndarray:
    """Frozen query-encoder features for every row of ``samples``."""
    chunks = []
    for lo in range(0, samples.shape[0], batch_size):
        chunks.append(mlp_forward(pair.query, samples[lo:lo + batch_size]).data)
    return np.concatenate(chunks, axis=0)


def linear_probe(features: np.ndarray, labels: np.ndarray,
                 cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Top-1 accuracy of a multinomial logistic classifier on frozen features.

    Full-batch gradient descent from a zero initialization with cosine decay;
    deterministic given (features, labels, cfg).  The split is random by
    ``cfg.seed``; both splits must contain at least two classes.
    """
    cfg.validate()
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ShapeError(
            f"features {features.shape} and labels {labels.shape} do not line up")
    n = features.shape[0]
    n_train = int(round(n * cfg.train_frac))
    if n_train < 1 or n_train >= n:
        raise ConfigError(f"train_frac {cfg.train_frac} leaves an empty split for n={n}")
    perm = StreamKey(cfg.seed).child(_TAG_PROBE).generator().permutation(n)
    tr, te = perm[:n_train], perm[n_train:]
    if np.unique(labels[tr]).size < 2 or np.unique(labels[te]).size < 2:
        raise ConfigError("degenerate split: fewer than two classes on one side")

    classes = np.unique(labels)
    n_classes = classes.size
    class_index = np.searchsorted(classes, labels)
    x_tr, y_tr = features[tr], class_index[tr]
    x_te, y_te = features[te], class_index[te]
    onehot = np.zeros((x_tr.shape[0], n_classes))
    onehot[np.arange(x_tr.shape[0]), y_tr] = 1.0

    w = np.zeros((features.shape[1], n_classes))
    b = np.zeros(n_classes)
    inv_n = 1.0 / x_tr.shape[0]
    for it in range(cfg.iters):
        logits = x_tr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        delta = (p - onehot) * inv_n
        lr = cosine_lr(it, cfg.iters, cfg.lr_base, cfg.lr_final)
        w -= lr * (x_tr.T @ delta)
        b -= lr * delta.sum(axis=0)

    pred = (x_te @ w + b).argmax(axis=1)
    return ProbeResult(
        accuracy=float((pred == y_te).mean()),
        n_train=int(tr.size), n_test=int(te.size),
        n_classes=int(n_classes), iters=cfg.iters,
    )


@dataclass
class QHatStats:
    """Nuclear norms of held-out V-view stacks, one per instance."""

    norms: np.ndarray            # (n,) values in [sqrt(V), V]
    views: int
    bin_edges: np.ndarray        # 41 edges spanning [sqrt(V), V]
    histogram: np.ndarray        # (40,) counts
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        self.mean = float(self.norms.mean())
        self.std = float(self.norms.std())


def qhat_stats(pair: EncoderPair, samples: np.ndarray, views: int,
               policy: AugmentPolicy, seed: int, bins: int = 40) -> QHatStats:
    """Per-instance nuclear norm of a stack of ``views`` fresh augmentations.

    Each instance is augmented ``views`` times (its own stream), encoded with
    the frozen query encoder, stacked into a views x d matrix, and reduced to
    its nuclear norm.  Evaluation-only; nothing here touches training state.
    """
    if views < 2:
        raise ConfigError(f"views must be >= 2, got {views}")
    samples = np.asarray(samples, dtype=np.float64)
    n, d_in = samples.shape
    norms = np.empty(n)
    raw = np.empty((views, d_in))
    for i in range(n):
        stream = StreamKey(seed).child(_TAG_QHAT, i)
        for v in range(views):
            raw[v] = augment(samples[i], policy, stream.child(v).generator())
        emb = mlp_forward(pair.query, raw).data
        norms[i] = jacobi_svd(emb).S.sum()
    edges = np.linspace(np.sqrt(views), float(views), bins + 1)
    hist, _ = np.histogram(norms, bins=edges)
    return QHatStats(norms=norms, views=views, bin_edges=edges, histogram=hist)


def grad_stationarity_report(queries: np.ndarray, k_pos: np.ndarray,
                             negs: np.ndarray, cfg: PriorConfig) -> np.ndarray:
    """Euclidean norm of the loss gradient at each query row.

    Verifies stationary-point structure: e.g. with the prior off and a single
    negative equal to the positive key, every norm vanishes.
    """
    tape = Tape()
    q = Tensor.param(np.asarray(queries, dtype=np.float64), tape)
    loss = lorac_instance_loss(q, k_pos, negs, cfg)
    tape.backward(loss)
    return np.sqrt((q.grad * q.grad).sum(axis=1))
