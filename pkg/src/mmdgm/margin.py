"""Max-margin classifier pieces: scores, loss-augmented hinge, hat loss,
label-balance penalty, and a plain Pegasos solver for frozen features.

The classifier weight matrix ``lam`` has one row per class; the score of
class ``y`` for feature vector ``f`` is ``lam[y] @ f``. Ties in any argmax
resolve to the lowest class index.

Two layers of API live here. The ``batch_*`` functions take a score Tensor
(B, M) and stay differentiable, which is what the training objectives use.
The per-sample functions (``hinge``, ``hat_loss``, ...) take plain arrays and
return floats; they are thin wrappers over the batch versions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numgrid as ng
from .numgrid import ContractError, DimensionError, Tensor


@dataclass
class ClassifierWeights:
    lam: np.ndarray
    sigma_sq: float = 1.0

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        if self.lam.ndim != 2 or self.lam.shape[0] < 1:
            raise DimensionError(f"lam must be (M, F), got {self.lam.shape}")
        if not self.sigma_sq > 0:
            raise ValueError("sigma_sq must be positive")

    @property
    def n_classes(self) -> int:
        return self.lam.shape[0]

    @classmethod
    def zeros(cls, n_classes: int, n_features: int, sigma_sq: float = 1.0):
        return cls(np.zeros((n_classes, n_features)), sigma_sq)


@dataclass
class LossMatrix:
    delta: np.ndarray

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        d = self.delta
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise DimensionError("loss matrix must be square")
        if np.any(np.diag(d) != 0) or np.any(d < 0):
            raise ValueError("loss matrix needs a zero diagonal and non-negative entries")

    @classmethod
    def zero_one(cls, n_classes: int) -> "LossMatrix":
        return cls(1.0 - np.eye(n_classes))

    @property
    def n_classes(self) -> int:
        return self.delta.shape[0]


def _lam(w) -> np.ndarray:
    return w.lam if isinstance(w, ClassifierWeights) else np.asarray(w)


def scores(lam, feat) -> Tensor:
    """Discriminant values for a batch of features: (B, F) x (M, F) -> (B, M)."""
    return ng.matmul(feat, ng.transpose(lam))


# -- differentiable batch versions ---------------------------------------------

def batch_hinge(s: Tensor, y_true, loss: LossMatrix) -> tuple[Tensor, np.ndarray]:
    """Per-row ``max_y (delta[y_true, y] + s_y - s_{y_true})`` and its maximizer."""
    y_true = np.asarray(y_true, dtype=np.int64)
    B, M = s.shape
    if y_true.shape != (B,):
        raise DimensionError(f"labels {y_true.shape} for scores {s.shape}")
    if np.any(y_true < 0) or np.any(y_true >= M):
        raise ValueError(f"true label out of range [0, {M})")
    sv = s.value
    aug = loss.delta[y_true] + sv - sv[np.arange(B), y_true][:, None]
    y_aug = np.argmax(aug, axis=1)
    value = ng.take_rows(s, y_aug) - ng.take_rows(s, y_true) + loss.delta[y_true, y_aug]
    return value, y_aug


def batch_hat(s: Tensor, loss: LossMatrix) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Hinge against the classifier's own prediction; returns (value, y_hat, y_aug)."""
    y_hat = np.argmax(s.value, axis=1)
    value, y_aug = batch_hinge(s, y_hat, loss)
    return value, y_hat, y_aug


def batch_balance(s_lab: Tensor, y_lab, s_unl: Tensor, y_hat, n_classes: int) -> Tensor:
    """Label-balance penalty with class memberships treated as constants.

    ``sqrt(sum_y (mean_U[1{y_hat=y} s_y] - mean_L[1{y=y_n} s_y])^2)``
    """
    y_lab = np.asarray(y_lab, dtype=np.int64)
    y_hat = np.asarray(y_hat, dtype=np.int64)
    if y_lab.size == 0:
        raise ContractError("label-balance penalty needs at least one labeled example")
    parts = [_class_means(s_lab, y_lab, n_classes)]
    if y_hat.size:
        parts.insert(0, _class_means(s_unl, y_hat, n_classes))
        diff = parts[0] - parts[1]
    else:
        diff = ng.neg(parts[0])
    return ng.sqrt(ng.reduce_sum(ng.square(diff)))


def _class_means(s: Tensor, y: np.ndarray, n_classes: int) -> Tensor:
    picked = ng.reshape(ng.take_rows(s, y), (-1, 1))
    member = np.zeros((n_classes, y.size))
    member[y, np.arange(y.size)] = 1.0 / y.size
    return ng.matmul(Tensor(member), picked)


# -- per-sample API --------------------------------------------------------------

def discriminant(w, feat) -> np.ndarray:
    lam = _lam(w)
    feat = np.asarray(feat, dtype=np.float64)
    if feat.shape[-1] != lam.shape[1]:
        raise DimensionError(f"features of size {feat.shape[-1]} for weights {lam.shape}")
    return feat @ lam.T


def predict(w, feat):
    """Arg-max class (lowest index on ties); vectorized over leading axes."""
    return np.argmax(discriminant(w, feat), axis=-1)


def _mean_scores(w, feat_samples) -> Tensor:
    feat_samples = np.atleast_2d(np.asarray(feat_samples, dtype=np.float64))
    if feat_samples.shape[0] < 1:
        raise ValueError("need at least one feature sample")
    return Tensor(discriminant(w, feat_samples.mean(axis=0))[None, :])


def hinge(w, feat_samples, y_true: int, loss: LossMatrix) -> tuple[float, int]:
    """Loss-augmented hinge on sample-averaged features (L x F)."""
    value, y_aug = batch_hinge(_mean_scores(w, feat_samples), [y_true], loss)
    return float(value.value[0]), int(y_aug[0])


def grad_lambda(y_aug: int, y_true: int, feat_samples, n_classes: int) -> np.ndarray:
    """Subgradient of the hinge w.r.t. the weight matrix."""
    feat_samples = np.atleast_2d(np.asarray(feat_samples, dtype=np.float64))
    if not (0 <= y_aug < n_classes and 0 <= y_true < n_classes):
        raise ValueError("class index out of range")
    g = np.zeros((n_classes, feat_samples.shape[1]))
    mean = feat_samples.mean(axis=0)
    g[y_aug] += mean
    g[y_true] -= mean
    return g


def hat_loss(w, feat_samples, loss: LossMatrix) -> tuple[float, int, int]:
    value, y_hat, y_aug = batch_hat(_mean_scores(w, feat_samples), loss)
    return float(value.value[0]), int(y_hat[0]), int(y_aug[0])


def balance_penalty(w, labeled, unlabeled) -> float:
    """``labeled``: (feat, y) pairs; ``unlabeled``: (feat, y_hat) pairs."""
    lam = _lam(w)
    if not labeled:
        raise ContractError("label-balance penalty needs at least one labeled example")
    fl = np.array([f for f, _ in labeled], dtype=np.float64)
    yl = np.array([y for _, y in labeled], dtype=np.int64)
    fu = np.array([f for f, _ in unlabeled], dtype=np.float64).reshape(len(unlabeled), -1)
    yu = np.array([y for _, y in unlabeled], dtype=np.int64)
    s_u = Tensor(fu @ lam.T) if len(unlabeled) else Tensor(np.zeros((0, lam.shape[0])))
    return float(batch_balance(Tensor(fl @ lam.T), yl, s_u, yu, lam.shape[0]).value)


def hard_balance_violation(y_lab, y_hat, n_classes: int) -> float:
    """L2 gap between predicted-label and true-label class frequencies (diagnostic only)."""
    fl = np.bincount(np.asarray(y_lab, dtype=np.int64), minlength=n_classes) / max(len(y_lab), 1)
    fu = np.bincount(np.asarray(y_hat, dtype=np.int64), minlength=n_classes) / max(len(y_hat), 1)
    return float(np.sqrt(np.sum((fu - fl) ** 2)))


def l2_reg(w) -> float:
    return float(np.sum(w.lam ** 2) / (2.0 * w.sigma_sq))


# -- Pegasos baseline --------------------------------------------------------------

def pegasos_objective(w, feats, labels, reg: float, loss: LossMatrix | None = None) -> float:
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    lam = _lam(w)
    loss = loss or LossMatrix.zero_one(lam.shape[0])
    value, _ = batch_hinge(Tensor(feats @ lam.T), labels, loss)
    return float(0.5 * reg * np.sum(lam ** 2) + value.value.mean())


def pegasos_fit(feats, labels, reg: float, epochs: int, seed: int = 0,
                n_classes: int | None = None, loss: LossMatrix | None = None,
                project: bool = True) -> ClassifierWeights:
    """Multiclass Pegasos on fixed features.

    Step ``t`` draws one example uniformly, uses rate ``1/(reg*t)`` and the
    subgradient ``reg*lam + (f(y_aug) - f(y_true))``.
    """
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("pegasos_fit needs a non-empty (N, F) feature matrix")
    if reg <= 0:
        raise ValueError("reg must be positive")
    N, F = feats.shape
    M = n_classes or int(labels.max()) + 1
    delta = (loss or LossMatrix.zero_one(M)).delta
    rng = np.random.default_rng(seed)
    lam = np.zeros((M, F))
    radius = 1.0 / np.sqrt(reg)
    t = 0
    for _ in range(epochs):
        for i in rng.integers(0, N, size=N):
            t += 1
            eta = 1.0 / (reg * t)
            x, y = feats[i], labels[i]
            s = lam @ x
            aug = delta[y] + s - s[y]
            ya = int(np.argmax(aug))
            lam *= 1.0 - eta * reg
            if aug[ya] > 0 and ya != y:
                lam[ya] -= eta * x
                lam[y] += eta * x
            if project:
                norm = np.sqrt(np.sum(lam ** 2))
                if norm > radius:
                    lam *= radius / norm
    return ClassifierWeights(lam, sigma_sq=1.0 / reg)
