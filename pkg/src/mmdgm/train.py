"""Objectives and training loops for the supervised and semi-supervised models.

Conventions: ``elbo`` returns the evidence lower bound per example (larger is
better). Objectives are *minimized* and always built as the minibatch estimate
of the full-data objective, i.e. per-example sums scaled by
``dataset size / batch size``.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from . import numgrid as ng
from .margin import LossMatrix, batch_balance, batch_hinge, scores
from .models import FEATURE_SOURCES, DecoderNet, MlpSpec, Model, RecognitionNet, build_model, \
    save_checkpoint
from .numgrid import ContractError, NonFiniteError, ParamStore, Tape, Tensor
from .stochlayers import (LatentGaussian, NoiseDraw, gaussian_log_density, kl_to_std_normal,
                          reparameterize, std_normal_log_density)

log = logging.getLogger(__name__)

ESTIMATORS = ("path", "score")
METRICS_HEADER = ["step", "epoch", "objective", "elbo", "hinge", "hat", "balance", "reg",
                  "train_err", "valid_err", "lr"]

# fixed offsets from the master seed, one stream per consumer
SEED_INIT, SEED_BATCH, SEED_NOISE, SEED_EVAL = 0, 1, 2, 3


class NumericalAbort(RuntimeError):
    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message if dump_path is None else f"{message} (state dumped to {dump_path})")
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    C: float = 15.0
    sigma_sq: float = 1.0
    L: int = 1
    alpha: float = 0.1
    alpha_U: float = 3.0
    alpha_B: float = 0.001
    batch_labeled: int = 100
    batch_unlabeled: int = 100
    lr: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int | None = None
    epochs: int = 50
    seed: int = 0
    estimator: str = "path"
    feature_source: str = "concat_hidden"
    hidden: list[int] = field(default_factory=lambda: [500, 500])
    latent_dim: int = 50
    nonlinearity: str = "softplus"
    likelihood: str = "bernoulli"
    classifier_hidden: list[int] | None = None
    dtype: str = "float64"
    log_every: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.C >= 0, "C must be >= 0"),
            (self.sigma_sq > 0, "sigma_sq must be > 0"),
            (int(self.L) >= 1, "L must be >= 1"),
            (min(self.alpha, self.alpha_U, self.alpha_B) >= 0, "alpha weights must be >= 0"),
            (self.batch_labeled > 0 and self.batch_unlabeled > 0, "batch sizes must be positive"),
            (self.lr > 0, "lr must be > 0"),
            (0 < self.lr_decay_factor <= 1, "lr_decay_factor must lie in (0, 1]"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.estimator in ESTIMATORS, f"estimator must be one of {ESTIMATORS}"),
            (self.feature_source in FEATURE_SOURCES, f"feature_source must be one of {FEATURE_SOURCES}"),
            (self.latent_dim > 0, "latent_dim must be positive"),
            (self.dtype in ("float64", "float32"), "dtype must be float64 or float32"),
            (self.log_every > 0, "log_every must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        MlpSpec(self.hidden, self.nonlinearity)

    @property
    def decay_epoch(self) -> int:
        if self.lr_decay_epoch is not None:
            return self.lr_decay_epoch
        return int(round(2 * self.epochs / 3))

    def lr_at(self, epoch: int) -> float:
        return self.lr * (self.lr_decay_factor if epoch >= self.decay_epoch else 1.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepReport:
    objective: float
    elbo_term: float
    hinge_term: float = 0.0
    hat_term: float = 0.0
    balance_term: float = 0.0
    reg_term: float = 0.0
    weights: dict = field(default_factory=dict)
    grad_norms: dict = field(default_factory=dict)
    loss: Tensor | None = field(default=None, repr=False)
    y_hat: np.ndarray | None = field(default=None, repr=False)

    def recombined(self) -> float:
        w = self.weights
        return (self.elbo_term + w.get("hinge", 0.0) * self.hinge_term
                + w.get("hat", 0.0) * self.hat_term + w.get("balance", 0.0) * self.balance_term
                + self.reg_term)


# -- bounds ------------------------------------------------------------------------

def _tile_labels(y, batch: int, n_samples: int):
    if y is None:
        return None
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.size == 1 and batch > 1:
        y = np.full(batch, int(y[0]))
    return np.tile(y, n_samples)


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(1, -1) if x.ndim == 1 else x


def elbo_parts(enc: RecognitionNet, dec: DecoderNet, x, y, noise: NoiseDraw):
    """Per-example ELBO with analytic KL, plus the pieces callers reuse.

    Returns ``(elbo_rows, q, z, hidden)`` where ``z`` is (L*B, K), sample-major.
    """
    x = _as_batch(x)
    B = x.shape[0]
    q, hidden = enc.forward(x, y)
    z = reparameterize(q, noise)
    L = noise.n_samples
    out = dec.forward(z, _tile_labels(y, B, L))
    ll = dec.log_lik(np.tile(x, (L, 1)), out)
    ll_mean = ng.reduce_mean(ng.reshape(ll, (L, B)), axis=0)
    bound = ng.sub(ll_mean, kl_to_std_normal(q))
    if enc.conditions_on_label:
        bound = ng.add(bound, -math.log(enc.n_classes))
    return bound, q, z, hidden


def elbo(enc: RecognitionNet, dec: DecoderNet, x, y=None, noise: NoiseDraw | None = None) -> Tensor:
    """Evidence lower bound per example (shape (B,)); a conditional model
    includes the uniform label prior ``-log M``."""
    return elbo_parts(enc, dec, x, y, noise)[0]


def marginal_elbo_enumerate(enc: RecognitionNet, dec: DecoderNet, x, noise: NoiseDraw) -> np.ndarray:
    """``log sum_y exp(bound(x, y))`` using the same noise for every class.

    This is the tight enumeration surrogate of the label-marginal bound; only
    meant as a test oracle, so it refuses large label sets.
    """
    M = enc.n_classes
    if not enc.conditions_on_label:
        raise ContractError("enumeration needs a label-conditioned model")
    if M > 64:
        raise ValueError("refusing to enumerate more than 64 classes")
    per_class = np.stack([elbo(enc, dec, x, c, noise).value for c in range(M)])
    return logsumexp(per_class, axis=0)


def point_estimate_bound(model: Model, x, noise: NoiseDraw) -> tuple[Tensor, np.ndarray]:
    """Bound evaluated at the classifier's prediction, treated as a delta posterior."""
    y_hat = model.predict(_as_batch(x))
    return elbo(model.enc, model.dec, x, y_hat, noise), y_hat


# -- supervised objective ---------------------------------------------------------

def _hinge_features(model: Model, q, z, hidden, L: int, B: int) -> Tensor:
    src = model.feature_source
    if src == "latent_mean":
        # sampled latent features, averaged over the L draws
        return ng.reduce_mean(ng.reshape(z, (L, B, z.shape[1])), axis=0)
    if src == "last_hidden":
        return hidden[-1]
    return ng.concat(hidden, axis=1) if len(hidden) > 1 else hidden[0]


def supervised_objective(model: Model, x, y, cfg: TrainConfig, noise: NoiseDraw,
                         n_total: int | None = None, loss: LossMatrix | None = None) -> StepReport:
    """Minibatch estimate of ``-ELBO + ||lam||^2/(2 sigma^2) + C * hinge``.

    ``report.loss`` is the Tensor to back-propagate. With the score estimator
    it is a surrogate whose gradient is the score-function estimate for the
    recognition parameters; the reported numbers are identical either way.
    """
    if y is None or np.any(np.asarray(y) < 0):
        raise ContractError("supervised objective needs every example labeled")
    x = _as_batch(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    B, L = x.shape[0], noise.n_samples
    N = n_total or B
    scale = N / B
    loss = loss or LossMatrix.zero_one(model.n_classes)
    lam = model.lam()

    if cfg.estimator == "path":
        bound, q, z, hidden = elbo_parts(model.enc, model.dec, x, None, noise)
        feat = _hinge_features(model, q, z, hidden, L, B)
        hinge_rows, y_aug = batch_hinge(scores(lam, feat), y, loss)
        neg_elbo = ng.reduce_sum(ng.neg(bound))
        total_hinge = ng.reduce_sum(hinge_rows)
        reg = ng.mul(ng.reduce_sum(ng.square(lam)), 1.0 / (2.0 * cfg.sigma_sq))
        obj = ng.mul(neg_elbo, scale) + ng.mul(total_hinge, scale * cfg.C) + reg
        report_loss = obj
        elbo_val, hinge_val = float(neg_elbo.value), float(total_hinge.value)
    else:
        report_loss, elbo_val, hinge_val, reg = _score_surrogate(model, x, y, cfg, noise,
                                                                 scale, loss)
    reg_val = float(reg.value)
    return StepReport(
        objective=scale * elbo_val + scale * cfg.C * hinge_val + reg_val,
        elbo_term=scale * elbo_val, hinge_term=scale * hinge_val, reg_term=reg_val,
        weights={"hinge": cfg.C}, loss=report_loss)


def _score_surrogate(model: Model, x, y, cfg: TrainConfig, noise: NoiseDraw, scale: float,
                     loss: LossMatrix):
    enc, dec = model.enc, model.dec
    B, L = x.shape[0], noise.n_samples
    lam = model.lam()
    q, hidden = enc.forward(x, None)
    z_val = reparameterize(LatentGaussian(ng.constant(q.mu), ng.constant(q.log_var)), noise).value
    z = Tensor(z_val)
    # the same draws, scored under a differentiable q
    q_rep = LatentGaussian(ng.tile_rows(q.mu, L), ng.tile_rows(q.log_var, L))
    log_q = gaussian_log_density(z, q_rep)
    log_prior = std_normal_log_density(z)
    ll = dec.log_lik(np.tile(x, (L, 1)), dec.forward(z))
    if model.feature_source == "latent_mean":
        feat_rows = z  # (L*B, K), constant
        feat = Tensor(z_val.reshape(L, B, -1).mean(axis=0))
    else:
        feat_rows = None
        feat = _hinge_features(model, q, None, hidden, L, B)
    hinge_rows, y_aug = batch_hinge(scores(lam, feat), y, loss)

    # integrand h_l = -(log p(x, z_l) - log q(z_l)) + C * hinge_l, hinge_l evaluated at the
    # augmented label of the sample-averaged scores. The loss term delta[y, y_aug] must stay:
    # y_aug changes with the draws, so dropping it biases the estimate.
    h = -(ll.value + log_prior.value - log_q.value)
    if feat_rows is not None:
        s_rows = z_val @ lam.value.T
        yt, ya = np.tile(y, L), np.tile(y_aug, L)
        r = np.arange(L * B)
        h = h + cfg.C * (loss.delta[yt, ya] + s_rows[r, ya] - s_rows[r, yt])
    score_term = ng.reduce_sum(ng.mul(Tensor(h), log_q))
    decoder_term = ng.reduce_sum(ng.neg(ll))
    total_hinge = ng.reduce_sum(hinge_rows)
    reg = ng.mul(ng.reduce_sum(ng.square(lam)), 1.0 / (2.0 * cfg.sigma_sq))
    surrogate = (ng.mul(score_term + decoder_term, scale / L)
                 + ng.mul(total_hinge, scale * cfg.C) + reg)
    kl = kl_to_std_normal(q).value
    neg_elbo = float(np.sum(kl) - ll.value.reshape(L, B).mean(axis=0).sum())
    return surrogate, neg_elbo, float(total_hinge.value), reg


def _grads_for(store: ParamStore, prefix: str) -> dict[str, np.ndarray]:
    return {n: store.grad(n).copy() for n in store.names(prefix)}


def grad_phi(model: Model, x, y, cfg: TrainConfig, noise: NoiseDraw,
             estimator: str | None = None) -> dict[str, np.ndarray]:
    """Gradient of ``sum_n (-ELBO_n + C * hinge_n)`` w.r.t. the recognition parameters.

    ``estimator`` selects the reparameterization (``path``) or the
    score-function (``score``) estimate. The store's gradients are left zeroed.
    """
    est = estimator or cfg.estimator
    local = TrainConfig(**{**cfg.to_dict(), "estimator": est, "sigma_sq": 1.0})
    store = model.store
    store.zero_grad()
    with Tape() as tape:
        rep = supervised_objective(model, x, y, local, noise)
        tape.backward(rep.loss)
    out = _grads_for(store, model.enc.prefix + ".")
    store.zero_grad()
    return out


def grad_phi_score(model: Model, x, y, cfg: TrainConfig, noise: NoiseDraw) -> dict[str, np.ndarray]:
    return grad_phi(model, x, y, cfg, noise, "score")


def grad_phi_path(model: Model, x, y, cfg: TrainConfig, noise: NoiseDraw) -> dict[str, np.ndarray]:
    return grad_phi(model, x, y, cfg, noise, "path")


# -- semi-supervised objective ------------------------------------------------------

def ssl_objective(model: Model, xl, yl, xu, y_hat, cfg: TrainConfig, noise_l: NoiseDraw,
                  noise_u: NoiseDraw | None, n_labeled: int | None = None,
                  n_unlabeled: int | None = None, loss: LossMatrix | None = None) -> StepReport:
    """``L_G + alpha * (L_L + alpha_U * L_U + alpha_B * L_B) + ||lam||^2/(2 sigma^2)``.

    ``y_hat`` are the (frozen) predictions for the unlabeled rows ``xu``.
    """
    xl = _as_batch(xl)
    yl = np.atleast_1d(np.asarray(yl, dtype=np.int64))
    if xl.shape[0] == 0:
        raise ContractError("the semi-supervised objective needs labeled examples")
    xu = np.zeros((0, xl.shape[1])) if xu is None else _as_batch(xu)
    y_hat = np.atleast_1d(np.asarray(y_hat if y_hat is not None else [], dtype=np.int64))
    if y_hat.size != xu.shape[0]:
        raise ContractError("need one frozen prediction per unlabeled example")
    loss = loss or LossMatrix.zero_one(model.n_classes)
    mL, mU = xl.shape[0], xu.shape[0]
    sL = (n_labeled or mL) / mL
    sU = (n_unlabeled or mU) / mU if mU else 0.0
    lam = model.lam()

    bound_l = elbo(model.enc, model.dec, xl, yl, noise_l)
    gen = ng.mul(ng.reduce_sum(ng.neg(bound_l)), sL)
    s_lab = scores(lam, model.features(xl))
    hinge_rows, _ = batch_hinge(s_lab, yl, loss)
    hinge = ng.mul(ng.reduce_sum(hinge_rows), sL)
    if mU:
        bound_u = elbo(model.enc, model.dec, xu, y_hat, noise_u)
        gen = gen + ng.mul(ng.reduce_sum(ng.neg(bound_u)), sU)
        s_unl = scores(lam, model.features(xu))
        hat_rows, _ = batch_hinge(s_unl, y_hat, loss)
        hat = ng.mul(ng.reduce_sum(hat_rows), sU)
    else:
        s_unl = Tensor(np.zeros((0, model.n_classes)))
        hat = Tensor(0.0)
    balance = batch_balance(s_lab, yl, s_unl, y_hat, model.n_classes)
    reg = ng.mul(ng.reduce_sum(ng.square(lam)), 1.0 / (2.0 * cfg.sigma_sq))
    a = cfg.alpha
    total = (gen + ng.mul(hinge, a) + ng.mul(hat, a * cfg.alpha_U)
             + ng.mul(balance, a * cfg.alpha_B) + reg)
    return StepReport(
        objective=float(total.value), elbo_term=float(gen.value), hinge_term=float(hinge.value),
        hat_term=float(hat.value), balance_term=float(balance.value), reg_term=float(reg.value),
        weights={"hinge": a, "hat": a * cfg.alpha_U, "balance": a * cfg.alpha_B},
        loss=total, y_hat=y_hat)


# -- optimizer ------------------------------------------------------------------------

class Adam:
    """Bias-corrected adaptive moment updates; moments persist across calls."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, store: ParamStore, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, value in store.items():
            g = store.grad(name)
            m = self.m.setdefault(name, np.zeros_like(value))
            v = self.v.setdefault(name, np.zeros_like(value))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_update(store: ParamStore, state: Adam, lr: float) -> None:
    state.update(store, lr)


# -- training loops ---------------------------------------------------------------------

class MetricsLog:
    """CSV metrics stream; ``None`` fields are written as empty cells."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        self._buf = io.StringIO()
        self._writer = csv.writer(self._buf, lineterminator="\n")
        self._writer.writerow(METRICS_HEADER)
        self._fh = open(self.path, "w", newline="") if self.path else None
        self._flush()

    def _flush(self):
        if self._fh:
            self._fh.write(self._buf.getvalue())
            self._fh.flush()
        self._buf.seek(0)
        self._buf.truncate()

    def write(self, **row) -> None:
        self.rows.append(row)
        self._writer.writerow(["" if row.get(k) is None else repr(row[k]) if isinstance(row[k], float)
                               else row[k] for k in METRICS_HEADER])
        self._flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def error_rate(model: Model, x, y, batch: int = 1000) -> float:
    x = _as_batch(x)
    y = np.asarray(y)
    if y.size == 0:
        return float("nan")
    pred = np.concatenate([model.predict(x[i:i + batch]) for i in range(0, len(x), batch)])
    return float(np.mean(pred != y))


def mean_elbo(model: Model, x, y=None, n_samples: int = 1, seed: int = 0,
              batch: int = 500) -> float:
    """Average bound over ``x``; unlabeled rows of a conditional model use the
    point-estimate bound."""
    x = _as_batch(x)
    rng = np.random.default_rng(seed)
    total = 0.0
    for i in range(0, len(x), batch):
        xb = x[i:i + batch]
        noise = NoiseDraw.draw(n_samples, (len(xb), model.enc.latent_dim), rng=rng)
        if model.conditional:
            yb = model.predict(xb) if y is None else np.asarray(y)[i:i + batch]
            total += float(np.sum(elbo(model.enc, model.dec, xb, yb, noise).value))
        else:
            total += float(np.sum(elbo(model.enc, model.dec, xb, None, noise).value))
    return total / len(x)


def _check_grads(store: ParamStore, dump_dir, step: int) -> None:
    bad = [n for n in store.names() if not np.all(np.isfinite(store.grad(n)))]
    if bad:
        _abort(store, dump_dir, step, f"non-finite gradient in {bad[:5]}")


def _abort(store: ParamStore, dump_dir, step: int, message: str):
    path = None
    if dump_dir is not None:
        d = Path(dump_dir)
        d.mkdir(parents=True, exist_ok=True)
        path = str(d / f"abort_step{step}.ckpt")
        save_checkpoint(path, {**{n: v for n, v in store.items()},
                               **{f"grad::{n}": np.nan_to_num(store.grad(n), nan=0.0, posinf=0.0,
                                                              neginf=0.0)
                                  for n in store.names()}})
        (d / f"abort_step{step}.json").write_text(json.dumps({"step": step, "reason": message}))
    raise NumericalAbort(f"step {step}: {message}", path)


def _group_norms(store: ParamStore) -> dict[str, float]:
    out: dict[str, float] = {}
    for n in store.names():
        g = n.split(".")[0]
        out[g] = out.get(g, 0.0) + float(np.sum(store.grad(n) ** 2))
    return {k: math.sqrt(v) for k, v in out.items()}


def new_model(cfg: TrainConfig, in_dim: int, n_classes: int, conditional: bool) -> Model:
    return build_model(in_dim, n_classes, cfg.latent_dim, MlpSpec(cfg.hidden, cfg.nonlinearity),
                       seed=cfg.seed + SEED_INIT, conditional=conditional,
                       likelihood=cfg.likelihood, feature_source=cfg.feature_source,
                       sigma_sq=cfg.sigma_sq,
                       classifier_spec=(MlpSpec(cfg.classifier_hidden, cfg.nonlinearity)
                                        if cfg.classifier_hidden else None),
                       dtype=np.dtype(cfg.dtype))


def fit_supervised(x, y, cfg: TrainConfig, n_classes: int | None = None, valid=None,
                   metrics: MetricsLog | None = None, model: Model | None = None,
                   dump_dir=None, on_step: Callable | None = None) -> Model:
    """Doubly stochastic subgradient training: random minibatch, fresh noise,
    subgradient of the minibatch objective, Adam update."""
    x = _as_batch(x)
    y = np.asarray(y, dtype=np.int64)
    N = len(x)
    M = n_classes or int(y.max()) + 1
    model = model or new_model(cfg, x.shape[1], M, conditional=False)
    store = model.store
    opt = Adam()
    batch_rng = np.random.default_rng(cfg.seed + SEED_BATCH)
    noise_rng = np.random.default_rng(cfg.seed + SEED_NOISE)
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = batch_rng.permutation(N)
        starts = range(0, N, cfg.batch_labeled)
        for bi, start in enumerate(starts):
            idx = order[start:start + cfg.batch_labeled]
            noise = NoiseDraw.draw(cfg.L, (len(idx), cfg.latent_dim), rng=noise_rng)
            store.zero_grad()
            try:
                with Tape() as tape:
                    rep = supervised_objective(model, x[idx], y[idx], cfg, noise, n_total=N)
                    tape.backward(rep.loss)
            except NonFiniteError as err:
                _abort(store, dump_dir, step, str(err))
            _check_grads(store, dump_dir, step)
            rep.grad_norms = _group_norms(store)
            opt.update(store, lr)
            step += 1
            if on_step:
                on_step(step, rep)
            last = bi == len(starts) - 1
            if metrics and (step % cfg.log_every == 0 or last):
                errs = _epoch_errors(model, x, y, valid) if last else (None, None)
                metrics.write(step=step, epoch=epoch, objective=rep.objective,
                              elbo=rep.elbo_term, hinge=rep.hinge_term, hat=None, balance=None,
                              reg=rep.reg_term, train_err=errs[0], valid_err=errs[1], lr=lr)
    return model


def _epoch_errors(model: Model, x, y, valid):
    train_err = error_rate(model, x, y)
    valid_err = error_rate(model, *valid) if valid is not None else None
    return train_err, valid_err


def ssl_step(model: Model, opt: Adam, xl, yl, xu, cfg: TrainConfig, noise_l: NoiseDraw,
             noise_u: NoiseDraw | None, lr: float, n_labeled: int | None = None,
             n_unlabeled: int | None = None) -> StepReport:
    """One semi-supervised update, in order: predict the unlabeled batch, freeze
    those labels for the balance indicators, evaluate the objective, back-propagate
    and apply Adam."""
    xu = None if xu is None or len(xu) == 0 else _as_batch(xu)
    y_hat = model.predict(xu) if xu is not None else np.zeros(0, dtype=np.int64)
    y_hat = y_hat.copy()
    model.store.zero_grad()
    with Tape() as tape:
        rep = ssl_objective(model, xl, yl, xu, y_hat, cfg, noise_l, noise_u,
                            n_labeled=n_labeled, n_unlabeled=n_unlabeled)
        tape.backward(rep.loss)
    rep.grad_norms = _group_norms(model.store)
    _check_grads(model.store, None, opt.t)
    opt.update(model.store, lr)
    return rep


def fit_ssl(xl, yl, xu, cfg: TrainConfig, n_classes: int | None = None, valid=None,
            metrics: MetricsLog | None = None, model: Model | None = None,
            dump_dir=None, on_step: Callable | None = None) -> Model:
    """Semi-supervised training of the class-conditional model.

    An epoch is one pass over the unlabeled set; every step pairs an unlabeled
    minibatch with an independently drawn labeled minibatch.
    """
    xl = _as_batch(xl)
    yl = np.asarray(yl, dtype=np.int64)
    xu = np.zeros((0, xl.shape[1])) if xu is None else _as_batch(xu)
    NL, NU = len(xl), len(xu)
    M = n_classes or int(yl.max()) + 1
    model = model or new_model(cfg, xl.shape[1], M, conditional=True)
    opt = Adam()
    batch_rng = np.random.default_rng(cfg.seed + SEED_BATCH)
    noise_rng = np.random.default_rng(cfg.seed + SEED_NOISE)
    mL = min(cfg.batch_labeled, NL)
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = batch_rng.permutation(NU)
        starts = list(range(0, NU, cfg.batch_unlabeled)) or [0]
        for bi, start in enumerate(starts):
            iu = order[start:start + cfg.batch_unlabeled]
            il = batch_rng.choice(NL, size=mL, replace=False)
            noise_l = NoiseDraw.draw(cfg.L, (mL, cfg.latent_dim), rng=noise_rng)
            noise_u = NoiseDraw.draw(cfg.L, (len(iu), cfg.latent_dim), rng=noise_rng) if len(iu) else None
            try:
                rep = ssl_step(model, opt, xl[il], yl[il], xu[iu], cfg, noise_l, noise_u, lr,
                               n_labeled=NL, n_unlabeled=NU)
            except NonFiniteError as err:
                _abort(model.store, dump_dir, step, str(err))
            except NumericalAbort as err:
                _abort(model.store, dump_dir, step, str(err))
            step += 1
            if on_step:
                on_step(step, rep)
            last = bi == len(starts) - 1
            if metrics and (step % cfg.log_every == 0 or last):
                errs = _epoch_errors(model, xl, yl, valid) if last else (None, None)
                metrics.write(step=step, epoch=epoch, objective=rep.objective,
                              elbo=rep.elbo_term, hinge=rep.hinge_term, hat=rep.hat_term,
                              balance=rep.balance_term, reg=rep.reg_term, train_err=errs[0],
                              valid_err=errs[1], lr=lr)
    return model
