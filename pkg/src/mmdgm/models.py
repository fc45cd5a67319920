"""Recognition and generative networks, feature extraction, sampling, checkpoints."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numgrid as ng
from .numgrid import ContractError, DimensionError, ParamStore, Tensor
from .stochlayers import LatentGaussian, bernoulli_log_lik, gaussian_log_lik

NONLINEARITIES = {"softplus": ng.softplus, "rectify": ng.rectify, "tanh": ng.tanh}
FEATURE_SOURCES = ("latent_mean", "last_hidden", "concat_hidden")
LIKELIHOODS = ("bernoulli", "gaussian")
LOG_VAR_BIAS_INIT = -1.0


@dataclass
class MlpSpec:
    layer_widths: list[int] = field(default_factory=lambda: [500, 500])
    nonlinearity: str = "softplus"

    def __post_init__(self):
        self.layer_widths = [int(w) for w in self.layer_widths]
        if not self.layer_widths or any(w <= 0 for w in self.layer_widths):
            raise ValueError(f"need at least one positive hidden width, got {self.layer_widths}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")


def one_hot(y, n_classes: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ValueError(f"labels out of range [0, {n_classes})")
    out = np.zeros((y.size, n_classes))
    out[np.arange(y.size), y] = 1.0
    return out


def _init_dense(store: ParamStore, name: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, bias: float = 0.0) -> None:
    store.add(f"{name}.W", rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
    store.add(f"{name}.b", np.full(fan_out, bias))


def _dense(store: ParamStore, name: str, h: Tensor) -> Tensor:
    return ng.affine(h, store.leaf(f"{name}.W"), store.leaf(f"{name}.b"))


class Mlp:
    """Stack of affine + nonlinearity layers; returns every hidden activation."""

    def __init__(self, store: ParamStore, prefix: str, in_dim: int, spec: MlpSpec,
                 rng: np.random.Generator):
        self.store, self.prefix, self.in_dim, self.spec = store, prefix, in_dim, spec
        fan_in = in_dim
        for i, width in enumerate(spec.layer_widths):
            _init_dense(store, f"{prefix}.h{i}", fan_in, width, rng)
            fan_in = width

    @property
    def out_dim(self) -> int:
        return self.spec.layer_widths[-1]

    def __call__(self, h: Tensor) -> list[Tensor]:
        act = NONLINEARITIES[self.spec.nonlinearity]
        hidden = []
        for i in range(len(self.spec.layer_widths)):
            h = act(_dense(self.store, f"{self.prefix}.h{i}", h))
            hidden.append(h)
        return hidden


def _batch_input(x, y, n_classes: int | None, conditional: bool, dtype) -> tuple[Tensor, bool]:
    x = x.value if isinstance(x, Tensor) else np.asarray(x, dtype=dtype)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if conditional and y is None:
        raise ContractError("this network conditions on the label; y is required")
    if not conditional and y is not None:
        raise ContractError("this network does not take a label")
    if conditional:
        y = np.atleast_1d(np.asarray(y))
        if y.size == 1 and x2.shape[0] > 1:
            y = np.full(x2.shape[0], int(y[0]))
        x2 = np.concatenate([x2, one_hot(y, n_classes).astype(x2.dtype)], axis=1)
    return Tensor(x2, dtype=dtype), single


def _batch_tensor(x, y, n_classes, conditional, dtype) -> tuple[Tensor, bool]:
    """Like :func:`_batch_input` but keeps an incoming Tensor differentiable."""
    if not isinstance(x, Tensor):
        return _batch_input(x, y, n_classes, conditional, dtype)
    if conditional and y is None:
        raise ContractError("this network conditions on the label; y is required")
    if not conditional and y is not None:
        raise ContractError("this network does not take a label")
    single = x.value.ndim == 1
    x2 = ng.reshape(x, (1, -1)) if single else x
    if conditional:
        y = np.atleast_1d(np.asarray(y))
        if y.size == 1 and x2.shape[0] > 1:
            y = np.full(x2.shape[0], int(y[0]))
        x2 = ng.concat([x2, Tensor(one_hot(y, n_classes), dtype=dtype)], axis=1)
    return x2, single


class RecognitionNet:
    """q(z | x) or q(z | x, y): an MLP trunk with mean and log-variance heads."""

    def __init__(self, store: ParamStore, in_dim: int, latent_dim: int, spec: MlpSpec,
                 rng: np.random.Generator, n_classes: int | None = None,
                 conditions_on_label: bool = False, prefix: str = "enc"):
        if conditions_on_label and not n_classes:
            raise ValueError("a label-conditioned recognition net needs n_classes")
        self.store, self.prefix = store, prefix
        self.in_dim, self.latent_dim, self.spec = in_dim, latent_dim, spec
        self.n_classes = n_classes
        self.conditions_on_label = conditions_on_label
        extra = n_classes if conditions_on_label else 0
        self.trunk = Mlp(store, f"{prefix}.trunk", in_dim + extra, spec, rng)
        _init_dense(store, f"{prefix}.mu", self.trunk.out_dim, latent_dim, rng)
        _init_dense(store, f"{prefix}.log_var", self.trunk.out_dim, latent_dim, rng,
                    bias=LOG_VAR_BIAS_INIT)

    def forward(self, x, y=None) -> tuple[LatentGaussian, list[Tensor]]:
        h0, single = _batch_tensor(x, y, self.n_classes, self.conditions_on_label,
                                   self.store.dtype)
        hidden = self.trunk(h0)
        mu = _dense(self.store, f"{self.prefix}.mu", hidden[-1])
        lv = _dense(self.store, f"{self.prefix}.log_var", hidden[-1])
        if single:
            mu, lv = ng.reshape(mu, (-1,)), ng.reshape(lv, (-1,))
            hidden = [ng.reshape(h, (-1,)) for h in hidden]
        return LatentGaussian(mu, lv), hidden

    def feature_dim(self, source: str) -> int:
        if source == "latent_mean":
            return self.latent_dim
        if source == "last_hidden":
            return self.spec.layer_widths[-1]
        if source == "concat_hidden":
            return sum(self.spec.layer_widths)
        raise ValueError(f"unknown feature source {source!r}")


class FeatureNet:
    """Deterministic x-only trunk used as the classifier pathway of the conditional model."""

    def __init__(self, store: ParamStore, in_dim: int, spec: MlpSpec, rng: np.random.Generator,
                 prefix: str = "clf.trunk"):
        self.store, self.prefix, self.in_dim, self.spec = store, prefix, in_dim, spec
        self.conditions_on_label = False
        self.trunk = Mlp(store, prefix, in_dim, spec, rng)

    def forward(self, x, y=None) -> tuple[None, list[Tensor]]:
        h0, single = _batch_tensor(x, y, None, False, self.store.dtype)
        hidden = self.trunk(h0)
        if single:
            hidden = [ng.reshape(h, (-1,)) for h in hidden]
        return None, hidden

    def feature_dim(self, source: str) -> int:
        if source == "last_hidden":
            return self.spec.layer_widths[-1]
        if source == "concat_hidden":
            return sum(self.spec.layer_widths)
        raise ValueError(f"feature source {source!r} is not available without a latent head")


class DecoderNet:
    """p(x | z) or p(x | z, y) with a Bernoulli or diagonal-Gaussian output."""

    def __init__(self, store: ParamStore, latent_dim: int, out_dim: int, spec: MlpSpec,
                 rng: np.random.Generator, likelihood: str = "bernoulli",
                 n_classes: int | None = None, conditions_on_label: bool = False,
                 prefix: str = "dec"):
        if likelihood not in LIKELIHOODS:
            raise ValueError(f"unknown likelihood {likelihood!r}")
        if conditions_on_label and not n_classes:
            raise ValueError("a label-conditioned decoder needs n_classes")
        self.store, self.prefix = store, prefix
        self.latent_dim, self.out_dim, self.spec = latent_dim, out_dim, spec
        self.likelihood = likelihood
        self.n_classes = n_classes
        self.conditions_on_label = conditions_on_label
        extra = n_classes if conditions_on_label else 0
        self.trunk = Mlp(store, f"{prefix}.trunk", latent_dim + extra, spec, rng)
        _init_dense(store, f"{prefix}.out", self.trunk.out_dim, out_dim, rng)
        if likelihood == "gaussian":
            _init_dense(store, f"{prefix}.out_log_var", self.trunk.out_dim, out_dim, rng)

    def forward(self, z, y=None) -> dict[str, Tensor]:
        h0, single = _batch_tensor(z, y, self.n_classes, self.conditions_on_label,
                                   self.store.dtype)
        h = self.trunk(h0)[-1]
        logits = _dense(self.store, f"{self.prefix}.out", h)
        if self.likelihood == "bernoulli":
            out = {"p": ng.sigmoid(logits)}
        else:
            out = {"mean": logits,
                   "log_var": _dense(self.store, f"{self.prefix}.out_log_var", h)}
        if single:
            out = {k: ng.reshape(v, (-1,)) for k, v in out.items()}
        return out

    def log_lik(self, x, params: dict[str, Tensor]) -> Tensor:
        if self.likelihood == "bernoulli":
            return bernoulli_log_lik(x, params["p"])
        return gaussian_log_lik(x, params["mean"], params["log_var"])

    @staticmethod
    def expectation(params: dict[str, Tensor]) -> np.ndarray:
        return (params["p"] if "p" in params else params["mean"]).value.copy()


def recognize(net: RecognitionNet, x, y=None) -> LatentGaussian:
    return net.forward(x, y)[0]


def decode(net: DecoderNet, z, y=None) -> dict[str, Tensor]:
    return net.forward(z, y)


def features(net, x, y=None, source: str = "concat_hidden") -> Tensor:
    """Classifier input for ``x``: latent mean, last trunk layer, or all trunk layers."""
    q, hidden = net.forward(x, y)
    if source == "latent_mean":
        if q is None:
            raise ValueError("latent_mean features need a recognition net")
        return q.mu
    if source == "last_hidden":
        return hidden[-1]
    if source == "concat_hidden":
        return hidden[0] if len(hidden) == 1 else ng.concat(hidden, axis=hidden[0].value.ndim - 1)
    raise ValueError(f"unknown feature source {source!r}")


def generate(decoder: DecoderNet, n: int, y=None, seed: int | None = None,
             z: np.ndarray | None = None) -> np.ndarray:
    """Ancestral samples: z ~ N(0, I), returned as per-pixel expectations (n, D)."""
    if z is None:
        z = np.random.default_rng(seed).standard_normal((n, decoder.latent_dim))
    if decoder.conditions_on_label:
        if y is None:
            raise ContractError("class-conditional decoder needs y")
        y = np.broadcast_to(np.asarray(y, dtype=np.int64), (z.shape[0],))
    elif y is not None:
        raise ContractError("decoder is not class-conditional")
    return DecoderNet.expectation(decoder.forward(z, y))


def class_grid(decoder: DecoderNet, n_rows: int, seed: int | None = None) -> np.ndarray:
    """Shared-z grid of shape (n_rows, M, D): row r reuses one z, column c is class c."""
    if not decoder.conditions_on_label:
        raise ContractError("a class grid needs a class-conditional decoder")
    M = decoder.n_classes
    z = np.random.default_rng(seed).standard_normal((n_rows, decoder.latent_dim))
    cols = [generate(decoder, n_rows, y=c, z=z) for c in range(M)]
    return np.stack(cols, axis=1)


@dataclass
class Model:
    """Everything a trained (conditional) max-margin generative model needs.

    ``clf_net`` supplies the classifier's features: the recognition net itself
    for the supervised model, a separate x-only trunk for the conditional one.
    The weight matrix lives in the store as ``clf.lambda``.
    """

    store: ParamStore
    enc: RecognitionNet
    dec: DecoderNet
    clf_net: "RecognitionNet | FeatureNet"
    n_classes: int
    feature_source: str
    sigma_sq: float = 1.0

    @property
    def conditional(self) -> bool:
        return self.enc.conditions_on_label

    def lam(self) -> Tensor:
        return self.store.leaf("clf.lambda")

    def weights(self):
        from .margin import ClassifierWeights
        return ClassifierWeights(self.store.value("clf.lambda").copy(), self.sigma_sq)

    def features(self, x) -> Tensor:
        """Deterministic classifier features (the latent mean stands in for E[z])."""
        return features(self.clf_net, x, None, self.feature_source)

    def scores(self, x) -> np.ndarray:
        return self.features(x).value @ self.store.value("clf.lambda").T

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.scores(x), axis=-1)


def build_model(in_dim: int, n_classes: int, latent_dim: int, spec: MlpSpec, seed: int,
                conditional: bool = False, likelihood: str = "bernoulli",
                feature_source: str = "concat_hidden", sigma_sq: float = 1.0,
                classifier_spec: MlpSpec | None = None, dtype=np.float64) -> Model:
    """Fresh parameters, initialized from ``seed`` in a fixed order."""
    if feature_source not in FEATURE_SOURCES:
        raise ValueError(f"unknown feature source {feature_source!r}")
    if conditional and feature_source == "latent_mean":
        raise ValueError("the conditional model's classifier has no latent head; "
                         "use last_hidden or concat_hidden")
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    enc = RecognitionNet(store, in_dim, latent_dim, spec, rng, n_classes=n_classes,
                         conditions_on_label=conditional)
    dec = DecoderNet(store, latent_dim, in_dim, spec, rng, likelihood=likelihood,
                     n_classes=n_classes, conditions_on_label=conditional)
    if conditional:
        clf_net = FeatureNet(store, in_dim, classifier_spec or spec, rng)
    else:
        clf_net = enc
    store.add("clf.lambda", np.zeros((n_classes, clf_net.feature_dim(feature_source))))
    return Model(store, enc, dec, clf_net, n_classes, feature_source, sigma_sq)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"MMDG"


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path, arrays) -> None:
    """Write named float64 arrays: magic, then per entry (u32 name length, name,
    u32 rank, u32 dims..., little-endian f64 payload)."""
    if isinstance(arrays, ParamStore):
        arrays = dict(arrays.items())
    chunks = [CHECKPOINT_MAGIC]
    for name, value in arrays.items():
        v = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", v.ndim))
        chunks.append(struct.pack(f"<{v.ndim}I", *v.shape))
        chunks.append(np.ascontiguousarray(v).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}")
    out: dict[str, np.ndarray] = {}
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointFormatError(f"{path}: truncated at byte {pos}")
        piece = blob[pos:pos + n]
        pos += n
        return piece

    while pos < len(blob):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    return out
