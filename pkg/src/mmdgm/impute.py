"""Missing-pixel masks, iterative imputation through the recognition/decoder pair,
and metrics for completion and classification under missingness."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .models import DecoderNet, Model, RecognitionNet
from .numgrid import ContractError, DimensionError
from .stochlayers import NoiseDraw, reparameterize

INITS = ("uniform01", "gaussian")


@dataclass(frozen=True)
class MissingMask:
    mask: np.ndarray  # True = missing
    kind: str

    def __post_init__(self):
        m = np.array(self.mask, dtype=bool)
        m.flags.writeable = False
        object.__setattr__(self, "mask", m)

    @property
    def n_missing(self) -> int:
        return int(self.mask.sum())


def rand_drop_mask(D: int, p: float, seed: int | None = None) -> MissingMask:
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    return MissingMask(rng.random(D) < p, f"rand_drop({p})")


def rect_mask(side: int, r: int) -> MissingMask:
    """Centered ``r x r`` square missing from a ``side x side`` image."""
    if r < 0 or r > side:
        raise ValueError(f"rect side {r} does not fit in a {side}x{side} image")
    m = np.zeros((side, side), dtype=bool)
    lo = (side - r) // 2
    m[lo:lo + r, lo:lo + r] = True
    return MissingMask(m.reshape(-1), f"rect({r})")


def parse_mask_spec(spec: str, side: int | None, D: int, seed: int | None = None) -> MissingMask:
    """``rect:12`` or ``rand:0.6``."""
    kind, _, arg = spec.partition(":")
    if kind == "rect":
        if side is None:
            raise ValueError("rect masks need square images")
        return rect_mask(side, int(arg))
    if kind in ("rand", "rand_drop"):
        return rand_drop_mask(D, float(arg), seed)
    raise ValueError(f"unknown mask spec {spec!r}")


def _initial_fill(x: np.ndarray, miss: np.ndarray, init: str, rng: np.random.Generator) -> np.ndarray:
    if init not in INITS:
        raise ValueError(f"init must be one of {INITS}")
    out = x.copy()
    n = int(miss.sum())
    out[miss] = rng.random(n) if init == "uniform01" else rng.standard_normal(n)
    return out


def impute_iterate(enc: RecognitionNet, dec: DecoderNet, x_observed, mask, iters: int,
                   init: str = "uniform01", seed: int | None = None, n_samples: int = 1,
                   y=None, label_fn: Callable | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
    """Fill the masked pixels by repeatedly encoding, sampling z and decoding.

    Works on one image (D,) or a batch (B, D); ``mask`` is (D,) or (B, D).
    Label-conditioned nets need either fixed labels ``y`` or ``label_fn``,
    which is called on the current completion every round.
    Returns the completion and the trajectory (``iters + 1`` entries, the
    initial fill first). Observed pixels are copied, never recomputed.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    x = np.asarray(x_observed, dtype=np.float64)
    single = x.ndim == 1
    xb = x.reshape(1, -1) if single else x
    miss = np.asarray(mask.mask if isinstance(mask, MissingMask) else mask, dtype=bool)
    miss = np.broadcast_to(miss, xb.shape)
    if miss.shape != xb.shape:
        raise DimensionError(f"mask {miss.shape} vs images {xb.shape}")
    conditional = enc.conditions_on_label
    if conditional and y is None and label_fn is None:
        raise ContractError("a label-conditioned model needs y or label_fn for imputation")
    rng = np.random.default_rng(seed)
    cur = _initial_fill(xb, miss, init, rng)
    traj = [cur.copy()]
    for _ in range(iters):
        labels = None
        if conditional:
            labels = label_fn(cur) if label_fn is not None else y
        q, _ = enc.forward(cur, labels)
        noise = NoiseDraw.draw(n_samples, (cur.shape[0], enc.latent_dim), rng=rng)
        z = reparameterize(q, noise)
        tiled = None if labels is None else np.tile(np.broadcast_to(labels, (cur.shape[0],)),
                                                   n_samples)
        pix = DecoderNet.expectation(dec.forward(z, tiled))
        pix = pix.reshape(n_samples, cur.shape[0], -1).mean(axis=0)
        cur = np.where(miss, pix, xb)
        traj.append(cur.copy())
    if single:
        return cur[0], [t[0] for t in traj]
    return cur, traj


def impute_model(model: Model, x_observed, mask, iters: int, init: str = "uniform01",
                 seed: int | None = None, n_samples: int = 1):
    """:func:`impute_iterate` for a model bundle; the conditional model uses its
    classifier's current prediction as the label each round."""
    label_fn = model.predict if model.conditional else None
    return impute_iterate(model.enc, model.dec, x_observed, mask, iters, init, seed,
                          n_samples, label_fn=label_fn)


def mse_missing(x_true, x_completed, mask, all_pixels: bool = False) -> float:
    """Mean squared error over the masked positions (or every pixel)."""
    a = np.asarray(x_true, dtype=np.float64)
    b = np.asarray(x_completed, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"{a.shape} vs {b.shape}")
    miss = np.broadcast_to(np.asarray(mask.mask if isinstance(mask, MissingMask) else mask,
                                      dtype=bool), a.shape)
    if all_pixels:
        return float(np.mean((a - b) ** 2))
    if not miss.any():
        raise ContractError("mse over an empty mask is undefined")
    return float(np.mean((a[miss] - b[miss]) ** 2))


def classify_after_impute(model: Model, x_observed, mask, iters: int, seed: int | None = None,
                          init: str = "uniform01") -> np.ndarray:
    """Complete the images first, then predict from the completions."""
    miss = np.asarray(mask.mask if isinstance(mask, MissingMask) else mask, dtype=bool)
    if not miss.any():
        return model.predict(np.asarray(x_observed, dtype=np.float64))
    completed, _ = impute_model(model, x_observed, mask, iters, init, seed)
    return model.predict(completed)


# -- PGM output ------------------------------------------------------------------------

def to_pixels(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image2d) -> None:
    px = image2d if np.asarray(image2d).dtype == np.uint8 else to_pixels(image2d)
    h, w = px.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def tile_grid(images, side: int, pad: int = 1) -> np.ndarray:
    """(n, m, D) images -> one (n*(side+pad)-pad, m*(side+pad)-pad) canvas."""
    images = np.asarray(images, dtype=np.float64)
    n, m, D = images.shape
    if side * side != D:
        raise DimensionError(f"D={D} is not {side}x{side}")
    step = side + pad
    canvas = np.zeros((n * step - pad, m * step - pad))
    for r in range(n):
        for c in range(m):
            canvas[r * step:r * step + side, c * step:c * step + side] = images[r, c].reshape(side, side)
    return canvas


def write_pgm_grid(path, images, side: int, pad: int = 1) -> None:
    write_pgm(path, tile_grid(images, side, pad))


def write_trajectory(path, trajectory, side: int) -> None:
    """One row per image, one column per iteration."""
    traj = np.asarray(trajectory)
    if traj.ndim == 2:
        traj = traj[:, None, :]
    write_pgm_grid(path, np.transpose(traj, (1, 0, 2)), side)
