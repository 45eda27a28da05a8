"""Learnable composite augmentation for target-domain adaptation.

Eight base intensity operators combine pairwise into eleven weighted
strategies. Each step samples k=5 strategies without replacement, generates
one view per strategy, and weights the per-view losses with softmax
coefficients over the strategies' learnable weights. The transforms
themselves are treated as non-differentiable (posterize/equalize quantize),
so the weight gradient flows only through the softmax coefficients.

Operators interpret intensities after per-channel min-max rescaling to
[0,1]; the rescaling is inverted afterward so downstream normalization
statistics stay comparable. Channels with (near-)constant intensity pass
through unchanged. Magnitudes m are in [0,10] and map to operator
parameters monotonically, with the identity at m=0 where meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .volume import Volume

OP_NAMES = ("posterize", "solarize", "contrast", "sharpness",
            "brightness", "equalize", "invert", "gaussian_noise")

_RESCALE_FLOOR = 1e-12


@dataclass
class BasicStrategy:
    op: str
    m: float = 5.0
    rho: float = 0.5

    def __post_init__(self):
        if self.op not in OP_NAMES:
            raise ValueError(f"unknown augmentation op {self.op!r}")
        self.m = float(np.clip(self.m, 0.0, 10.0))
        self.rho = float(np.clip(self.rho, 0.0, 1.0))


@dataclass
class ComboStrategy:
    w: float
    s1: BasicStrategy
    s2: BasicStrategy


@dataclass
class AugmentationPolicy:
    combos: list
    k: int = 5
    contrast_symmetric: bool = False  # 1/f with prob 0.5; off by default

    def __post_init__(self):
        if len(self.combos) != 11:
            raise ValueError(f"policy must hold exactly 11 combos, got {len(self.combos)}")
        if not 1 <= self.k <= 11:
            raise ValueError(f"k must be in [1, 11], got {self.k}")

    @property
    def weights(self):
        return np.array([c.w for c in self.combos])

    def set_weights(self, w):
        w = np.asarray(w, dtype=np.float64)
        for combo, wi in zip(self.combos, w):
            combo.w = float(wi)


@dataclass
class ViewBatch:
    views: list          # k augmented volumes
    alphas: np.ndarray   # softmax coefficients over the sampled strategies
    indices: np.ndarray  # the sampled strategy indices (0-based)


# ---------------------------------------------------------------------------
# base operators on [0,1]-rescaled channel data


def _posterize(u, m, rng):
    bits = int(np.floor(8.0 - 0.6 * m + 0.5))
    if bits >= 8:
        return u
    bits = max(1, bits)
    q = np.floor(u * 255.0).astype(np.int64)
    mask = ~((1 << (8 - bits)) - 1)
    return (q & mask) / 255.0


def _solarize(u, m, rng):
    threshold = 1.0 - m / 10.0
    return np.where(u > threshold, 1.0 - u, u)


def _contrast(u, m, rng, symmetric=False):
    factor = 1.0 + 0.09 * m
    if symmetric and rng.random() < 0.5:
        factor = 1.0 / factor
    mean = u.mean()
    return np.clip(mean + factor * (u - mean), 0.0, 1.0)


def _box_blur3(u):
    acc = np.zeros_like(u)
    counts = np.zeros_like(u)
    shape = u.shape
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                lo = [max(0, -d) for d in (dz, dy, dx)]
                hi = [s - max(0, d) for s, d in zip(shape, (dz, dy, dx))]
                ctr = tuple(slice(l, h) for l, h in zip(lo, hi))
                sft = tuple(slice(l + d, h + d) for l, h, d in zip(lo, hi, (dz, dy, dx)))
                acc[ctr] += u[sft]
                counts[ctr] += 1.0
    return acc / counts


def _sharpness(u, m, rng):
    amount = 0.1 * m
    return np.clip(u + amount * (u - _box_blur3(u)), 0.0, 1.0)


def _brightness(u, m, rng):
    return np.clip(u + 0.05 * m, 0.0, 1.0)


def _equalize(u, m, rng):
    bins = np.minimum((u * 256.0).astype(np.int64), 255)
    hist = np.bincount(bins.ravel(), minlength=256)
    cdf = np.cumsum(hist) / u.size
    return cdf[bins]


def _invert(u, m, rng):
    return 1.0 - u


def _gaussian_noise(u, m, rng):
    sigma = 0.02 * m
    if sigma == 0.0:
        return u
    return u + sigma * rng.standard_normal(u.shape)


_OPS = {
    "posterize": _posterize,
    "solarize": _solarize,
    "contrast": _contrast,
    "sharpness": _sharpness,
    "brightness": _brightness,
    "equalize": _equalize,
    "invert": _invert,
    "gaussian_noise": _gaussian_noise,
}


# ---------------------------------------------------------------------------
# strategy application


def apply_basic(s: BasicStrategy, x: Volume, rng, contrast_symmetric=False):
    """Apply op with probability rho, per channel on rescaled intensities."""
    if rng.random() >= s.rho:
        return x
    out = x.data.copy()
    fn = _OPS[s.op]
    for c in range(x.channels):
        chan = out[c]
        lo, hi = chan.min(), chan.max()
        if hi - lo < _RESCALE_FLOOR:
            continue  # constant channel: min-max rescale is degenerate
        u = (chan - lo) / (hi - lo)
        if s.op == "contrast":
            v = fn(u, s.m, rng, symmetric=contrast_symmetric)
        else:
            v = fn(u, s.m, rng)
        if v is u or np.array_equal(v, u):
            continue  # no-op (e.g. m=0): skip the lossy rescale round trip
        out[c] = v * (hi - lo) + lo
    return Volume(out, x.spacing)


def apply_combo(c: ComboStrategy, x: Volume, rng, contrast_symmetric=False):
    """The two basic strategies in sequence, each with its own coin."""
    y = apply_basic(c.s1, x, rng, contrast_symmetric)
    return apply_basic(c.s2, y, rng, contrast_symmetric)


def sample_and_weight(policy: AugmentationPolicy, rng):
    """Draw k distinct strategy indices and their softmax coefficients."""
    indices = np.sort(rng.choice(11, size=policy.k, replace=False))
    w = policy.weights[indices]
    e = np.exp(w - w.max())
    return indices, e / e.sum()


def generate_views(policy: AugmentationPolicy, x: Volume, rng):
    """k augmented views of one target sample, with their loss weights."""
    indices, alphas = sample_and_weight(policy, rng)
    views = [apply_combo(policy.combos[i], x, rng, policy.contrast_symmetric)
             for i in indices]
    return ViewBatch(views=views, alphas=alphas, indices=indices)


def policy_weight_gradient(alphas, per_view_losses):
    """d(sum_i alpha_i * l_i)/dw_i for the sampled strategies.

    The losses are detached scalars; the softmax-weighted sum gives
    g_i = alpha_i * (l_i - sum_j alpha_j l_j). Unsampled strategies get no
    entry (their gradient is zero).
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    ell = np.asarray(per_view_losses, dtype=np.float64)
    weighted = float((alphas * ell).sum())
    return alphas * (ell - weighted)


def scatter_weight_gradient(indices, grad, size=11):
    full = np.zeros(size)
    full[np.asarray(indices)] = grad
    return full


# ---------------------------------------------------------------------------
# policy (de)serialization


def policy_to_config(policy: AugmentationPolicy):
    return {
        "combos": [{"w": c.w,
                    "s1": {"op": c.s1.op, "m": c.s1.m, "rho": c.s1.rho},
                    "s2": {"op": c.s2.op, "m": c.s2.m, "rho": c.s2.rho}}
                   for c in policy.combos],
        "k": policy.k,
        "contrast_symmetric": policy.contrast_symmetric,
    }


def policy_from_config(cfg):
    combos = [ComboStrategy(w=float(c["w"]),
                            s1=BasicStrategy(**c["s1"]),
                            s2=BasicStrategy(**c["s2"]))
              for c in cfg["combos"]]
    return AugmentationPolicy(combos=combos, k=int(cfg.get("k", 5)),
                              contrast_symmetric=bool(cfg.get("contrast_symmetric", False)))


def save_policy(path, policy: AugmentationPolicy):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(policy_to_config(policy), f, indent=2, sort_keys=True)
        f.write("\n")


def load_policy(path):
    with open(path, encoding="utf-8") as f:
        return policy_from_config(json.load(f))


def default_policy():
    """The shipped 11-combo policy (packaged JSON, editable by users)."""
    text = resources.files("voltta").joinpath("data/default_policy.json").read_text("utf-8")
    return policy_from_config(json.loads(text))
