"""Structural loss heads over per-voxel class probabilities.

Three heads constrain the adapted predictions from different angles:

* ``dice_consistency`` — soft Dice against the teacher's one-hot pseudo-label,
  with squared-sum denominator and a stability constant.
* ``integrity_penalty`` — local background-dominance penalty: inside a
  (2r+1)^3 window around each voxel p, background probability at neighbors q
  is compared against the best foreground probability at p, and only
  positive differences count. Normalized per voxel by the clipped window
  size and overall by the voxel count so the value stays in [0,1].
* ``connectivity_penalty`` — fragments disconnected from the most confident
  predicted region pay a distance-weighted penalty. Region extraction and
  the primary centroid are detached; gradients flow only through the
  per-voxel maximum probabilities of the secondary regions.

All three are differentiable w.r.t. the probability tensor away from the
measure-zero tie sets (ReLU kinks, argmax ties, region boundaries).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .metrics import connected_components_3d
from .tensor import ShapeError, Tensor


@dataclass
class LossWeights:
    lambda_csh: float = 1.0
    lambda_ih: float = 0.1
    lambda_cnh: float = 0.1
    eps: float = 1e-5
    ih_radius: int = 1
    connectivity: int = 26
    ih_literal_eq9: bool = False

    @classmethod
    def from_config(cls, cfg):
        return cls(**cfg)


@dataclass
class RegionSet:
    """Connected foreground regions of an argmax prediction."""

    regions: list          # list of (n_i, 3) coordinate arrays
    confidences: np.ndarray  # mean max-probability per region
    primary: int           # index of the highest-confidence region
    centroid: np.ndarray   # unweighted voxel centroid of the primary region


def one_hot(labels, class_count):
    """(D,H,W) integer grid -> (C,D,H,W) float64 one-hot tensor data."""
    eye = np.eye(class_count, dtype=np.float64)
    return np.moveaxis(eye[labels], -1, 0)


def dice_consistency(p, y_onehot, eps=1e-5):
    """Soft Dice loss with squared-sum denominator, all channels included."""
    if p.data.shape != y_onehot.data.shape:
        raise ShapeError(
            f"dice_consistency: prediction {p.data.shape} vs label {y_onehot.data.shape}")
    y = y_onehot.data
    inter = float((p.data * y).sum())
    den = float((p.data ** 2).sum() + (y ** 2).sum()) + eps
    value = 1.0 - 2.0 * inter / den

    def backward(g):
        if not p.requires_grad:
            return (None, None)
        grad_p = g * (4.0 * inter * p.data - 2.0 * y * den) / (den * den)
        return (grad_p, None)

    return tensor._result(value, (p, y_onehot), "dice_consistency", backward)


def _clipped_window_counts(shape, radius):
    counts = np.ones(shape)
    for ax, extent in enumerate(shape):
        pos = np.arange(extent)
        per_axis = np.minimum(pos + radius, extent - 1) - np.maximum(pos - radius, 0) + 1
        shape_ax = [1, 1, 1]
        shape_ax[ax] = extent
        counts = counts * per_axis.reshape(shape_ax)
    return counts


def _offset_slices(shape, offset):
    """Aligned (center, shifted) slices for voxel pairs (p, p+offset)."""
    center, shifted = [], []
    for extent, d in zip(shape, offset):
        lo = max(0, -d)
        hi = extent - max(0, d)
        center.append(slice(lo, hi))
        shifted.append(slice(lo + d, hi + d))
    return tuple(center), tuple(shifted)


def integrity_penalty(p, radius=1, literal_eq9=False):
    """Background-dominance penalty; see module docstring for the window rule.

    ``literal_eq9`` switches to the variant whose inner term compares
    background and foreground at the center voxel only (equivalent to the
    plain voxel mean of the positive differences).
    """
    if p.data.shape[0] < 2:
        raise ShapeError("integrity_penalty: need background + at least 1 foreground channel")
    bg = p.data[0]
    fg = p.data[1:]
    fg_arg = fg.argmax(axis=0)
    fg_max = np.take_along_axis(fg, fg_arg[None], axis=0)[0]
    shape = bg.shape
    nvox = bg.size

    if literal_eq9:
        diff = bg - fg_max
        value = float(np.maximum(diff, 0.0).mean())

        def backward(g):
            if not p.requires_grad:
                return (None,)
            ind = (diff > 0.0).astype(np.float64) * (g / nvox)
            grad = np.zeros_like(p.data)
            grad[0] = ind
            spatial_idx = tuple(np.indices(shape))
            grad[1:][(fg_arg,) + spatial_idx] = -ind  # unique targets per voxel
            return (grad,)

        return tensor._result(value, (p,), "integrity_penalty", backward)

    counts = _clipped_window_counts(shape, radius)
    offsets = [(dz, dy, dx)
               for dz in range(-radius, radius + 1)
               for dy in range(-radius, radius + 1)
               for dx in range(-radius, radius + 1)]
    total = 0.0
    for off in offsets:
        ctr, sft = _offset_slices(shape, off)
        diff = bg[sft] - fg_max[ctr]
        total += float((np.maximum(diff, 0.0) / counts[ctr]).sum())
    value = total / nvox

    def backward(g):
        if not p.requires_grad:
            return (None,)
        grad_bg = np.zeros(shape)
        grad_fgmax = np.zeros(shape)
        for off in offsets:
            ctr, sft = _offset_slices(shape, off)
            w = (bg[sft] - fg_max[ctr] > 0.0) / counts[ctr]
            grad_bg[sft] += w
            grad_fgmax[ctr] -= w
        scale = g / nvox
        grad = np.zeros_like(p.data)
        grad[0] = grad_bg * scale
        spatial_idx = tuple(np.indices(shape))
        grad[1:][(fg_arg,) + spatial_idx] = grad_fgmax * scale  # unique targets per voxel
        return (grad,)

    return tensor._result(value, (p,), "integrity_penalty", backward)


def extract_regions(p_data, connectivity=26):
    """RegionSet of the argmax foreground, or None when no foreground."""
    pred = p_data.argmax(axis=0)
    mask = pred != 0
    if not mask.any():
        return None
    _, regions = connected_components_3d(mask, connectivity)
    p_max = p_data.max(axis=0)
    confidences = np.array([p_max[tuple(r.T)].mean() for r in regions])
    primary = int(np.argmax(confidences))  # ties -> lowest region label
    centroid = regions[primary].mean(axis=0)
    return RegionSet(regions, confidences, primary, centroid)


def connectivity_penalty(p, connectivity=26):
    """Distance-weighted penalty on regions disconnected from the primary one."""
    rset = extract_regions(p.data, connectivity)
    if rset is None or len(rset.regions) <= 1:
        def backward(g):
            return (np.zeros_like(p.data),)
        return tensor._result(0.0, (p,), "connectivity_penalty", backward)

    pred = p.data.argmax(axis=0)
    secondary = [r for j, r in enumerate(rset.regions) if j != rset.primary]
    coords = np.concatenate(secondary, axis=0)
    n = coords.shape[0]
    dists = np.sqrt(((coords - rset.centroid) ** 2).sum(axis=1))
    idx = tuple(coords.T)
    p_max_vals = p.data[(pred[idx],) + idx]
    value = float((p_max_vals * dists).sum() / n)

    def backward(g):
        if not p.requires_grad:
            return (None,)
        grad = np.zeros_like(p.data)
        grad[(pred[idx],) + idx] = g * dists / n
        return (grad,)

    return tensor._result(value, (p,), "connectivity_penalty", backward)


def cross_entropy_logits(logits, y_onehot):
    """Mean per-voxel cross-entropy computed from logits (stable log-softmax)."""
    if logits.data.shape != y_onehot.data.shape:
        raise ShapeError(
            f"cross_entropy_logits: logits {logits.data.shape} vs label {y_onehot.data.shape}")
    z = logits.data
    y = y_onehot.data
    zmax = z.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=0, keepdims=True)) + zmax
    nvox = z[0].size
    value = float((y * (lse - z)).sum() / nvox)
    softmax = np.exp(z - lse)

    def backward(g):
        if not logits.requires_grad:
            return (None, None)
        return (g * (softmax - y) / nvox, None)

    return tensor._result(value, (logits, y_onehot), "cross_entropy_logits", backward)


def multi_head_loss(out, y_onehot, weights: LossWeights):
    """Weighted combination of the three head losses.

    Each head's logits are softmaxed independently; returns the total loss
    tensor plus the detached component values for reporting.
    """
    p_csh = tensor.softmax_channels(out.csh_logits)
    p_ih = tensor.softmax_channels(out.ih_logits)
    p_cnh = tensor.softmax_channels(out.cnh_logits)
    l_csh = dice_consistency(p_csh, y_onehot, eps=weights.eps)
    l_ih = integrity_penalty(p_ih, radius=weights.ih_radius, literal_eq9=weights.ih_literal_eq9)
    l_cnh = connectivity_penalty(p_cnh, connectivity=weights.connectivity)
    total = tensor.add(
        tensor.add(tensor.scalar_affine(l_csh, weights.lambda_csh, 0.0),
                   tensor.scalar_affine(l_ih, weights.lambda_ih, 0.0)),
        tensor.scalar_affine(l_cnh, weights.lambda_cnh, 0.0))
    components = {"csh": float(l_csh.data), "ih": float(l_ih.data), "cnh": float(l_cnh.data)}
    return total, components
