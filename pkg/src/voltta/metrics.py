"""Segmentation evaluation: Dice/IoU/sensitivity, HD95, 3D connected
components, and nested-region composition.

Empty-mask conventions: when prediction and reference are both empty the
overlap scores are 1 and HD95 is 0; when exactly one side is empty the
overlap scores are 0 and HD95 is the spacing-scaled grid diagonal (a bounded
worst-case sentinel). Surfaces are mask voxels with at least one 6-neighbor
outside the mask (the volume border counts as outside). Percentiles use
linear interpolation between order statistics.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class NestingError(ValueError):
    """A declared region nesting does not hold as mask inclusion."""


@dataclass
class RegionSpec:
    """Named evaluation regions, each the union of a set of class labels."""

    regions: dict
    nesting: list = field(default_factory=list)

    @classmethod
    def default(cls):
        # BraTS-style nested scheme mirrored by the phantom generator
        return cls(regions={"WT": {1, 2, 3}, "TC": {1, 3}, "ET": {3}},
                   nesting=[["ET", "TC", "WT"]])

    @classmethod
    def from_config(cls, cfg):
        regions = {name: set(int(l) for l in labels) for name, labels in cfg["regions"].items()}
        return cls(regions=regions, nesting=[list(c) for c in cfg.get("nesting", [])])


@dataclass
class MetricRow:
    case_id: str
    region: str
    dice: float
    hd95_mm: float
    iou: float
    sensitivity: float


# ---------------------------------------------------------------------------
# connected components


_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: np.ones((3, 3, 3), dtype=bool),
}


def connected_components_3d(mask, connectivity=26):
    """Label connected foreground regions deterministically in scan order.

    Returns ``(label_grid, regions)`` where labels run 1..n ordered by each
    region's first voxel in flat scan order, and ``regions[i]`` is the
    (n_i, 3) voxel-coordinate array of label i+1 (scan order within region).
    """
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    mask = np.asarray(mask, dtype=bool)
    lab, n = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    if n == 0:
        return lab.astype(np.int32), []
    flat = lab.ravel()
    nz = np.flatnonzero(flat)
    first = np.full(n + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat[nz], nz)
    order = np.argsort(first[1:], kind="stable")  # old label - 1, by first occurrence
    lut = np.zeros(n + 1, dtype=np.int32)
    lut[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    lab = lut[lab]

    coords = np.argwhere(lab > 0)  # scan order
    labs = lab[lab > 0]
    grouping = np.argsort(labs, kind="stable")
    coords = coords[grouping]
    counts = np.bincount(labs, minlength=n + 1)[1:]
    splits = np.cumsum(counts)[:-1]
    regions = np.split(coords, splits)
    return lab, regions


# ---------------------------------------------------------------------------
# overlap metrics


def overlap_metrics(pred_mask, ref_mask):
    """(dice, iou, sensitivity) with the defined-perfect empty convention."""
    pred = np.asarray(pred_mask, dtype=bool)
    ref = np.asarray(ref_mask, dtype=bool)
    if pred.shape != ref.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    tp = int(np.count_nonzero(pred & ref))
    fp = int(np.count_nonzero(pred & ~ref))
    fn = int(np.count_nonzero(~pred & ref))
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    dice = 2.0 * tp / (2.0 * tp + fp + fn)
    iou = tp / (tp + fp + fn)
    sensitivity = tp / (tp + fn) if tp + fn else 0.0
    return dice, iou, sensitivity


# ---------------------------------------------------------------------------
# HD95


def surface_voxels(mask):
    """Mask voxels with at least one 6-neighbor outside the mask."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1)
    inner_all = np.ones_like(mask)
    for ax in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        inner_all &= padded[tuple(lo)] & padded[tuple(hi)]
    return mask & ~inner_all


def grid_diagonal_mm(shape, spacing):
    return float(np.sqrt(sum((d * s) ** 2 for d, s in zip(shape, spacing))))


def hd95(pred_mask, ref_mask, spacing=(1.0, 1.0, 1.0)):
    """95th percentile of pooled symmetric surface distances, in mm."""
    pred = np.asarray(pred_mask, dtype=bool)
    ref = np.asarray(ref_mask, dtype=bool)
    if pred.shape != ref.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    pred_any, ref_any = pred.any(), ref.any()
    if not pred_any and not ref_any:
        return 0.0
    if pred_any != ref_any:
        return grid_diagonal_mm(pred.shape, spacing)
    ps = surface_voxels(pred)
    rs = surface_voxels(ref)
    # EDT over the complement gives each voxel's distance to the nearest
    # surface voxel (exact Euclidean, spacing-scaled)
    d_to_ref = ndimage.distance_transform_edt(~rs, sampling=spacing)
    d_to_pred = ndimage.distance_transform_edt(~ps, sampling=spacing)
    pooled = np.concatenate([d_to_ref[ps], d_to_pred[rs]])
    return float(np.percentile(pooled, 95, method="linear"))


# ---------------------------------------------------------------------------
# region composition + dataset evaluation


def compose_regions(labels, spec: RegionSpec):
    """Binary mask per named region; validates declared nesting chains."""
    grid = labels.labels
    valid = set(range(labels.class_count))
    masks = {}
    for name, label_set in spec.regions.items():
        bad = set(label_set) - valid
        if bad:
            raise ValueError(f"region {name!r} references invalid labels {sorted(bad)}")
        masks[name] = np.isin(grid, sorted(label_set))
    for chain in spec.nesting:
        for inner, outer in zip(chain, chain[1:]):
            if np.any(masks[inner] & ~masks[outer]):
                raise NestingError(f"region {inner!r} is not contained in {outer!r}")
    return masks


def evaluate_case(case_id, pred: "LabelMap", ref: "LabelMap", spec: RegionSpec):
    pred_masks = compose_regions(pred, spec)
    ref_masks = compose_regions(ref, spec)
    rows = []
    for name in spec.regions:
        dice, iou, sens = overlap_metrics(pred_masks[name], ref_masks[name])
        h = hd95(pred_masks[name], ref_masks[name], ref.spacing)
        rows.append(MetricRow(case_id, name, dice, h, iou, sens))
    return rows


def evaluate_dataset(predict, cases, spec: RegionSpec):
    """Per-case metric rows plus per-region means.

    ``predict(volume) -> LabelMap``; ``cases`` is an iterable of
    ``(case_id, Volume, LabelMap)``. Rows come back ordered by case id.
    """
    rows = []
    for case_id, vol, ref in sorted(cases, key=lambda c: c[0]):
        rows.extend(evaluate_case(case_id, predict(vol), ref, spec))
    return rows, aggregate(rows)


def aggregate(rows):
    by_region = {}
    for row in rows:
        by_region.setdefault(row.region, []).append(row)
    out = {}
    for region, group in by_region.items():
        out[region] = {
            "dice": float(np.mean([r.dice for r in group])),
            "hd95_mm": float(np.mean([r.hd95_mm for r in group])),
            "iou": float(np.mean([r.iou for r in group])),
            "sensitivity": float(np.mean([r.sensitivity for r in group])),
        }
    return out


def rows_to_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["case_id", "region", "dice", "hd95_mm", "iou", "sensitivity"])
    for r in rows:
        writer.writerow([r.case_id, r.region, f"{r.dice:.6f}", f"{r.hd95_mm:.6f}",
                         f"{r.iou:.6f}", f"{r.sensitivity:.6f}"])
    return buf.getvalue()
