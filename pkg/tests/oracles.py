"""Independent brute-force reference implementations used as test oracles.

Everything here is written with plain loops and BFS, deliberately sharing no
code with the production paths it checks.
"""

import numpy as np


def bfs_components(mask, connectivity=26):
    """Flood-fill labeling; labels 1..n assigned in scan order."""
    mask = np.asarray(mask, dtype=bool)
    shape = mask.shape
    if connectivity == 26:
        neigh = [(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                 if (dz, dy, dx) != (0, 0, 0)]
    else:
        neigh = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    labels = np.zeros(shape, dtype=np.int32)
    next_label = 0
    for z in range(shape[0]):
        for y in range(shape[1]):
            for x in range(shape[2]):
                if not mask[z, y, x] or labels[z, y, x]:
                    continue
                next_label += 1
                queue = [(z, y, x)]
                labels[z, y, x] = next_label
                while queue:
                    cz, cy, cx = queue.pop()
                    for dz, dy, dx in neigh:
                        nz, ny, nx = cz + dz, cy + dy, cx + dx
                        if (0 <= nz < shape[0] and 0 <= ny < shape[1] and 0 <= nx < shape[2]
                                and mask[nz, ny, nx] and not labels[nz, ny, nx]):
                            labels[nz, ny, nx] = next_label
                            queue.append((nz, ny, nx))
    return labels, next_label


def integrity_bruteforce(p, radius=1):
    """Double loop over voxel pairs; per-voxel clipped-window normalization."""
    bg = p[0]
    shape = bg.shape
    total = 0.0
    for z in range(shape[0]):
        for y in range(shape[1]):
            for x in range(shape[2]):
                fg_max = max(p[c, z, y, x] for c in range(1, p.shape[0]))
                acc = 0.0
                count = 0
                for dz in range(-radius, radius + 1):
                    for dy in range(-radius, radius + 1):
                        for dx in range(-radius, radius + 1):
                            qz, qy, qx = z + dz, y + dy, x + dx
                            if 0 <= qz < shape[0] and 0 <= qy < shape[1] and 0 <= qx < shape[2]:
                                count += 1
                                diff = bg[qz, qy, qx] - fg_max
                                if diff > 0:
                                    acc += diff
                total += acc / count
    return total / bg.size


def connectivity_bruteforce(p, connectivity=26):
    """BFS components + explicit distance sums per Eq.-style definition."""
    pred = p.argmax(axis=0)
    mask = pred != 0
    labels, n = bfs_components(mask, connectivity)
    if n <= 1:
        return 0.0
    p_max = p.max(axis=0)
    confidences = []
    members = []
    for lab in range(1, n + 1):
        coords = [tuple(c) for c in np.argwhere(labels == lab)]
        members.append(coords)
        confidences.append(np.mean([p_max[c] for c in coords]))
    star = int(np.argmax(confidences))
    centroid = np.mean(np.array(members[star], dtype=float), axis=0)
    total = 0.0
    count = 0
    for j, coords in enumerate(members):
        if j == star:
            continue
        for c in coords:
            dist = np.sqrt(sum((ci - gi) ** 2 for ci, gi in zip(c, centroid)))
            total += p_max[c] * dist
            count += 1
    return total / count


def surface_bruteforce(mask):
    mask = np.asarray(mask, dtype=bool)
    shape = mask.shape
    surf = np.zeros(shape, dtype=bool)
    for z in range(shape[0]):
        for y in range(shape[1]):
            for x in range(shape[2]):
                if not mask[z, y, x]:
                    continue
                for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    nz, ny, nx = z + dz, y + dy, x + dx
                    if not (0 <= nz < shape[0] and 0 <= ny < shape[1] and 0 <= nx < shape[2]) \
                            or not mask[nz, ny, nx]:
                        surf[z, y, x] = True
                        break
    return surf


def percentile_linear(values, q):
    s = np.sort(np.asarray(values, dtype=float))
    if s.size == 1:
        return float(s[0])
    rank = q / 100.0 * (s.size - 1)
    lo = int(np.floor(rank))
    hi = min(lo + 1, s.size - 1)
    frac = rank - lo
    return float(s[lo] + frac * (s[hi] - s[lo]))


def hd95_bruteforce(pred, ref, spacing=(1.0, 1.0, 1.0)):
    """All-pairs surface distances pooled both ways, hand percentile."""
    ps = np.argwhere(surface_bruteforce(pred)).astype(float) * np.asarray(spacing)
    rs = np.argwhere(surface_bruteforce(ref)).astype(float) * np.asarray(spacing)
    pooled = []
    for a in ps:
        pooled.append(np.sqrt(((rs - a) ** 2).sum(axis=1)).min())
    for b in rs:
        pooled.append(np.sqrt(((ps - b) ** 2).sum(axis=1)).min())
    return percentile_linear(pooled, 95)
