"""Slow, obviously-correct reference implementations used only by the tests."""

from __future__ import annotations

from collections import deque

import numpy as np


def flood_fill_components(binary, connectivity=4):
    """BFS labeling; components numbered in row-major order of their first pixel."""
    binary = np.asarray(binary, dtype=bool)
    h, w = binary.shape
    out = np.zeros((h, w), dtype=np.int64)
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx]
    k = 0
    for r in range(h):
        for c in range(w):
            if binary[r, c] and out[r, c] == 0:
                k += 1
                out[r, c] = k
                queue = deque([(r, c)])
                while queue:
                    y, x = queue.popleft()
                    for dy, dx in steps:
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and binary[ny, nx] and out[ny, nx] == 0:
                            out[ny, nx] = k
                            queue.append((ny, nx))
    return out


def fill_from_runs(masks, height, width):
    out = np.zeros(height * width, dtype=np.int64)
    for m in masks:
        for start, length in m.runs:
            for off in range(start, start + length):
                out[off] = m.instance_id
    return out.reshape(height, width)


def brute_iou(gt, pred):
    table = {}
    for g in np.unique(gt):
        if g == 0:
            continue
        a = gt == g
        for p in np.unique(pred):
            if p == 0:
                continue
            b = pred == p
            inter = int(np.sum(a & b))
            if inter:
                table[(int(g), int(p))] = inter / int(np.sum(a | b))
    return table


def exhaustive_match(table, gt_ids, pred_ids, threshold):
    """Best one-to-one matching by enumeration: max cardinality, then max IoU sum."""
    eligible = {k: v for k, v in table.items() if v >= threshold}
    gts = sorted(gt_ids)
    best = (0, 0.0, ())

    def rec(i, used, chosen, total):
        nonlocal best
        if i == len(gts):
            key = (len(chosen), total)
            if key > best[:2]:
                best = (len(chosen), total, tuple(chosen))
            return
        rec(i + 1, used, chosen, total)
        for p in pred_ids:
            v = eligible.get((gts[i], p))
            if v is not None and p not in used:
                rec(i + 1, used | {p}, chosen + [(gts[i], p, v)], total + v)

    rec(0, frozenset(), [], 0.0)
    return best


def reference_scores(gt, pred, threshold):
    """(ap, pq, sq, rq) straight from the definitions."""
    gt_ids = [int(v) for v in np.unique(gt) if v]
    pred_ids = [int(v) for v in np.unique(pred) if v]
    tp, total, _ = exhaustive_match(brute_iou(gt, pred), gt_ids, pred_ids, threshold)
    fp = len(pred_ids) - tp
    fn = len(gt_ids) - tp
    ap = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    sq = total / tp if tp else 1.0
    denom = tp + fp / 2 + fn / 2
    rq = tp / denom if denom else 1.0
    return ap, sq * rq, sq, rq


def greedy_match(table, threshold):
    pairs = sorted(((v, g, p) for (g, p), v in table.items() if v >= threshold), reverse=True)
    used_g, used_p, out = set(), set(), []
    for v, g, p in pairs:
        if g not in used_g and p not in used_p:
            used_g.add(g)
            used_p.add(p)
            out.append((g, p, v))
    return sorted(out)


def reference_targets(labels):
    """Per-instance targets computed one instance at a time with plain loops.

    Heat: each iteration adds 1 at the medianoid, then replaces every instance
    pixel by the 3x3 mean (outside pixels count as 0), ceil(2*hypot(bh, bw))
    times. Flow: central/one-sided differences of heat, normalised, with the
    straight direction to the center where the gradient vanishes.
    """
    labels = np.asarray(labels)
    h, w = labels.shape
    fy = np.zeros((h, w))
    fx = np.zeros((h, w))
    for k in np.unique(labels):
        if k == 0:
            continue
        mask = labels == k
        pix = np.argwhere(mask)
        cy, cx = brute_medianoid(pix)
        bh = pix[:, 0].max() - pix[:, 0].min() + 1
        bw = pix[:, 1].max() - pix[:, 1].min() + 1
        steps = int(np.ceil(2 * np.hypot(bh, bw)))
        heat = np.zeros((h + 2, w + 2))
        inside = np.pad(mask, 1)
        for _ in range(steps):
            heat[cy + 1, cx + 1] += 1.0
            acc = sum(np.roll(np.roll(heat, dy, 0), dx, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1))
            heat = np.where(inside, acc / 9.0, 0.0)
        for r, c in map(tuple, pix):
            if (r, c) == (cy, cx):
                continue
            g = []
            for dy, dx in ((1, 0), (0, 1)):
                lo = inside[r + 1 - dy, c + 1 - dx]
                hi = inside[r + 1 + dy, c + 1 + dx]
                t0 = heat[r + 1, c + 1]
                t_lo = heat[r + 1 - dy, c + 1 - dx]
                t_hi = heat[r + 1 + dy, c + 1 + dx]
                if lo and hi:
                    d = (t_hi - t_lo) / 2
                elif hi:
                    d = t_hi - t0
                elif lo:
                    d = t0 - t_lo
                else:
                    d = 0.0
                # rounding-level differences count as zero
                g.append(0.0 if abs(d) <= 1e-10 * max(abs(t0), abs(t_lo), abs(t_hi)) else d)
            n = np.hypot(*g)
            if n < 1e-280:
                g = [cy - r, cx - c]
                n = np.hypot(*g)
            fy[r, c], fx[r, c] = g[0] / n, g[1] / n
    return fy, fx, (labels > 0).astype(np.float64)


def brute_medianoid(pixels):
    pts = np.array(sorted(map(tuple, pixels)))
    med = np.median(pts, axis=0)
    best = min(range(len(pts)), key=lambda i: (abs(pts[i, 0] - med[0]) + abs(pts[i, 1] - med[1]), i))
    return tuple(int(v) for v in pts[best])


def random_partition(rng, h, w, n_max=8, kind="rects", holes=0.2):
    """Small random label maps for metric checks."""
    out = np.zeros((h, w), dtype=np.int64)
    n = int(rng.integers(0, n_max + 1))
    if kind == "voronoi" and n:
        seeds = np.column_stack([rng.integers(0, h, n), rng.integers(0, w, n)])
        yy, xx = np.mgrid[0:h, 0:w]
        d = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
        out = np.argmin(d, axis=-1) + 1
        out[rng.random((h, w)) < holes] = 0
        return out
    for k in range(1, n + 1):
        r0, c0 = rng.integers(0, h - 2), rng.integers(0, w - 2)
        r1, c1 = r0 + rng.integers(2, h // 2), c0 + rng.integers(2, w // 2)
        out[r0:r1, c0:c1] = k
    return out


def perturb_labels(rng, labels):
    """A plausible 'prediction': shifted, eroded/merged, relabelled copy."""
    pred = np.roll(labels, (int(rng.integers(-2, 3)), int(rng.integers(-2, 3))), axis=(0, 1))
    ids = np.unique(pred)
    ids = ids[ids > 0]
    if ids.size >= 2 and rng.random() < 0.3:
        pred[pred == ids[1]] = ids[0]
    if ids.size and rng.random() < 0.3:
        pred[pred == ids[-1]] = 0
    perm = rng.permutation(1000)[: int(pred.max()) + 1] + 1
    perm[0] = 0
    return perm[pred]
