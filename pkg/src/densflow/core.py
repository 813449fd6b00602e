"""Instance label maps and the primitives built on them.

A label map is a plain 2-D numpy array of non-negative integer instance ids,
0 meaning background. Pixel order is row-major with the origin at the top-left
and coordinates given as (row, col). Ids are stored as uint32.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage, sparse
from scipy.sparse.csgraph import connected_components

from .errors import DataError, OffsetOutOfBounds, OverlappingRuns, ShapeMismatch

LABEL_DTYPE = np.uint32
PNG_MAX_ID = 65535


def as_label_map(labels) -> np.ndarray:
    """Validate `labels` and return it as a C-contiguous uint32 array."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise DataError(f"label map must be 2-D, got shape {arr.shape}")
    if arr.dtype.kind not in "iub":
        raise DataError(f"label map must hold integers, got {arr.dtype}")
    if arr.dtype.kind == "i" and arr.size and arr.min() < 0:
        raise DataError("label map contains negative ids")
    if arr.size and int(arr.max()) > np.iinfo(LABEL_DTYPE).max:
        raise DataError("label ids exceed 32 bits")
    return np.ascontiguousarray(arr, dtype=LABEL_DTYPE)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch: {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------- RLE


@dataclass(frozen=True)
class RleMask:
    """One instance as absolute (start_offset, length) runs in row-major order."""

    instance_id: int
    runs: tuple[tuple[int, int], ...]

    @property
    def area(self) -> int:
        return sum(length for _, length in self.runs)


def encode_rle(labels) -> list[RleMask]:
    """Encode every nonzero id of `labels` as an :class:`RleMask`, sorted by id."""
    flat = as_label_map(labels).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], change))
    lengths = np.diff(np.concatenate((starts, [flat.size])))
    values = flat[starts]
    keep = values > 0
    starts, lengths, values = starts[keep], lengths[keep], values[keep]
    order = np.argsort(values, kind="stable")
    starts, lengths, values = starts[order], lengths[order], values[order]
    ids, first = np.unique(values, return_index=True)
    bounds = np.append(first, values.size)
    masks = []
    for k, inst in enumerate(ids):
        lo, hi = bounds[k], bounds[k + 1]
        runs = tuple(zip(starts[lo:hi].tolist(), lengths[lo:hi].tolist()))
        masks.append(RleMask(int(inst), runs))
    return masks


def decode_rle(masks: list[RleMask], height: int, width: int) -> np.ndarray:
    """Rebuild the label map described by `masks`.

    Raises OffsetOutOfBounds for runs leaving the H*W pixel range and
    OverlappingRuns if any two runs (same or different instance) share a pixel.
    """
    n_pix = int(height) * int(width)
    out = np.zeros(n_pix, dtype=LABEL_DTYPE)
    if not masks:
        return out.reshape(height, width)
    starts = np.array([s for m in masks for s, _ in m.runs], dtype=np.int64)
    lengths = np.array([n for m in masks for _, n in m.runs], dtype=np.int64)
    ids = np.repeat(
        np.array([m.instance_id for m in masks], dtype=np.int64),
        [len(m.runs) for m in masks],
    )
    if starts.size == 0:
        return out.reshape(height, width)
    if ids.min() <= 0:
        raise DataError("RLE instance ids must be positive")
    if starts.min() < 0 or lengths.min() <= 0 or (starts + lengths).max() > n_pix:
        raise OffsetOutOfBounds(f"run outside pixel range [0, {n_pix})")
    order = np.argsort(starts, kind="stable")
    s, n = starts[order], lengths[order]
    if np.any(s[1:] < s[:-1] + n[:-1]):
        raise OverlappingRuns("RLE runs overlap")
    # Expand runs into pixel offsets without a Python loop.
    total = int(n.sum())
    run_of_pixel = np.repeat(np.arange(s.size), n)
    offsets = np.arange(total) - np.repeat(np.cumsum(n) - n, n) + s[run_of_pixel]
    out[offsets] = ids[order][run_of_pixel]
    return out.reshape(height, width)


def rle_to_json(labels) -> dict:
    labels = as_label_map(labels)
    return {
        "height": int(labels.shape[0]),
        "width": int(labels.shape[1]),
        "instances": [
            {"id": m.instance_id, "runs": [[s, n] for s, n in m.runs]}
            for m in encode_rle(labels)
        ],
    }


def rle_from_json(obj: dict) -> np.ndarray:
    try:
        height, width = int(obj["height"]), int(obj["width"])
        masks = [
            RleMask(int(inst["id"]), tuple((int(s), int(n)) for s, n in inst["runs"]))
            for inst in obj["instances"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed RLE document: {exc}") from exc
    return decode_rle(masks, height, width)


# ----------------------------------------------------------------- persistence


def save_labels(labels, path) -> Path:
    """Write a label map next to `path` (suffix is chosen here) and return the path.

    16-bit grayscale PNG when every id fits, RLE JSON otherwise.
    """
    labels = as_label_map(labels)
    path = Path(path)
    if labels.size == 0 or int(labels.max()) <= PNG_MAX_ID:
        path = path.with_suffix(".png")
        Image.fromarray(labels.astype(np.uint16)).save(path, format="PNG")
    else:
        path = path.with_suffix(".json")
        path.write_text(json.dumps(rle_to_json(labels)), encoding="utf-8")
    return path


def load_labels(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".json":
        return rle_from_json(json.loads(path.read_text(encoding="utf-8")))
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise DataError(f"{path}: label PNG must be single-channel")
    return as_label_map(arr)


def label_files(directory) -> dict[str, Path]:
    """Map stem -> label file for every .png/.json label map in `directory`.

    Run manifests (``manifest.json``, ``*.manifest.json``) are skipped.
    """
    found: dict[str, Path] = {}
    for p in sorted(Path(directory).iterdir()):
        if p.name == "manifest.json" or p.name.endswith(".manifest.json"):
            continue
        if p.is_file() and p.suffix.lower() in (".png", ".json"):
            if p.stem in found:
                raise DataError(f"duplicate label files for stem {p.stem!r}")
            found[p.stem] = p
    return found


# ---------------------------------------------------------------- components


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return np.ones((3, 3), dtype=bool)
    raise ValueError("connectivity must be 4 or 8")


def label_connected_components(binary, connectivity: int = 4) -> np.ndarray:
    """Label the connected foreground components of a boolean grid.

    Components are numbered 1..K in row-major order of their first pixel.
    """
    binary = np.asarray(binary, dtype=bool)
    labels, _ = ndimage.label(binary, structure=_structure(connectivity))
    # ndimage already numbers by first pixel in scan order; relabelling makes
    # that a guarantee of this function rather than of scipy.
    return relabel_sequential(labels)


def _shift_slices(h: int, w: int, dy: int, dx: int):
    """Slices pairing each pixel with its (dy, dx) neighbour, dy >= 0."""
    if dx >= 0:
        return (slice(0, h - dy), slice(0, w - dx)), (slice(dy, h), slice(dx, w))
    return (slice(0, h - dy), slice(-dx, w)), (slice(dy, h), slice(0, w + dx))


def split_disconnected(labels, connectivity: int = 4) -> np.ndarray:
    """Give every connected piece of every instance its own id (1..K, scan order)."""
    labels = as_label_map(labels)
    h, w = labels.shape
    idx = np.arange(h * w).reshape(h, w)
    offsets = [(0, 1), (1, 0)]
    if connectivity == 8:
        offsets += [(1, 1), (1, -1)]
    elif connectivity != 4:
        raise ValueError("connectivity must be 4 or 8")
    rows, cols = [], []
    for dy, dx in offsets:
        src, dst = _shift_slices(h, w, dy, dx)
        same = (labels[src] == labels[dst]) & (labels[src] > 0)
        rows.append(idx[src][same])
        cols.append(idx[dst][same])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    graph = sparse.coo_matrix((np.ones(r.size, dtype=np.int8), (r, c)), shape=(h * w, h * w))
    _, comp = connected_components(graph, directed=False)
    comp = comp.reshape(h, w).astype(np.int64) + 1
    comp[labels == 0] = 0
    return relabel_sequential(comp)


def relabel_sequential(labels) -> np.ndarray:
    """Map ids to 1..K in order of first occurrence in a row-major scan."""
    labels = as_label_map(labels)
    flat = labels.ravel()
    ids, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    rank = np.zeros(ids.size, dtype=LABEL_DTYPE)
    fg = ids > 0
    order = np.argsort(first[fg], kind="stable")
    new_ids = np.empty(order.size, dtype=LABEL_DTYPE)
    new_ids[order] = np.arange(1, order.size + 1, dtype=LABEL_DTYPE)
    rank[fg] = new_ids
    return rank[inverse].reshape(labels.shape)


def instance_areas(labels) -> dict[int, int]:
    flat = as_label_map(labels).ravel()
    ids, counts = np.unique(flat[flat > 0], return_counts=True)
    return dict(zip(ids.tolist(), counts.tolist()))


# ----------------------------------------------------------------------- IoU


@dataclass(frozen=True)
class IouMatrix:
    """Sparse IoU table between gt and pred instances (nonzero overlaps only).

    `intersections` and `unions` keep the exact pixel counts behind each ratio.
    """

    gt_ids: tuple[int, ...]
    pred_ids: tuple[int, ...]
    entries: dict[tuple[int, int], float] = field(default_factory=dict)
    intersections: dict[tuple[int, int], int] = field(default_factory=dict)
    unions: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def n_gt(self) -> int:
        return len(self.gt_ids)

    @property
    def n_pred(self) -> int:
        return len(self.pred_ids)

    def transpose(self) -> IouMatrix:
        swap = lambda d: {(p, g): v for (g, p), v in d.items()}  # noqa: E731
        return IouMatrix(
            self.pred_ids, self.gt_ids, swap(self.entries), swap(self.intersections), swap(self.unions)
        )


def pairwise_iou(gt, pred) -> IouMatrix:
    gt = as_label_map(gt)
    pred = as_label_map(pred)
    _check_same_shape(gt, pred)
    g = gt.ravel().astype(np.int64)
    p = pred.ravel().astype(np.int64)
    gt_ids, gt_area = np.unique(g[g > 0], return_counts=True)
    pr_ids, pr_area = np.unique(p[p > 0], return_counts=True)
    both = (g > 0) & (p > 0)
    gi = np.searchsorted(gt_ids, g[both])
    pi = np.searchsorted(pr_ids, p[both])
    pair, inter = np.unique(gi * max(pr_ids.size, 1) + pi, return_counts=True)
    gi, pi = np.divmod(pair, max(pr_ids.size, 1))
    union = gt_area[gi] + pr_area[pi] - inter
    keys = list(zip(gt_ids[gi].tolist(), pr_ids[pi].tolist()))
    return IouMatrix(
        tuple(gt_ids.tolist()),
        tuple(pr_ids.tolist()),
        dict(zip(keys, (inter / union).tolist())),
        dict(zip(keys, inter.tolist())),
        dict(zip(keys, union.tolist())),
    )
