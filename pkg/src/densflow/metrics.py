"""Set-matching AP and panoptic quality for instance label maps.

Per image, gt and predicted instances are matched one-to-one among pairs whose
IoU reaches the threshold T (maximum cardinality, then maximum total IoU).
From the match counts:

    AP = TP / (TP + FP + FN)
    SQ = mean IoU of the matches,  RQ = TP / (TP + FP/2 + FN/2),  PQ = SQ * RQ

Dataset scores are unweighted means over images, overall and split into
sparse (< 100 gt instances) and dense (>= 100) images.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment
from scipy.sparse.csgraph import connected_components

from .core import IouMatrix, as_label_map, pairwise_iou
from .errors import MissingPair, ShapeMismatch, ThresholdOutOfRange

DENSE_MIN_INSTANCES = 100
SPLITS = ("sparse", "dense")


@dataclass(frozen=True)
class MatchTable:
    threshold: float
    matches: tuple[tuple[int, int, float], ...]
    n_gt: int
    n_pred: int

    @property
    def tp(self) -> int:
        return len(self.matches)

    @property
    def fp(self) -> int:
        return self.n_pred - self.tp

    @property
    def fn(self) -> int:
        return self.n_gt - self.tp


def match_at_threshold(iou: IouMatrix, threshold: float) -> MatchTable:
    """Optimal one-to-one matching over pairs with IoU >= threshold."""
    if not 0 < threshold < 1:
        raise ThresholdOutOfRange(f"IoU threshold must lie in (0, 1), got {threshold}")
    edges = sorted((g, p, v) for (g, p), v in iou.entries.items() if v >= threshold)
    if not edges:
        return MatchTable(threshold, (), iou.n_gt, iou.n_pred)

    gts = sorted({g for g, _, _ in edges})
    preds = sorted({p for _, p, _ in edges})
    gi = {g: i for i, g in enumerate(gts)}
    pi = {p: i for i, p in enumerate(preds)}
    rows = np.array([gi[g] for g, _, _ in edges])
    cols = np.array([pi[p] for _, p, _ in edges])
    vals = np.array([v for _, _, v in edges])

    # Split the bipartite graph so each assignment problem stays small; above
    # T = 0.5 every component is a single pair.
    n_g = len(gts)
    graph = sparse.coo_matrix(
        (np.ones(rows.size), (rows, cols + n_g)), shape=(n_g + len(preds),) * 2
    )
    _, comp = connected_components(graph, directed=False)
    edge_comp = comp[rows]
    matches = []
    order = np.argsort(edge_comp, kind="stable")
    bounds = np.flatnonzero(np.r_[True, np.diff(edge_comp[order]) != 0, True])
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sel = order[lo:hi]
        if sel.size == 1:
            e = sel[0]
            matches.append((gts[rows[e]], preds[cols[e]], float(vals[e])))
            continue
        r_ids, r = np.unique(rows[sel], return_inverse=True)
        c_ids, c = np.unique(cols[sel], return_inverse=True)
        # the constant dominates any IoU sum, so cardinality is maximised first
        big = min(r_ids.size, c_ids.size) + 1.0
        weight = np.zeros((r_ids.size, c_ids.size))
        weight[r, c] = big + vals[sel]
        ri, ci = linear_sum_assignment(weight, maximize=True)
        for a, b in zip(ri, ci):
            if weight[a, b] > 0:
                matches.append((gts[r_ids[a]], preds[c_ids[b]], float(weight[a, b] - big)))
    # recover exact IoU values rather than (big + v) - big
    matches = [(g, p, iou.entries[(g, p)]) for g, p, _ in sorted(matches)]
    return MatchTable(threshold, tuple(matches), iou.n_gt, iou.n_pred)


def ap_at_threshold(table: MatchTable) -> float:
    denom = table.tp + table.fp + table.fn
    if denom == 0:
        return 1.0
    return table.tp / denom


def pq_at_threshold(table: MatchTable) -> tuple[float, float, float]:
    """Return (pq, sq, rq); an image with nothing in it scores (1, 1, 1)."""
    tp = table.tp
    sq = math.fsum(v for _, _, v in table.matches) / tp if tp else 1.0
    denom = tp + 0.5 * table.fp + 0.5 * table.fn
    rq = tp / denom if denom > 0 else 1.0
    return sq * rq, sq, rq


def split_sparse_dense(counts: Mapping[str, int]) -> dict[str, str]:
    return {k: ("dense" if n >= DENSE_MIN_INSTANCES else "sparse") for k, n in counts.items()}


# ------------------------------------------------------------------- report


@dataclass(frozen=True)
class ImageScore:
    image_id: str
    n_gt: int
    n_pred: int
    tp: int
    fp: int
    fn: int
    ap: float
    pq: float
    sq: float
    rq: float


@dataclass
class MetricsReport:
    threshold: float
    per_image: list[ImageScore]
    aggregate: dict = field(default_factory=dict)

    @property
    def mean_ap(self) -> float | None:
        return self.aggregate["mAP"]

    @property
    def mean_pq(self) -> float | None:
        return self.aggregate["mPQ"]

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "images": [
                {
                    "id": s.image_id, "n_gt": s.n_gt, "n_pred": s.n_pred,
                    "tp": s.tp, "fp": s.fp, "fn": s.fn,
                    "ap": s.ap, "pq": s.pq, "sq": s.sq, "rq": s.rq,
                }
                for s in self.per_image
            ],
            "aggregate": self.aggregate,
        }

    def to_json(self) -> str:
        return dump_json(self.to_dict()) + "\n"


def dump_json(obj) -> str:
    """Compact, key-order-preserving JSON with floats written to 6 decimals."""
    if isinstance(obj, dict):
        return "{" + ",".join(f"{dump_json(str(k))}:{dump_json(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dump_json(v) for v in obj) + "]"
    if isinstance(obj, bool) or obj is None:
        return {True: "true", False: "false", None: "null"}[obj]
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            raise ValueError("non-finite float in report")
        return f"{float(obj):.6f}"
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def score_image(image_id: str, gt, pred, threshold: float = 0.5) -> ImageScore:
    gt = as_label_map(gt)
    pred = as_label_map(pred)
    if gt.shape != pred.shape:
        raise ShapeMismatch(f"{image_id}: gt {gt.shape} vs pred {pred.shape}")
    table = match_at_threshold(pairwise_iou(gt, pred), threshold)
    pq, sq, rq = pq_at_threshold(table)
    return ImageScore(
        str(image_id), table.n_gt, table.n_pred, table.tp, table.fp, table.fn,
        ap_at_threshold(table), pq, sq, rq,
    )


def _mean(values: list[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def aggregate_scores(scores: list[ImageScore]) -> dict:
    split = split_sparse_dense({s.image_id: s.n_gt for s in scores})
    agg = {
        "mAP": _mean([s.ap for s in scores]),
        "mPQ": _mean([s.pq for s in scores]),
    }
    for name in SPLITS:
        part = [s for s in scores if split[s.image_id] == name]
        agg[name] = {"mAP": _mean([s.ap for s in part]), "mPQ": _mean([s.pq for s in part]), "n": len(part)}
    return agg


def evaluate_dataset(gt_maps: Mapping, pred_maps: Mapping, threshold: float = 0.5,
                     workers: int = 1) -> MetricsReport:
    """Score aligned collections of label maps (keyed by image id).

    Images are reported sorted by id, so the result does not depend on the
    iteration order of the inputs. Splits with no images aggregate to None.
    """
    if not 0 < threshold < 1:
        raise ThresholdOutOfRange(f"IoU threshold must lie in (0, 1), got {threshold}")
    missing = set(gt_maps) ^ set(pred_maps)
    if missing:
        raise MissingPair(f"unpaired images: {sorted(map(str, missing))}")
    keys = sorted(gt_maps, key=str)

    def one(k):
        return score_image(str(k), gt_maps[k], pred_maps[k], threshold)

    if workers > 1 and len(keys) > 1:
        with ThreadPoolExecutor(workers) as pool:
            scores = list(pool.map(one, keys))
    else:
        scores = [one(k) for k in keys]
    return MetricsReport(threshold, scores, aggregate_scores(scores))
