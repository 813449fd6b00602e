"""Flow fields: label map -> supervision targets, and predicted field -> instances.

Targets are built per instance by diffusing heat from a unit source at the
instance's medianoid, restricted to the instance's pixels; the flow at each
pixel is the normalised gradient of that heat, so it points toward the center.
Decoding runs every foreground pixel along the (bilinearly interpolated) flow
with plain Euler steps and groups pixels whose end points share a sink.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import as_label_map, relabel_sequential, split_disconnected
from .errors import BadMagic, DataError, EmptyInstance, NonFiniteField, ShapeMismatch

UEMF_MAGIC = b"UEMF"
UEMF_VERSION = 1
_HEADER = struct.Struct("<4sIIII")

# Stencil for the diffusion step: the 3x3 neighbourhood, self included.
_STENCIL = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
_UP, _LEFT, _SELF, _RIGHT, _DOWN = 1, 3, 4, 5, 7

# Gradients smaller than this are treated as numerically absent.
_TINY = 1e-280
# A gradient component within this fraction of the heats it came from is noise.
_REL_ZERO = 1e-10


@dataclass(eq=False)
class FlowField:
    """Three H x W float32 channels: flow_y, flow_x and foreground probability."""

    flow_y: np.ndarray
    flow_x: np.ndarray
    prob: np.ndarray

    def __post_init__(self):
        self.flow_y = np.ascontiguousarray(self.flow_y, dtype=np.float32)
        self.flow_x = np.ascontiguousarray(self.flow_x, dtype=np.float32)
        self.prob = np.ascontiguousarray(self.prob, dtype=np.float32)
        shapes = {self.flow_y.shape, self.flow_x.shape, self.prob.shape}
        if len(shapes) != 1 or self.flow_y.ndim != 2:
            raise ShapeMismatch(f"flow channels disagree in shape: {sorted(shapes)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.flow_y.shape

    @property
    def height(self) -> int:
        return self.flow_y.shape[0]

    @property
    def width(self) -> int:
        return self.flow_y.shape[1]

    def stack(self) -> np.ndarray:
        return np.stack([self.flow_y, self.flow_x, self.prob])

    @classmethod
    def from_stack(cls, arr) -> FlowField:
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ShapeMismatch(f"expected a (3, H, W) array, got {arr.shape}")
        return cls(arr[0], arr[1], arr[2])

    @classmethod
    def zeros(cls, height: int, width: int) -> FlowField:
        z = np.zeros((height, width), np.float32)
        return cls(z, z.copy(), z.copy())

    def copy(self) -> FlowField:
        return FlowField(self.flow_y.copy(), self.flow_x.copy(), self.prob.copy())

    def identical(self, other: FlowField) -> bool:
        """Bit-for-bit equality of all three channels."""
        return self.shape == other.shape and self.stack().tobytes() == other.stack().tobytes()


@dataclass(frozen=True)
class DecodeParams:
    n_iter: int = 200
    step_size: float = 1.0
    prob_threshold: float = 0.5
    sink_bin: int = 2
    min_size: int = 15

    def __post_init__(self):
        if int(self.n_iter) != self.n_iter or self.n_iter < 1:
            raise ValueError("n_iter must be a positive integer")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0 < self.prob_threshold < 1:
            raise ValueError("prob_threshold must lie in (0, 1)")
        if int(self.sink_bin) != self.sink_bin or self.sink_bin < 1:
            raise ValueError("sink_bin must be a positive integer")
        if int(self.min_size) != self.min_size or self.min_size < 0:
            raise ValueError("min_size must be a non-negative integer")


# ------------------------------------------------------------------- centers


def instance_center(pixels) -> tuple[int, int]:
    """Medianoid of a pixel set: the member closest (L1) to the coordinate-wise median.

    Ties go to the member that comes first in row-major order, so the result is
    always inside the instance even when it is concave.
    """
    pts = np.asarray(sorted(set(map(tuple, np.asarray(pixels).reshape(-1, 2).tolist()))))
    if pts.size == 0:
        raise EmptyInstance("instance has no pixels")
    med = np.median(pts, axis=0)
    dist = np.abs(pts - med).sum(axis=1)
    r, c = pts[int(np.argmin(dist))]
    return int(r), int(c)


def _group_bounds(sorted_keys: np.ndarray) -> np.ndarray:
    starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
    return np.append(starts, sorted_keys.size)


def _medianoids(inst: np.ndarray, rows: np.ndarray, cols: np.ndarray, k: int) -> np.ndarray:
    """Flat-position index (into the pixel arrays) of each instance's medianoid.

    `inst` holds a dense instance index 0..k-1 per pixel.
    """
    med = np.empty((k, 2))
    for j, coord in enumerate((rows, cols)):
        order = np.lexsort((coord, inst))
        vals = coord[order].astype(np.float64)
        b = _group_bounds(inst[order])
        n = np.diff(b)
        lo = vals[b[:-1] + (n - 1) // 2]
        hi = vals[b[:-1] + n // 2]
        med[:, j] = (lo + hi) / 2
    dist = np.abs(rows - med[inst, 0]) + np.abs(cols - med[inst, 1])
    # pixel arrays are already in row-major order, so position breaks ties
    order = np.lexsort((np.arange(inst.size), dist, inst))
    return order[_group_bounds(inst[order])[:-1]]


def instance_centers(labels) -> dict[int, tuple[int, int]]:
    labels = as_label_map(labels)
    flat = labels.ravel()
    idx = np.flatnonzero(flat)
    if idx.size == 0:
        return {}
    ids, inst = np.unique(flat[idx], return_inverse=True)
    rows, cols = np.divmod(idx, labels.shape[1])
    pos = _medianoids(inst, rows, cols, ids.size)
    return {int(i): (int(rows[p]), int(cols[p])) for i, p in zip(ids, pos)}


# ------------------------------------------------------------------- targets


def diffusion_steps(bbox_h, bbox_w):
    """Number of diffusion iterations for an instance: twice its bbox diagonal."""
    return np.ceil(2.0 * np.hypot(bbox_h, bbox_w)).astype(np.int64)


def _diffuse(nb: np.ndarray, src: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Jacobi heat iterations over a pixel graph.

    nb: (m, 9) neighbour positions, `m` meaning "outside the instance" (zero).
    src: positions receiving the unit source each iteration.
    steps: per-pixel iteration budget; pixels freeze once it is spent.
    """
    m = nb.shape[0]
    heat = np.zeros(m + 1)
    uniform = bool(np.all(steps == steps[0]))
    src_steps = steps[src]
    for t in range(int(steps.max())):
        if uniform:
            heat[src] += 1.0
            heat[:m] = heat[nb].sum(axis=1) / 9.0
        else:
            # a frozen instance stops receiving heat as well
            heat[src[t < src_steps]] += 1.0
            heat[:m] = np.where(t < steps, heat[nb].sum(axis=1) / 9.0, heat[:m])
    return heat


def compute_flow_targets(labels) -> FlowField:
    """Supervision targets (flow_y, flow_x, prob) for an instance label map.

    Each instance is handled independently: heat diffuses from its medianoid
    over its own pixels only (zero outside) for twice its bounding-box diagonal
    iterations. The flow is the gradient of that heat (central differences,
    one-sided where a neighbour lies outside the instance) scaled to unit
    length. Background and center pixels get zero flow; prob is the
    foreground indicator.
    """
    labels = as_label_map(labels)
    h, w = labels.shape
    flat = labels.ravel()
    idx = np.flatnonzero(flat)
    field = FlowField.zeros(h, w)
    if idx.size == 0:
        return field

    ids, inst = np.unique(flat[idx], return_inverse=True)
    k = ids.size
    rows, cols = np.divmod(idx, w)
    center_pos = _medianoids(inst, rows, cols, k)

    rmin = np.full(k, h)
    rmax = np.full(k, -1)
    cmin = np.full(k, w)
    cmax = np.full(k, -1)
    np.minimum.at(rmin, inst, rows)
    np.maximum.at(rmax, inst, rows)
    np.minimum.at(cmin, inst, cols)
    np.maximum.at(cmax, inst, cols)
    n_diff = diffusion_steps(rmax - rmin + 1, cmax - cmin + 1)

    # Instances with similar budgets share one vectorised diffusion loop.
    bucket = np.floor(np.log(n_diff) / np.log(1.5)).astype(np.int64)
    pix_bucket = bucket[inst]
    local = np.full(h * w, -1, dtype=np.int64)
    gy = np.zeros(idx.size)
    gx = np.zeros(idx.size)
    for b in np.unique(bucket):
        sel = np.flatnonzero(pix_bucket == b)
        m = sel.size
        local[idx[sel]] = np.arange(m)
        r, c, lab = rows[sel], cols[sel], flat[idx[sel]]
        nb = np.full((m, 9), m, dtype=np.int64)
        for j, (dy, dx) in enumerate(_STENCIL):
            nr, nc = r + dy, c + dx
            ok = (nr >= 0) & (nr < h) & (nc >= 0) & (nc < w)
            nflat = np.where(ok, nr * w + nc, 0)
            ok &= flat[nflat] == lab
            nb[ok, j] = local[nflat[ok]]
        is_center = np.zeros(idx.size, dtype=bool)
        is_center[center_pos] = True
        src = local[idx[sel][is_center[sel]]]
        heat = _diffuse(nb, src, n_diff[inst[sel]])

        t_self = heat[:m]
        for g, lo, hi in ((gy, _UP, _DOWN), (gx, _LEFT, _RIGHT)):
            has_lo, has_hi = nb[:, lo] < m, nb[:, hi] < m
            t_lo, t_hi = heat[nb[:, lo]], heat[nb[:, hi]]
            d = np.where(
                has_lo & has_hi,
                (t_hi - t_lo) / 2.0,
                np.where(has_hi, t_hi - t_self, np.where(has_lo, t_self - t_lo, 0.0)),
            )
            # differences at the rounding level of the heats are symmetric zeros
            scale = np.maximum(np.maximum(np.abs(t_lo), np.abs(t_hi)), np.abs(t_self))
            g[sel] = np.where(np.abs(d) <= _REL_ZERO * scale, 0.0, d)
        local[idx[sel]] = -1

    norm = np.hypot(gy, gx)
    weak = norm < _TINY
    # Where heat never arrived (pixels cut off from the source, or underflow in
    # very long thin shapes) fall back to the straight direction to the center.
    if np.any(weak):
        dy = (rows[center_pos][inst] - rows).astype(np.float64)
        dx = (cols[center_pos][inst] - cols).astype(np.float64)
        gy = np.where(weak, dy, gy)
        gx = np.where(weak, dx, gx)
        norm = np.hypot(gy, gx)
    with np.errstate(invalid="ignore", divide="ignore"):
        uy = np.where(norm > 0, gy / norm, 0.0)
        ux = np.where(norm > 0, gx / norm, 0.0)
    uy[center_pos] = 0.0
    ux[center_pos] = 0.0

    field.flow_y.ravel()[idx] = uy
    field.flow_x.ravel()[idx] = ux
    field.prob.ravel()[idx] = 1.0
    return field


# ------------------------------------------------------------------ decoding


def _euler(fyx: np.ndarray, y: np.ndarray, x: np.ndarray, n_iter: int, step: float):
    """Integrate positions (y, x) in place through the complex flow grid `fyx`."""
    h, w = fyx.shape
    flat = fyx.ravel()
    ymax, xmax = h - 1, w - 1
    for _ in range(n_iter):
        y0 = np.minimum(np.floor(y), max(ymax - 1, 0)).astype(np.int64)
        x0 = np.minimum(np.floor(x), max(xmax - 1, 0)).astype(np.int64)
        wy = y - y0
        wx = x - x0
        y1 = np.minimum(y0 + 1, ymax)
        x1 = np.minimum(x0 + 1, xmax)
        top = flat[y0 * w + x0] * (1 - wx) + flat[y0 * w + x1] * wx
        bot = flat[y1 * w + x0] * (1 - wx) + flat[y1 * w + x1] * wx
        v = top * (1 - wy) + bot * wy
        np.clip(y + step * v.real, 0.0, ymax, out=y)
        np.clip(x + step * v.imag, 0.0, xmax, out=x)


def integrate_trajectories(field: FlowField, starts, n_iter: int, step_size: float,
                           workers: int = 1, chunk: int = 1 << 16) -> np.ndarray:
    """End points of Euler trajectories from `starts` ((N, 2) row/col array)."""
    starts = np.asarray(starts, dtype=np.float64).reshape(-1, 2)
    # flow_y and flow_x ride in one complex array so each corner is one gather
    fyx = field.flow_y.astype(np.float64) + 1j * field.flow_x.astype(np.float64)
    y = starts[:, 0].copy()
    x = starts[:, 1].copy()
    bounds = list(range(0, y.size, chunk)) + [y.size]
    jobs = [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]

    def run(span):
        lo, hi = span
        _euler(fyx, y[lo:hi], x[lo:hi], n_iter, step_size)

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, jobs))
    else:
        for span in jobs:
            run(span)
    return np.column_stack([y, x])


def cluster_sinks(terminals, sink_bin: int) -> np.ndarray:
    """Group trajectory end points into convergence points.

    End points are binned into sink_bin x sink_bin cells. Each occupied cell
    points at the best cell in its 3x3 neighbourhood (more end points wins,
    then the lower (row, col)); following those pointers ends at a local
    maximum, and every end point joins the maximum its cell leads to. Cluster
    ids are 0..C-1 in (row, col) order of the maxima.
    """
    t = np.asarray(terminals, dtype=np.float64).reshape(-1, 2)
    if t.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(t)):
        raise DataError("terminal coordinates must be finite")
    cells = np.floor(t / sink_bin).astype(np.int64)
    rr = cells[:, 0] - cells[:, 0].min() + 1
    cc = cells[:, 1] - cells[:, 1].min() + 1
    ncol = int(cc.max()) + 2
    keys, inverse, counts = np.unique(rr * ncol + cc, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    n = keys.size
    best = np.arange(n)
    best_count = counts.copy()
    best_key = keys.copy()
    for dy, dx in _STENCIL:
        if dy == 0 and dx == 0:
            continue
        nk = keys + dy * ncol + dx
        j = np.minimum(np.searchsorted(keys, nk), n - 1)
        exists = keys[j] == nk
        ncount = np.where(exists, counts[j], -1)
        better = exists & ((ncount > best_count) | ((ncount == best_count) & (nk < best_key)))
        best = np.where(better, j, best)
        best_count = np.where(better, ncount, best_count)
        best_key = np.where(better, nk, best_key)
    parent = best
    while True:
        nxt = parent[parent]
        if np.array_equal(nxt, parent):
            break
        parent = nxt
    _, cluster_of_cell = np.unique(parent, return_inverse=True)
    return cluster_of_cell.ravel()[inverse].astype(np.int64)


def follow_flows(field: FlowField, params: DecodeParams | None = None, workers: int = 1) -> np.ndarray:
    """Decode a flow field into an instance label map.

    Pixels with prob >= prob_threshold are advected for n_iter Euler steps;
    end points sharing a sink cluster form one instance. Instances are then
    split into 4-connected pieces and pieces below min_size are dropped. The
    result is numbered 1..K in row-major first-pixel order and does not depend
    on `workers`.
    """
    params = params or DecodeParams()
    if not isinstance(field, FlowField):
        raise DataError("follow_flows expects a FlowField")
    h, w = field.shape
    out = np.zeros((h, w), dtype=np.int64)
    fg = np.flatnonzero(field.prob.ravel() >= params.prob_threshold)
    if fg.size == 0:
        return out.astype(np.uint32)
    starts = np.column_stack(np.divmod(fg, w))
    ends = integrate_trajectories(field, starts, params.n_iter, params.step_size, workers=workers)
    out.ravel()[fg] = cluster_sinks(ends, params.sink_bin) + 1
    out = split_disconnected(out, connectivity=4)
    if params.min_size > 0:
        counts = np.bincount(out.ravel())
        small = counts < params.min_size
        small[0] = False
        out[small[out]] = 0
    return relabel_sequential(out)


# ---------------------------------------------------------------- perturbation

_PROB_EPS = 0.01


def perturb_field(field: FlowField, sigma: float, seed: int) -> FlowField:
    """Add seeded noise to a field: Gaussian on the flows, logit-space on prob.

    The noise for channel c of pixel i is the (c, i)-th draw of a Philox stream
    keyed by `seed`, so a given (seed, pixel) always gets the same draw and
    larger sigma only scales it.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return field.copy()
    rng = np.random.Generator(np.random.Philox(key=int(seed) % 2**64))
    z = rng.standard_normal((3,) + field.shape)
    p = np.clip(field.prob.astype(np.float64), _PROB_EPS, 1 - _PROB_EPS)
    logit = np.log(p) - np.log1p(-p) + sigma * z[2]
    return FlowField(
        field.flow_y + sigma * z[0],
        field.flow_x + sigma * z[1],
        1.0 / (1.0 + np.exp(-logit)),
    )


# ----------------------------------------------------------------------- UEMF


def uemf_bytes(field: FlowField) -> bytes:
    h, w = field.shape
    header = _HEADER.pack(UEMF_MAGIC, UEMF_VERSION, h, w, 3)
    return header + field.stack().astype("<f4").tobytes(order="C")


def parse_uemf(data: bytes, check_finite: bool = True) -> FlowField:
    if len(data) < _HEADER.size:
        raise BadMagic("file too short for a UEMF header")
    magic, version, h, w, ch = _HEADER.unpack_from(data)
    if magic != UEMF_MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != UEMF_VERSION or ch != 3:
        raise DataError(f"unsupported UEMF version {version} / channels {ch}")
    expected = _HEADER.size + 3 * h * w * 4
    if len(data) != expected:
        raise DataError(f"UEMF payload is {len(data)} bytes, expected {expected}")
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(3, h, w)
    if check_finite and not np.all(np.isfinite(arr)):
        raise NonFiniteField("UEMF contains NaN or Inf")
    return FlowField.from_stack(arr.astype(np.float32))


def write_uemf(field: FlowField, path) -> None:
    Path(path).write_bytes(uemf_bytes(field))


def read_uemf(path, check_finite: bool = True) -> FlowField:
    return parse_uemf(Path(path).read_bytes(), check_finite=check_finite)
