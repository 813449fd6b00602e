"""Deterministic synthetic micrograph scenes with exact instance ground truth.

A :class:`SceneSpec` fixes geometry (morphology, count band, spatial
distribution, layering, size law) and appearance (texture, polarity). Shapes
are placed one at a time by bounded rejection sampling; in ``tiled`` mode
masks may touch but never overlap, in ``multilayer`` mode later shapes sit on
top and the label map keeps only what remains visible. Everything is drawn
from Philox streams keyed by the spec's seed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .core import LABEL_DTYPE, as_label_map, instance_areas
from .errors import InfeasibleSpec

MORPHOLOGIES = ("sphere", "ellipse", "rod", "polygon", "irregular_blob")
DENSITY_BANDS = {"sparse": (1, 99), "medium": (100, 499), "high": (500, 2500)}
DISTRIBUTIONS = ("random", "uniform_grid", "clustered")
LAYERINGS = ("tiled", "multilayer")
TEXTURES = ("smooth", "noisy", "porous")
POLARITIES = ("bright_on_dark", "dark_on_bright")

MIN_AREA = 10
MAX_AREA = 100_000
RETRY_BUDGET = 10_000
ATTEMPTS_PER_SHAPE = 50
FILL_FRACTION = {"tiled": 0.42, "multilayer": 0.6}
AREA_BIN_EDGES = np.array([1e1, 1e2, 1e3, 1e4, 1e5])


# ---------------------------------------------------------------------- specs


@dataclass(frozen=True)
class SizeLaw:
    """Distribution of equivalent diameters (pixels).

    kind="lognormal": params (mu, sigma) of log-diameter.
    kind="uniform":   params (a, b), diameter ~ U(a, b).
    kind="bimodal":   params (mu1, sigma1, mu2, sigma2, p), lognormal mixture,
                      the second component drawn with probability p.
    """

    kind: str = "lognormal"
    params: tuple[float, ...] = (math.log(12.0), 0.3)

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(v) for v in self.params))
        n = {"lognormal": 2, "uniform": 2, "bimodal": 5}.get(self.kind)
        if n is None:
            raise ValueError(f"unknown size law {self.kind!r}")
        if len(self.params) != n:
            raise ValueError(f"{self.kind} takes {n} parameters")
        if self.kind == "lognormal" and self.params[1] < 0:
            raise ValueError("lognormal sigma must be >= 0")
        if self.kind == "uniform" and not 0 < self.params[0] <= self.params[1]:
            raise ValueError("uniform law needs 0 < a <= b")
        if self.kind == "bimodal":
            mu1, s1, mu2, s2, p = self.params
            if s1 < 0 or s2 < 0 or not 0 <= p <= 1:
                raise ValueError("bimodal law needs sigmas >= 0 and p in [0, 1]")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Raw (unclipped) diameters."""
        if self.kind == "lognormal":
            mu, s = self.params
            return np.exp(mu + s * rng.standard_normal(n))
        if self.kind == "uniform":
            a, b = self.params
            return rng.uniform(a, b, n)
        mu1, s1, mu2, s2, p = self.params
        second = rng.random(n) < p
        z = rng.standard_normal(n)
        return np.exp(np.where(second, mu2 + s2 * z, mu1 + s1 * z))


@dataclass(frozen=True)
class SceneSpec:
    height: int = 512
    width: int = 512
    morphology: str = "sphere"
    density_class: str = "sparse"
    distribution: str = "random"
    layering: str = "tiled"
    size_law: SizeLaw = field(default_factory=SizeLaw)
    texture: str = "smooth"
    contrast_polarity: str = "bright_on_dark"
    seed: int = 0
    min_area: int = MIN_AREA

    def __post_init__(self):
        for name, allowed in (
            ("morphology", MORPHOLOGIES),
            ("density_class", tuple(DENSITY_BANDS)),
            ("distribution", DISTRIBUTIONS),
            ("layering", LAYERINGS),
            ("texture", TEXTURES),
            ("contrast_polarity", POLARITIES),
        ):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.height < 8 or self.width < 8:
            raise ValueError("scenes must be at least 8x8 pixels")
        if not MIN_AREA <= self.min_area <= MAX_AREA:
            raise ValueError(f"min_area must lie in [{MIN_AREA}, {MAX_AREA}]")
        if isinstance(self.size_law, dict):
            object.__setattr__(self, "size_law", SizeLaw(**self.size_law))

    @property
    def band(self) -> tuple[int, int]:
        return DENSITY_BANDS[self.density_class]

    def diameter_bounds(self) -> tuple[float, float]:
        return area_to_diameter(self.min_area), area_to_diameter(MAX_AREA)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size_law"] = {"kind": self.size_law.kind, "params": list(self.size_law.params)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        d = dict(d)
        law = d.pop("size_law", None)
        if law is not None:
            d["size_law"] = SizeLaw(law["kind"], tuple(law["params"]))
        return cls(**d)


def area_to_diameter(area):
    return np.sqrt(4.0 * np.asarray(area, dtype=np.float64) / np.pi)


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    seqs = np.random.SeedSequence(int(seed) % 2**128).spawn(n)
    return [np.random.Generator(np.random.Philox(s)) for s in seqs]


# --------------------------------------------------------------------- shapes


@dataclass
class Shape:
    """A rasterised shape: boolean `mask` whose top-left pixel is (row, col)."""

    row: int
    col: int
    mask: np.ndarray
    cy: float
    cx: float

    @property
    def slices(self) -> tuple[slice, slice]:
        h, w = self.mask.shape
        return slice(self.row, self.row + h), slice(self.col, self.col + w)


def _radial_profile(morphology: str, diameter: float, rng: np.random.Generator):
    """Return (inside(dy, dx) -> bool array, bounding radius) for one shape."""
    area = math.pi * diameter**2 / 4.0
    theta = rng.uniform(0, math.pi)
    ct, st = math.cos(theta), math.sin(theta)

    def rotate(dy, dx):
        return dy * ct - dx * st, dy * st + dx * ct

    if morphology == "sphere":
        r = diameter / 2.0
        return (lambda dy, dx: dy * dy + dx * dx <= r * r), r

    if morphology == "ellipse":
        q = rng.uniform(1.3, 2.5)
        a = diameter / 2.0 * math.sqrt(q)
        b = diameter / 2.0 / math.sqrt(q)

        def inside(dy, dx):
            u, v = rotate(dy, dx)
            return (u / a) ** 2 + (v / b) ** 2 <= 1.0

        return inside, a

    if morphology == "rod":
        q = rng.uniform(2.5, 5.0)
        r = math.sqrt(area / (4.0 * (q - 1.0) + math.pi))
        half = r * (q - 1.0)

        def inside(dy, dx):
            u, v = rotate(dy, dx)
            u = np.clip(np.abs(u) - half, 0.0, None)
            return u * u + v * v <= r * r

        return inside, half + r

    if morphology == "polygon":
        k = int(rng.integers(3, 9))
        gaps = rng.uniform(0.5, 1.0, k)
        ang = np.cumsum(gaps) / gaps.sum() * 2 * math.pi + rng.uniform(0, 2 * math.pi)
        rad = rng.uniform(0.75, 1.0, k)
        py, px = rad * np.sin(ang), rad * np.cos(ang)
        unit_area = 0.5 * abs(np.dot(px, np.roll(py, -1)) - np.dot(py, np.roll(px, -1)))
        s = math.sqrt(area / unit_area)
        py, px = py * s, px * s
        ey, ex = np.roll(py, -1) - py, np.roll(px, -1) - px

        def inside(dy, dx):
            # vertices run counter-clockwise in (x, y), so interior is left of every edge
            cross = ex[:, None] * (dy.ravel()[None] - py[:, None]) - ey[:, None] * (dx.ravel()[None] - px[:, None])
            return np.all(cross >= 0, axis=0).reshape(np.shape(dy))

        return inside, float(np.max(np.hypot(py, px)))

    # irregular_blob: superellipse boundary modulated by band-limited radial noise
    n_exp = rng.uniform(1.6, 3.0)
    q = rng.uniform(1.0, 1.8)
    harm = np.arange(2, 7)
    amp = rng.normal(0.0, 0.12, harm.size) / harm ** 0.8
    phase = rng.uniform(0, 2 * math.pi, harm.size)

    def radius(phi):
        base = (np.abs(np.cos(phi) * math.sqrt(1 / q)) ** n_exp + np.abs(np.sin(phi) * math.sqrt(q)) ** n_exp) ** (-1 / n_exp)
        wobble = 1.0 + np.sum(amp[:, None] * np.cos(harm[:, None] * np.ravel(phi)[None] + phase[:, None]), axis=0)
        return base * np.clip(wobble, 0.4, None).reshape(np.shape(phi))

    phi = np.linspace(0, 2 * math.pi, 720, endpoint=False)
    unit_r = radius(phi)
    s = math.sqrt(area / (0.5 * np.mean(unit_r**2) * 2 * math.pi))

    def inside(dy, dx):
        u, v = rotate(dy, dx)
        return np.hypot(u, v) <= s * radius(np.arctan2(u, v))

    return inside, float(s * unit_r.max())


def rasterize(morphology: str, diameter: float, cy: float, cx: float, rng: np.random.Generator) -> Shape:
    inside, rb = _radial_profile(morphology, diameter, rng)
    r0 = int(math.floor(cy - rb)) - 1
    c0 = int(math.floor(cx - rb)) - 1
    n = int(math.ceil(2 * rb)) + 3
    dy, dx = np.mgrid[r0 : r0 + n, c0 : c0 + n].astype(np.float64)
    mask = inside(dy - cy, dx - cx)
    # sharp corners can leave pixels attached only diagonally; keep one 4-connected piece
    pieces, n_pieces = ndimage.label(mask)
    if n_pieces > 1:
        mask = pieces == 1 + int(np.argmax(np.bincount(pieces.ravel())[1:]))
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return Shape(int(round(cy)), int(round(cx)), np.zeros((0, 0), bool), cy, cx)
    mask = mask[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    return Shape(r0 + int(rows[0]), c0 + int(cols[0]), np.ascontiguousarray(mask), cy, cx)


# ------------------------------------------------------------------ placement


class _Positioner:
    """Draws shape centers for one of the spatial distributions."""

    def __init__(self, spec: SceneSpec, n: int, rng: np.random.Generator):
        self.spec, self.rng = spec, rng
        h, w = spec.height, spec.width
        if spec.distribution == "uniform_grid":
            gr = max(1, round(math.sqrt(n * h / w)))
            gc = max(1, math.ceil(n / gr))
            self.cell = (h / gr, w / gc)
            cells = [(i, j) for i in range(gr) for j in range(gc)]
            self.order = [cells[k] for k in rng.permutation(len(cells))]
        elif spec.distribution == "clustered":
            k = max(1, round(math.sqrt(n)))
            self.centers = np.column_stack([rng.uniform(0, h, k), rng.uniform(0, w, k)])
            self.spread = math.sqrt(h * w / k) / 4.0

    def draw(self, index: int, attempt: int, rb: float) -> tuple[float, float]:
        spec, rng = self.spec, self.rng
        h, w = spec.height, spec.width
        if spec.distribution == "uniform_grid" and index < len(self.order):
            i, j = self.order[index]
            ch, cw = self.cell
            jitter = 0.25 + 0.05 * attempt
            cy = (i + 0.5 + rng.uniform(-jitter, jitter)) * ch
            cx = (j + 0.5 + rng.uniform(-jitter, jitter)) * cw
        elif spec.distribution == "clustered":
            c = self.centers[rng.integers(len(self.centers))]
            s = self.spread * (1.0 + attempt / 10.0)
            cy, cx = c + s * rng.standard_normal(2)
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        # keep the whole shape on the canvas
        lo_y, hi_y = rb + 1, h - rb - 2
        lo_x, hi_x = rb + 1, w - rb - 2
        return float(np.clip(cy, lo_y, max(lo_y, hi_y))), float(np.clip(cx, lo_x, max(lo_x, hi_x)))


@dataclass
class Layout:
    """Placed shapes in z order (index 0 at the bottom) and the visible label map."""

    spec: SceneSpec
    shapes: list[Shape]
    labels: np.ndarray


def _fits(shape: Shape, h: int, w: int) -> bool:
    mh, mw = shape.mask.shape
    return mh > 0 and shape.row >= 0 and shape.col >= 0 and shape.row + mh <= h and shape.col + mw <= w


def _target_count(spec: SceneSpec, rng: np.random.Generator) -> int:
    lo, hi = spec.band
    n = int(rng.integers(lo, hi + 1))
    d_lo, d_hi = spec.diameter_bounds()
    d = np.clip(spec.size_law.sample(rng, 4096), d_lo, d_hi)
    mean_area = float(np.mean(np.pi * d**2 / 4.0))
    capacity = int(FILL_FRACTION[spec.layering] * spec.height * spec.width / mean_area)
    return max(lo, min(n, capacity))


def _visible_ok(labels: np.ndarray, shape: Shape, boxes: list, min_area: int) -> bool:
    """Whether covering `shape` leaves every occluded instance big and connected."""
    sl = shape.slices
    under = labels[sl][shape.mask]
    under = under[under > 0]
    if under.size == 0:
        return True
    for k, lost in zip(*np.unique(under, return_counts=True)):
        r0, r1, c0, c1, area = boxes[k - 1]
        if area - lost < min_area:
            return False
        region = labels[r0:r1, c0:c1] == k
        top = np.zeros_like(region)
        # overlap of the new shape with k's bounding box
        ys = slice(max(r0, sl[0].start), min(r1, sl[0].stop))
        xs = slice(max(c0, sl[1].start), min(c1, sl[1].stop))
        top[ys.start - r0 : ys.stop - r0, xs.start - c0 : xs.stop - c0] = shape.mask[
            ys.start - sl[0].start : ys.stop - sl[0].start, xs.start - sl[1].start : xs.stop - sl[1].start
        ]
        _, n = ndimage.label(region & ~top)
        if n != 1:
            return False
    return True


def layout_scene(spec: SceneSpec) -> Layout:
    """Place the shapes of `spec`; raises InfeasibleSpec if the band's minimum is not reached."""
    count_rng, size_rng, shape_rng, pos_rng, _ = _streams(spec.seed, 5)
    h, w = spec.height, spec.width
    n_target = _target_count(spec, count_rng)
    d_lo, d_hi = spec.diameter_bounds()
    positioner = _Positioner(spec, n_target, pos_rng)
    labels = np.zeros((h, w), dtype=LABEL_DTYPE)
    shapes: list[Shape] = []
    boxes: list[tuple[int, int, int, int, int]] = []
    failures = 0
    index = 0
    while len(shapes) < n_target and failures < RETRY_BUDGET:
        d = float(np.clip(spec.size_law.sample(size_rng, 1)[0], d_lo, d_hi))
        template = rasterize(spec.morphology, d, 0.0, 0.0, shape_rng)
        if template.mask.sum() < spec.min_area or max(template.mask.shape) + 4 > min(h, w):
            failures += 1
            continue
        rb = max(-template.row, -template.col, template.row + template.mask.shape[0],
                 template.col + template.mask.shape[1])
        placed = False
        for attempt in range(ATTEMPTS_PER_SHAPE):
            cy, cx = positioner.draw(index, attempt, rb)
            iy, ix = math.floor(cy), math.floor(cx)
            shape = Shape(template.row + iy, template.col + ix, template.mask, cy, cx)
            if not _fits(shape, h, w):
                failures += 1
                continue
            window = labels[shape.slices]
            if spec.layering == "tiled":
                ok = not np.any(window[shape.mask])
            else:
                ok = _visible_ok(labels, shape, boxes, spec.min_area)
            if not ok:
                failures += 1
                if failures >= RETRY_BUDGET:
                    break
                continue
            k = len(shapes) + 1
            if spec.layering == "multilayer":
                for j in np.unique(window[shape.mask]):
                    if j:
                        r0, r1, c0, c1, area = boxes[j - 1]
                        boxes[j - 1] = (r0, r1, c0, c1, area - int(np.sum(window[shape.mask] == j)))
            window[shape.mask] = k
            sl = shape.slices
            boxes.append((sl[0].start, sl[0].stop, sl[1].start, sl[1].stop, int(shape.mask.sum())))
            shapes.append(shape)
            placed = True
            break
        index += 1
        if not placed and failures >= RETRY_BUDGET:
            break
    lo, _ = spec.band
    if len(shapes) < lo:
        raise InfeasibleSpec(
            f"placed {len(shapes)} of the required {lo} instances "
            f"({spec.density_class}, {spec.morphology}, {h}x{w}) within {RETRY_BUDGET} retries"
        )
    return Layout(spec, shapes, labels)


# ------------------------------------------------------------------ rendering


def render_image(layout: Layout, rng: np.random.Generator) -> np.ndarray:
    """Grey-level rendering in [0, 1]; purely cosmetic."""
    spec, labels = layout.spec, layout.labels
    h, w = labels.shape
    bright = spec.contrast_polarity == "bright_on_dark"
    bg, fg_lo, fg_hi = (0.15, 0.55, 0.9) if bright else (0.85, 0.1, 0.45)
    level = np.concatenate([[bg], rng.uniform(fg_lo, fg_hi, len(layout.shapes))])
    img = level[labels].astype(np.float64)

    # interior shading: brighter (or darker) toward each particle's middle
    depth = ndimage.distance_transform_edt(labels > 0)
    edges = labels != ndimage.grey_erosion(labels, size=3)
    shade = np.clip(depth / 6.0, 0, 1)
    sign = 1.0 if bright else -1.0
    img += sign * 0.08 * shade * (labels > 0)
    img[edges & (labels > 0)] = bg * 0.5 + img[edges & (labels > 0)] * 0.5

    if spec.texture == "porous":
        holes = rng.random((h, w)) < 0.01
        holes = ndimage.binary_dilation(holes, iterations=1) & (depth > 2)
        img[holes] = bg * 0.7 + img[holes] * 0.3
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    gy, gx = rng.uniform(-0.08, 0.08, 2)
    img += gy * (yy - 0.5) + gx * (xx - 0.5)
    if spec.texture == "noisy":
        img *= 1.0 + 0.15 * rng.standard_normal((h, w))
        img += 0.05 * rng.standard_normal((h, w))
    img = ndimage.gaussian_filter(img, 0.7)
    img += 0.02 * rng.standard_normal((h, w))
    return np.clip(img, 0.0, 1.0)


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return (image in [0, 1], instance label map) for `spec`."""
    layout = layout_scene(spec)
    render_rng = _streams(spec.seed, 5)[4]
    return render_image(layout, render_rng), layout.labels


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


# ----------------------------------------------------------------- statistics


@dataclass(frozen=True)
class SceneStats:
    n_instances: int
    area_histogram: tuple[int, ...]
    density_class: str
    bin_edges: tuple[float, ...] = tuple(AREA_BIN_EDGES.tolist())

    def to_dict(self) -> dict:
        return {
            "n_instances": self.n_instances,
            "area_histogram": list(self.area_histogram),
            "bin_edges": list(self.bin_edges),
            "density_class": self.density_class,
        }


def density_label(n: int) -> str:
    if n < DENSITY_BANDS["medium"][0]:
        return "sparse"
    if n < DENSITY_BANDS["high"][0]:
        return "medium"
    return "high"


def scene_statistics(labels) -> SceneStats:
    """Instance count and per-decade area histogram; out-of-range areas land in the end bins."""
    areas = np.array(list(instance_areas(as_label_map(labels)).values()), dtype=np.float64)
    n_bins = AREA_BIN_EDGES.size - 1
    if areas.size == 0:
        return SceneStats(0, (0,) * n_bins, density_label(0))
    which = np.clip(np.searchsorted(AREA_BIN_EDGES, areas, side="right") - 1, 0, n_bins - 1)
    hist = np.bincount(which, minlength=n_bins)
    return SceneStats(int(areas.size), tuple(int(v) for v in hist), density_label(int(areas.size)))


# ---------------------------------------------------------------------- suite

SUITE_SHAPES = {"sparse": (512, 512), "medium": (768, 768), "high": (1024, 1024)}


def _suite_size_law(density: str, rng: np.random.Generator) -> SizeLaw:
    if density == "high":
        return SizeLaw("lognormal", (math.log(rng.uniform(8.0, 12.0)), rng.uniform(0.15, 0.3)))
    if density == "medium":
        return SizeLaw("lognormal", (math.log(rng.uniform(12.0, 20.0)), rng.uniform(0.2, 0.4)))
    kind = ("lognormal", "uniform", "bimodal")[int(rng.integers(3))]
    # Largest shapes stay within reach of the default 200-step decoder.
    if kind == "lognormal":
        return SizeLaw(kind, (math.log(rng.uniform(15.0, 45.0)), rng.uniform(0.25, 0.5)))
    if kind == "uniform":
        a = rng.uniform(6.0, 20.0)
        return SizeLaw(kind, (a, a + rng.uniform(30.0, 150.0)))
    return SizeLaw(kind, (math.log(rng.uniform(6.0, 12.0)), 0.25, math.log(rng.uniform(80.0, 140.0)), 0.2, 0.2))


def sample_scene_suite(master_seed: int, n_per_class: int) -> list[SceneSpec]:
    """Balanced factorial suite over density x morphology x layering.

    Distribution, texture, polarity and size law are drawn per spec from a
    stream derived from `master_seed` and the spec's position in the suite.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    specs = []
    for di, density in enumerate(DENSITY_BANDS):
        for mi, morph in enumerate(MORPHOLOGIES):
            for li, layering in enumerate(LAYERINGS):
                for rep in range(n_per_class):
                    ss = np.random.SeedSequence([int(master_seed) % 2**64, di, mi, li, rep])
                    rng = np.random.Generator(np.random.Philox(ss))
                    h, w = SUITE_SHAPES[density]
                    specs.append(SceneSpec(
                        height=h, width=w, morphology=morph, density_class=density,
                        distribution=DISTRIBUTIONS[int(rng.integers(len(DISTRIBUTIONS)))],
                        layering=layering, size_law=_suite_size_law(density, rng),
                        texture=TEXTURES[int(rng.integers(len(TEXTURES)))],
                        contrast_polarity=POLARITIES[int(rng.integers(len(POLARITIES)))],
                        seed=int(ss.generate_state(1, np.uint64)[0]),
                    ))
    return specs


def with_seed(spec: SceneSpec, seed: int) -> SceneSpec:
    return replace(spec, seed=seed)
