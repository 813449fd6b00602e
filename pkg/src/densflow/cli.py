"""densflow command-line tool.

    densflow gen     synthetic corpus (images, label maps, scene sidecars)
    densflow flows   label maps -> UEMF flow targets
    densflow decode  UEMF fields -> label maps
    densflow eval    gt vs pred label maps -> metrics JSON
    densflow render  label map or field -> PNG
    densflow bench   per-stage timings over a corpus

Exit status: 0 success, 1 usage error, 2 data error. Diagnostics go to stderr;
stdout carries only requested payloads. Files are paired across directories by
stem (``labels/X.png`` <-> ``fields/X.uemf`` <-> ``pred/X.png``).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import resource
import sys
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .core import as_label_map, label_files, load_labels, save_labels
from .errors import DataError, DensflowError
from .flows import DecodeParams, FlowField, compute_flow_targets, follow_flows, read_uemf
from .metrics import dump_json, evaluate_dataset, score_image
from .predictor import save_fields
from .synth import (
    DENSITY_BANDS, DISTRIBUTIONS, LAYERINGS, MORPHOLOGIES, POLARITIES, SUITE_SHAPES, TEXTURES,
    SceneSpec, SizeLaw, generate_scene, image_to_uint8, sample_scene_suite, scene_statistics,
)

THREADS_ENV = "DENSFLOW_THREADS"
# flags that change scheduling only and are left out of manifests
_SCHEDULING_FLAGS = {"threads"}

DEFAULT_SIZE_LAWS = {
    "sparse": SizeLaw("lognormal", (math.log(20.0), 0.35)),
    "medium": SizeLaw("lognormal", (math.log(14.0), 0.3)),
    "high": SizeLaw("lognormal", (math.log(10.0), 0.25)),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path: Path, args: argparse.Namespace, inputs, outputs, master_seed=None) -> None:
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
             if k not in _SCHEDULING_FLAGS and k != "func"}
    manifest = {
        "command": args.command,
        "flags": flags,
        "tool_version": __version__,
        "master_seed": master_seed,
        "inputs": [{"path": str(p), "sha256": sha256_file(p)} for p in sorted(map(Path, inputs))],
        "outputs": [{"path": str(p), "sha256": sha256_file(p)} for p in sorted(map(Path, outputs))],
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _threads(args) -> int:
    n = args.threads
    if n is None:
        env = os.environ.get(THREADS_ENV)
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}")
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _map(fn, items, threads: int):
    """Apply `fn` to items, returning (item, result-or-exception) in input order."""

    def safe(item):
        try:
            return item, fn(item)
        except (DensflowError, OSError) as exc:
            return item, exc

    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(safe, items))
    return [safe(i) for i in items]


def _report_failures(results) -> int:
    failed = 0
    for item, res in results:
        if isinstance(res, Exception):
            _log(f"error: {item}: {res}")
            failed += 1
    return failed


# ------------------------------------------------------------------------ gen


def _single_specs(args) -> list[SceneSpec]:
    if args.count < 1:
        raise ValueError("--count must be >= 1")
    h, w = SUITE_SHAPES[args.density]
    law = DEFAULT_SIZE_LAWS[args.density]
    if args.size_law:
        law = SizeLaw(args.size_law, tuple(args.size_params or ()))
    ss = np.random.SeedSequence(args.seed % 2**64)
    seeds = [int(c.generate_state(1, np.uint64)[0]) for c in ss.spawn(args.count)]
    return [
        SceneSpec(
            height=args.height or h, width=args.width or w,
            morphology=args.morphology[i % len(args.morphology)],
            density_class=args.density, distribution=args.distribution, layering=args.layering,
            size_law=law, texture=args.texture, contrast_polarity=args.polarity, seed=s,
            min_area=args.min_area,
        )
        for i, s in enumerate(seeds)
    ]


def cmd_gen(args) -> int:
    threads = _threads(args)
    try:
        specs = sample_scene_suite(args.seed, args.n_per_class) if args.suite else _single_specs(args)
    except ValueError as exc:
        raise UsageError(str(exc))
    out = args.out
    for sub in ("images", "labels", "scenes"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    items = [(f"scene_{i:04d}", spec) for i, spec in enumerate(specs)]

    def work(item):
        stem, spec = item
        image, labels = generate_scene(spec)
        img_path = out / "images" / f"{stem}.png"
        Image.fromarray(image_to_uint8(image)).save(img_path, format="PNG")
        lab_path = save_labels(labels, out / "labels" / stem)
        side = out / "scenes" / f"{stem}.json"
        side.write_text(
            json.dumps({"spec": spec.to_dict(), "stats": scene_statistics(labels).to_dict()}, indent=2) + "\n",
            encoding="utf-8",
        )
        return [img_path, lab_path, side]

    results = _map(work, items, threads)
    failed = _report_failures([(stem, r) for (stem, _), r in results])
    outputs = [p for _, r in results if not isinstance(r, Exception) for p in r]
    write_manifest(out / "manifest.json", args, [], outputs, master_seed=args.seed)
    _log(f"gen: wrote {len(results) - failed} scenes to {out}")
    return 2 if failed else 0


# ---------------------------------------------------------------------- flows


def cmd_flows(args) -> int:
    threads = _threads(args)
    files = label_files(args.labels)
    args.out.mkdir(parents=True, exist_ok=True)

    def work(stem):
        target = args.out / f"{stem}.uemf"
        save_fields(compute_flow_targets(load_labels(files[stem])), target)
        return target

    results = _map(work, sorted(files), threads)
    failed = _report_failures(results)
    outputs = [r for _, r in results if not isinstance(r, Exception)]
    write_manifest(args.out / "manifest.json", args, list(files.values()), outputs)
    _log(f"flows: wrote {len(outputs)} fields to {args.out}")
    return 2 if failed else 0


# --------------------------------------------------------------------- decode


def _decode_params(args) -> DecodeParams:
    try:
        return DecodeParams(args.niter, args.step, args.prob_thresh, args.sink_bin, args.min_size)
    except ValueError as exc:
        raise UsageError(str(exc))


def cmd_decode(args) -> int:
    threads = _threads(args)
    params = _decode_params(args)
    fields = {p.stem: p for p in sorted(Path(args.fields).glob("*.uemf"))}
    args.out.mkdir(parents=True, exist_ok=True)

    def work(stem):
        labels = follow_flows(read_uemf(fields[stem]), params)
        return save_labels(labels, args.out / stem)

    results = _map(work, sorted(fields), threads)
    failed = _report_failures(results)
    outputs = [r for _, r in results if not isinstance(r, Exception)]
    write_manifest(args.out / "manifest.json", args, list(fields.values()), outputs)
    _log(f"decode: wrote {len(outputs)} label maps to {args.out}")
    return 2 if failed else 0


# ----------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    threads = _threads(args)
    if not 0 < args.iou < 1:
        raise UsageError("--iou must lie in (0, 1)")
    gt_files = label_files(args.gt)
    pred_files = label_files(args.pred)
    gt = {k: load_labels(p) for k, p in gt_files.items()}
    pred = {k: load_labels(p) for k, p in pred_files.items()}
    report = evaluate_dataset(gt, pred, args.iou, workers=threads)
    payload = report.to_json()
    if args.report:
        args.report.parent.mkdir(parents=True, exist_ok=True)
        args.report.write_text(payload, encoding="utf-8")
        manifest = args.report.with_name(args.report.stem + ".manifest.json")
        write_manifest(manifest, args, list(gt_files.values()) + list(pred_files.values()), [args.report])
    else:
        sys.stdout.write(payload)
    return 0


# --------------------------------------------------------------------- render


def palette(ids) -> np.ndarray:
    """Fixed per-id RGB colours (uint8), never black; id 0 maps to black."""
    x = np.asarray(ids, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x * np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    rgb = np.stack([(z >> np.uint64(s)) & np.uint64(0xFF) for s in (0, 8, 16)], axis=-1)
    rgb = (64 + rgb * 192 // 256).astype(np.uint8)
    rgb[x == 0] = 0
    return rgb


def render_labels(labels) -> np.ndarray:
    labels = as_label_map(labels)
    ids, inverse = np.unique(labels, return_inverse=True)
    return palette(ids)[inverse.reshape(labels.shape)]


def render_field(field: FlowField) -> np.ndarray:
    """Hue = flow angle, saturation = flow magnitude, value = prob."""
    angle = np.arctan2(field.flow_y, field.flow_x)
    hue = np.mod(angle / (2 * np.pi), 1.0)
    sat = np.clip(np.hypot(field.flow_y, field.flow_x), 0, 1)
    val = np.clip(field.prob, 0, 1)
    hsv = np.round(np.stack([hue, sat, val], axis=-1) * 255).astype(np.uint8)
    return np.array(Image.fromarray(hsv, mode="HSV").convert("RGB"))


def cmd_render(args) -> int:
    src = Path(args.input)
    if not src.is_file():
        raise DataError(f"{src}: no such file")
    if src.suffix.lower() == ".uemf":
        rgb = render_field(read_uemf(src))
    else:
        rgb = render_labels(load_labels(src))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, mode="RGB").save(args.out, format="PNG")
    return 0


# ---------------------------------------------------------------------- bench


def _stage(fn, items, threads):
    tracemalloc.start()
    t0 = time.perf_counter()
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            out = list(pool.map(fn, items))
    else:
        out = [fn(i) for i in items]
    wall = time.perf_counter() - t0
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return out, {"wall_s": wall, "peak_alloc_mb": peak / 2**20}


def run_bench(corpus, threads: int = 1, params: DecodeParams | None = None) -> dict:
    params = params or DecodeParams()
    corpus = Path(corpus)
    label_dir = corpus / "labels" if (corpus / "labels").is_dir() else corpus
    files = label_files(label_dir) if label_dir.is_dir() else {}
    maps = {k: load_labels(p) for k, p in files.items()}
    stats = {k: scene_statistics(m) for k, m in maps.items()}
    groups: dict[str, list[str]] = {}
    for k in sorted(maps):
        groups.setdefault(stats[k].density_class, []).append(k)

    classes = {}
    for cls in DENSITY_BANDS:
        keys = groups.get(cls, [])
        entry = {"n_images": len(keys), "n_instances": sum(stats[k].n_instances for k in keys)}
        if not keys:
            for stage in ("targets", "decode", "eval"):
                entry[stage] = {"wall_s": 0.0, "peak_alloc_mb": 0.0}
            entry["decode_digest"] = None
            entry["mAP"] = None
            classes[cls] = entry
            continue
        fields, entry["targets"] = _stage(lambda k: compute_flow_targets(maps[k]), keys, threads)
        by_key = dict(zip(keys, fields))
        preds, entry["decode"] = _stage(lambda k: follow_flows(by_key[k], params), keys, threads)
        pred_by_key = dict(zip(keys, preds))
        scores, entry["eval"] = _stage(lambda k: score_image(k, maps[k], pred_by_key[k]), keys, threads)
        h = hashlib.sha256()
        for k, p in zip(keys, preds):
            h.update(k.encode())
            h.update(np.ascontiguousarray(p).tobytes())
        entry["decode_digest"] = h.hexdigest()
        entry["mAP"] = sum(s.ap for s in scores) / len(scores)
        classes[cls] = entry
    return {
        "tool_version": __version__,
        "threads": threads,
        "n_images": len(maps),
        "classes": classes,
        "peak_rss_mb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0,
    }


def cmd_bench(args) -> int:
    threads = _threads(args)
    report = run_bench(args.corpus, threads, _decode_params(args))
    payload = dump_json(report) + "\n"
    if args.report:
        args.report.parent.mkdir(parents=True, exist_ok=True)
        args.report.write_text(payload, encoding="utf-8")
    else:
        sys.stdout.write(payload)
    return 0


# ---------------------------------------------------------------------- main


def _add_decode_flags(p):
    d = DecodeParams()
    p.add_argument("--niter", type=int, default=d.n_iter, help="Euler steps per pixel")
    p.add_argument("--step", type=float, default=d.step_size, help="step length in pixels")
    p.add_argument("--prob-thresh", type=float, default=d.prob_threshold, help="foreground threshold")
    p.add_argument("--sink-bin", type=int, default=d.sink_bin, help="sink clustering cell size")
    p.add_argument("--min-size", type=int, default=d.min_size, help="smallest kept instance (px)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="densflow", description="Flow-based dense instance segmentation toolkit.")
    parser.add_argument("--version", action="version", version=f"densflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def threads_flag(p):
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker threads (default ${THREADS_ENV} or 1)")

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--suite", action="store_true", help="balanced density x morphology x layering suite")
    p.add_argument("--n-per-class", type=int, default=1)
    p.add_argument("--count", type=int, default=1, help="scenes to generate without --suite")
    p.add_argument("--density", choices=list(DENSITY_BANDS), default="sparse")
    p.add_argument("--morphology", choices=MORPHOLOGIES, nargs="+", default=["sphere"],
                   help="one or more morphologies, cycled over --count scenes")
    p.add_argument("--distribution", choices=DISTRIBUTIONS, default="random")
    p.add_argument("--layering", choices=LAYERINGS, default="tiled")
    p.add_argument("--texture", choices=TEXTURES, default="smooth")
    p.add_argument("--polarity", choices=POLARITIES, default="bright_on_dark")
    p.add_argument("--size-law", choices=("lognormal", "uniform", "bimodal"))
    p.add_argument("--size-params", type=float, nargs="+")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--min-area", type=int, default=10)
    threads_flag(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("flows", help="export flow targets for label maps")
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    threads_flag(p)
    p.set_defaults(func=cmd_flows)

    p = sub.add_parser("decode", help="decode UEMF fields into label maps")
    p.add_argument("--fields", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_decode_flags(p)
    threads_flag(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--report", type=Path)
    threads_flag(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render a label map or field to PNG")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("bench", help="time targets/decode/eval over a corpus")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--report", type=Path)
    _add_decode_flags(p)
    threads_flag(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        _log(f"densflow {args.command}: {exc}")
        return 1
    except (DensflowError, OSError, ValueError) as exc:
        _log(f"densflow {args.command}: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
