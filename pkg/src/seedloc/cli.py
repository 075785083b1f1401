"""Command-line front end: ``seedloc <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (a JSON object); explicit flags
override values from the file. The fully resolved configuration is written
as ``<subcommand>.config.json`` next to the outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import preprocess as pp
from .evaluation import DETECTION_THRESHOLD_MM, EvalReport, aggregate, evaluate
from .phantom import PhantomConfig, generate_dataset, read_manifest
from .postprocess import ExtractConfig
from .targetmap import KernelSpec, build_target_map
from .volume_io import FormatError, load_checkpoint, read_points, read_volume, write_detections, write_volume

log = logging.getLogger("seedloc")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _floats(n: int | None = None, kind=float):
    def parse(text: str):
        try:
            vals = tuple(kind(v) for v in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
        if n is not None and len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated values, got {text!r}")
        return vals
    return parse


def _add_common(p: argparse.ArgumentParser, *, seed=False, out=True, jobs=False):
    p.add_argument("--config", type=Path, help="JSON file with default values for this subcommand")
    if seed:
        p.add_argument("--seed", type=int, help="random seed")
    if out:
        p.add_argument("--out", type=Path, help="output directory")
    if jobs:
        p.add_argument("--jobs", type=int, help="volumes processed in parallel")


def _add_preproc(p: argparse.ArgumentParser, center=False):
    if center:
        p.add_argument("--center", type=_floats(3), help="VOI centre x,y,z in mm (default: volume centre)")
    p.add_argument("--voi", type=_floats(3, int), help="VOI shape in voxels, e.g. 128,128,96")
    p.add_argument("--spacing", type=float, help="isotropic resampling spacing in mm")
    p.add_argument("--clamp", type=_floats(2), help="HU clamp window lo,hi")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seedloc", description="Seed localization with a 3D density-regression network.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="subcommand")

    p = sub.add_parser("gen-phantom", help="write a synthetic phantom dataset and manifest")
    _add_common(p, seed=True, jobs=True)
    p.add_argument("--count", type=int, help="number of phantoms (default 1)")
    p.add_argument("--seeds", type=_floats(None, int), help="seeds per phantom: N or MIN,MAX")
    p.add_argument("--shape", type=_floats(3, int), help="volume shape in voxels")

    p = sub.add_parser("make-targets", help="build probability maps from annotations")
    _add_common(p, jobs=True)
    p.add_argument("manifest", type=Path, help="dataset manifest or directory")
    p.add_argument("--scale", type=float, help="map scale factor (default 1)")
    p.add_argument("--sigma", type=_floats(3), help="kernel sigma x,y,z in mm")
    p.add_argument("--spacing", type=float, help="resample the grid to this spacing first")

    p = sub.add_parser("train", help="train the network on a dataset manifest")
    _add_common(p, seed=True)
    p.add_argument("manifest", type=Path, help="dataset manifest or directory")
    _add_preproc(p)
    p.add_argument("--rounds", type=int, help="maximum training rounds")
    p.add_argument("--scale", type=float, help="target map scale")
    p.add_argument("--weight-floor", type=float, help="additive loss weight floor")

    p = sub.add_parser("infer", help="detect seeds in volumes")
    _add_common(p, jobs=True)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("inputs", nargs="+", type=Path, help="volume headers or dataset manifests")
    _add_preproc(p, center=True)
    p.add_argument("--save-maps", action="store_true", help="also write predicted probability maps")

    p = sub.add_parser("evaluate", help="score detections against ground truth")
    _add_common(p)
    p.add_argument("gt", type=Path, help="annotation file, or a manifest to pair with --det")
    p.add_argument("det", type=Path, help="detection file, or a directory of <name>.det.json")
    p.add_argument("--threshold-mm", type=float, help="detection distance threshold")

    p = sub.add_parser("gradcheck", help="finite-difference check of the network gradients")
    _add_common(p, seed=True)
    p.add_argument("--tolerance", type=float, help="maximum accepted relative error")

    p = sub.add_parser("report", help="aggregate evaluation reports into CSV and a table")
    _add_common(p)
    p.add_argument("reports", nargs="+", type=Path, help="report JSON files or directories")
    p.add_argument("--threshold-mm", type=float, help="detection distance threshold")
    return parser


def _resolve(args, defaults: dict, flag_map: dict) -> dict:
    """defaults < config file < explicit flags."""
    cfg = dict(defaults)
    if args.config is not None:
        loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(loaded, dict):
            raise ValueError(f"{args.config}: config must be a JSON object")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ValueError(f"{args.config}: unknown config keys {sorted(unknown)}")
        cfg.update(loaded)
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            cfg[key] = list(v) if isinstance(v, tuple) else v
    return cfg


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    return v


def _save_config(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps({k: _jsonable(v) for k, v in cfg.items()}, indent=2, sort_keys=True)
    (out / f"{command}.config.json").write_text(text + "\n", encoding="utf-8")


def _require_out(cfg: dict) -> Path:
    if not cfg.get("out"):
        raise ValueError("--out is required")
    return Path(cfg["out"])


def _map(fn, items, jobs: int):
    if jobs and jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def cmd_gen_phantom(args) -> int:
    defaults = {**PhantomConfig().to_dict(), "count": 1, "out": None, "jobs": 1}
    cfg = _resolve(args, defaults, {"seed": "rng_seed", "count": "count", "out": "out",
                                    "jobs": "jobs", "shape": "shape"})
    if args.seeds is not None:
        if len(args.seeds) not in (1, 2):
            raise ValueError("--seeds takes N or MIN,MAX")
        cfg["seed_count"] = args.seeds[0]
        cfg["seed_count_max"] = args.seeds[-1] if len(args.seeds) == 2 else None
    out = _require_out(cfg)
    pcfg = PhantomConfig.from_dict(cfg)
    _save_config(out, "gen-phantom", cfg)
    rows = generate_dataset(pcfg, int(cfg["count"]), out, jobs=int(cfg["jobs"]))
    print(f"wrote {len(rows)} phantom(s) to {out}")
    return EXIT_OK


def cmd_make_targets(args) -> int:
    defaults = {"manifest": None, "out": None, "scale": 1.0, "sigma_mm": [1.0, 1.0, 2.0],
                "spacing_mm": None, "jobs": 1}
    cfg = _resolve(args, defaults, {"manifest": "manifest", "out": "out", "scale": "scale",
                                    "sigma": "sigma_mm", "spacing": "spacing_mm", "jobs": "jobs"})
    out = _require_out(cfg)
    _, rows = read_manifest(cfg["manifest"])
    spec = KernelSpec(tuple(cfg["sigma_mm"]))
    _save_config(out, "make-targets", cfg)

    def one(row):
        vol = read_volume(row["volume_path"])
        if cfg["spacing_mm"]:
            vol = pp.resample_trilinear(vol, float(cfg["spacing_mm"]))
        ann = read_points(row["annotation_path"])
        name = Path(row["volume_path"]).name.removesuffix(".vol.json")
        write_volume(build_target_map(vol, ann, spec, float(cfg["scale"])), out / f"{name}.target")
        return name

    names = _map(one, rows, int(cfg["jobs"]))
    print(f"wrote {len(names)} target map(s) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .net.model import ArchConfig
    from .net.train import TrainConfig, train, write_training_outputs

    defaults = {**TrainConfig().to_dict(), "levels": 3, "base_channels": 16, "softplus_beta": 1.0,
                "manifest": None, "out": None}
    cfg = _resolve(args, defaults, {"manifest": "manifest", "out": "out", "seed": "rng_seed",
                                    "voi": "voi_shape", "spacing": "voi_spacing_mm", "clamp": "clamp",
                                    "rounds": "max_rounds", "scale": "target_scale",
                                    "weight_floor": "weight_floor"})
    out = _require_out(cfg)
    if cfg["manifest"] is None:
        raise ValueError("a dataset manifest is required")
    tcfg = TrainConfig.from_dict(cfg)
    arch = ArchConfig(levels=int(cfg["levels"]), base_channels=int(cfg["base_channels"]),
                      softplus_beta=float(cfg["softplus_beta"]))
    arch.check_input_shape(tcfg.voi_shape)
    _, rows = read_manifest(cfg["manifest"])
    if not rows:
        raise ValueError("the manifest lists 0 training volumes")
    _save_config(out, "train", cfg)
    t0 = time.perf_counter()
    result = train(cfg["manifest"], arch, tcfg)
    ckpt = write_training_outputs(result, out)
    print(f"trained {len(result.history)} round(s), best round {result.best_round}, "
          f"{time.perf_counter() - t0:.1f}s; checkpoint {ckpt}")
    return EXIT_OK


def _inference_inputs(paths) -> list[Path]:
    vols = []
    for p in paths:
        if p.is_dir() or p.name.endswith("dataset.json") or (p.suffix == ".json" and not p.name.endswith(".vol.json")):
            _, rows = read_manifest(p)
            vols.extend(Path(r["volume_path"]) for r in rows)
        else:
            vols.append(p)
    return vols


def cmd_infer(args) -> int:
    from .net.model import NetworkParams
    from .pipeline import infer_volume

    defaults = {"checkpoint": None, "inputs": [], "out": None, "center": None, "voi": None,
                "spacing": None, "clamp": None, "save_maps": False, "jobs": 1,
                "threshold_fraction": ExtractConfig().threshold_fraction,
                "min_basin_mass_fraction": ExtractConfig().min_basin_mass_fraction}
    cfg = _resolve(args, defaults, {"checkpoint": "checkpoint", "inputs": "inputs", "out": "out",
                                    "center": "center", "voi": "voi", "spacing": "spacing",
                                    "clamp": "clamp", "jobs": "jobs"})
    if args.save_maps:
        cfg["save_maps"] = True
    out = _require_out(cfg)
    net = NetworkParams.from_checkpoint(load_checkpoint(cfg["checkpoint"]))
    vols = _inference_inputs([Path(p) for p in cfg["inputs"]])
    extract = ExtractConfig(threshold_fraction=float(cfg["threshold_fraction"]),
                            min_basin_mass_fraction=float(cfg["min_basin_mass_fraction"]))
    _save_config(out, "infer", cfg)

    def one(path: Path):
        vol = read_volume(path)
        res = infer_volume(net, vol, center_mm=cfg["center"], voi_shape=cfg["voi"],
                           spacing_mm=cfg["spacing"], clamp=cfg["clamp"], extract=extract)
        name = path.name.removesuffix(".vol.json")
        write_detections(res.detections, out / name)
        if cfg["save_maps"]:
            write_volume(res.prob_map, out / f"{name}.map")
        return name, len(res.detections), res.seconds

    results = _map(one, vols, int(cfg["jobs"]))
    for name, n, secs in results:
        print(f"{name}: {n} seed(s) in {secs:.2f} s")
    if results:
        print(f"mean inference time {sum(r[2] for r in results) / len(results):.2f} s per volume")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    defaults = {"gt": None, "det": None, "out": None, "threshold_mm": DETECTION_THRESHOLD_MM}
    cfg = _resolve(args, defaults, {"gt": "gt", "det": "det", "out": "out", "threshold_mm": "threshold_mm"})
    gt, det = Path(cfg["gt"]), Path(cfg["det"])
    thr = float(cfg["threshold_mm"])
    if gt.name.endswith(".pts.json") or gt.name.endswith(".det.json"):
        pairs = [(gt.name.removesuffix(".pts.json").removesuffix(".det.json"), gt, det)]
    else:
        _, rows = read_manifest(gt)
        pairs = []
        for r in rows:
            name = Path(r["volume_path"]).name.removesuffix(".vol.json")
            pairs.append((name, Path(r["annotation_path"]), det / f"{name}.det.json"))
    out = Path(cfg["out"]) if cfg["out"] else None
    if out is not None:
        _save_config(out, "evaluate", cfg)
    reports = []
    for name, g, d in pairs:
        rep = evaluate(read_points(g), read_points(d), thr)
        reports.append(rep)
        if out is not None:
            rep.write(out / f"{name}.eval.json")
        print(f"{name}: detected {rep.detected_count}/{rep.gt_count} "
              f"(rate {rep.detection_rate:.4f}), median {_fmt(rep.distance_median)} mm")
    if len(reports) > 1:
        summary = aggregate(reports, thr)
        print(f"overall: detected {summary['detected_count']}/{summary['gt_count']} "
              f"(rate {summary['detection_rate']:.4f}), median {_fmt(summary.get('distance_median'))} mm")
    return EXIT_OK


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.3f}"


def cmd_gradcheck(args) -> int:
    from .net.gradcheck import conv_layer_check, gradient_check

    defaults = {"rng_seed": 0, "tolerance": 1e-5, "layer_tolerance": 1e-6, "out": None}
    cfg = _resolve(args, defaults, {"seed": "rng_seed", "tolerance": "tolerance", "out": "out"})
    t0 = time.perf_counter()
    rep = gradient_check(rng_seed=int(cfg["rng_seed"]))
    conv = conv_layer_check(rng_seed=int(cfg["rng_seed"]))
    tconv = conv_layer_check(transpose=True, rng_seed=int(cfg["rng_seed"]))
    for line in rep.lines():
        print(line)
    print(f"network max relative error {rep.max_relative_error:.3e} (worst: {rep.worst})")
    print(f"conv layer {conv.max_relative_error:.3e}, transpose conv layer {tconv.max_relative_error:.3e}")
    print(f"{time.perf_counter() - t0:.1f}s")
    if cfg["out"]:
        out = Path(cfg["out"])
        _save_config(out, "gradcheck", cfg)
        (out / "gradcheck.json").write_text(json.dumps(
            {"network": rep.errors, "conv": conv.errors, "transpose_conv": tconv.errors}, indent=2) + "\n")
    ok = (rep.max_relative_error < cfg["tolerance"]
          and max(conv.max_relative_error, tconv.max_relative_error) < cfg["layer_tolerance"])
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_RUNTIME


def _load_report(path: Path) -> EvalReport:
    d = json.loads(path.read_text(encoding="utf-8"))
    d["pairs"] = [tuple(p) for p in d.get("pairs", [])]
    return EvalReport(**{k: v for k, v in d.items() if k in EvalReport.__dataclass_fields__})


def cmd_report(args) -> int:
    defaults = {"reports": [], "out": None, "threshold_mm": DETECTION_THRESHOLD_MM}
    cfg = _resolve(args, defaults, {"reports": "reports", "out": "out", "threshold_mm": "threshold_mm"})
    out = _require_out(cfg)
    files: list[Path] = []
    for p in map(Path, cfg["reports"]):
        files.extend(sorted(p.glob("*.eval.json")) if p.is_dir() else [p])
    if not files:
        raise ValueError("no evaluation reports found")
    names = [f.name.removesuffix(".json").removesuffix(".eval") for f in files]
    reports = [_load_report(f) for f in files]
    thr = float(cfg["threshold_mm"])
    # re-threshold from the stored pairs so one report can be read at any distance
    reports = [evaluate_from_pairs(r, thr) for r in reports]
    summary = aggregate(reports, thr)
    _save_config(out, "report", cfg)
    header = ["volume", "gt_count", "det_count", "detected", "rate", "q25_mm", "median_mm", "q75_mm"]
    rows = [[n, r.gt_count, r.det_count, r.detected_count, r.detection_rate,
             r.distance_q25, r.distance_median, r.distance_q75] for n, r in zip(names, reports)]
    total = ["TOTAL", summary["gt_count"], sum(r.det_count for r in reports), summary["detected_count"],
             summary["detection_rate"], summary.get("distance_q25"), summary.get("distance_median"),
             summary.get("distance_q75")]
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows + [total]:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    table = _table(header, rows, total)
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def evaluate_from_pairs(rep: EvalReport, threshold_mm: float) -> EvalReport:
    from .evaluation import detection_metrics
    return detection_metrics(rep.pairs, rep.gt_count, threshold_mm, det_count=rep.det_count)


def _table(header, rows, total) -> str:
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.3f}"
        return str(v)
    body = [[cell(v) for v in r] for r in rows + [total]]
    widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(header)]
    line = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    sep = "-" * len(line(header))
    return "\n".join([line(header), sep, *(line(r) for r in body[:-1]), sep, line(body[-1])])


COMMANDS = {
    "gen-phantom": cmd_gen_phantom,
    "make-targets": cmd_make_targets,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, FormatError, FileNotFoundError, json.JSONDecodeError, TypeError) as exc:
        print(f"seedloc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"seedloc {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
