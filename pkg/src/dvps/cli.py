"""Command-line entry point: ``dvps <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or
integrity error, 3 numeric failure.

Environment: ``DVPS_THREADS`` caps BLAS threads, ``DVPS_LOG_LEVEL`` sets
the log level (default WARNING).
"""
from __future__ import annotations

import os

if os.environ.get("DVPS_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["DVPS_THREADS"])

import argparse  # noqa: E402
import copy  # noqa: E402
import datetime  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import formats  # noqa: E402
from .datamodel import STAGES, FuseConfig  # noqa: E402
from .errors import ConfigError, FormatError, IntegrityError  # noqa: E402
from .metrics import MetricReport, evaluate  # noqa: E402
from .model import ModelConfig, load_model, save_model  # noqa: E402
from .numerics import NumericError  # noqa: E402
from .pipeline import predict  # noqa: E402
from .synth import IS_THING, SceneConfig, child_rng, make_video, quantize, scene_for  # noqa: E402
from .training import (AdamW, TrainConfig, Video, default_refiner_config, default_tracker_config,  # noqa: E402
                       initial_refiner, initial_tracker, train_refiner, train_tracker)

log = logging.getLogger("dvps")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

MANIFEST = "manifest.json"
SELFCHECK_FAULT_ENV = "DVPS_SELFCHECK_FAULT"


class UsageError(Exception):
    pass


def _without_seed(d: dict) -> dict:
    return {k: v for k, v in d.items() if k != "seed"}


def default_config() -> dict:
    return {
        "seed": 0,
        "videos": 10,
        "scene": _without_seed(SceneConfig().to_dict()),
        "model": ModelConfig().to_dict(),
        "tracker_train": _without_seed(default_tracker_config().to_dict()),
        "refiner_train": _without_seed(default_refiner_config().to_dict()),
        "fuse": {"object_threshold": FuseConfig().object_threshold,
                 "overlap_threshold": FuseConfig().overlap_threshold},
        "infer": {"stage": "refiner", "scales": []},
    }


def _merge(base: dict, update: dict, path: str = "") -> None:
    for k, v in update.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            _merge(base[k], v, where + ".")
        else:
            base[k] = v


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(path: str | None, overrides: list[str]) -> dict:
    """Defaults, then the JSON file, then ``--set dotted.key=value`` overrides."""
    cfg = default_config()
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        _merge(cfg, loaded)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        update: dict = {}
        node = update
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(raw)
        _merge(cfg, update)
    # validate every section eagerly
    scene_config(cfg)
    ModelConfig.from_dict(cfg["model"])
    train_config(cfg, "tracker_train")
    train_config(cfg, "refiner_train")
    FuseConfig(**cfg["fuse"])
    if cfg["infer"]["stage"] not in STAGES:
        raise ConfigError(f"infer.stage must be one of {', '.join(STAGES)}")
    return cfg


def scene_config(cfg: dict) -> SceneConfig:
    return SceneConfig.from_dict(dict(cfg["scene"], seed=int(cfg["seed"])))


def train_config(cfg: dict, section: str) -> TrainConfig:
    return TrainConfig.from_dict(dict(cfg[section], seed=int(cfg["seed"])))


def _echo(cfg: dict) -> None:
    print(f"seed: {cfg['seed']}", file=sys.stderr)
    print("resolved config: " + json.dumps(cfg, sort_keys=True), file=sys.stderr)


def _sidecar(out: Path, command: str) -> None:
    """Timestamps live only here so every other artifact is reproducible."""
    out.mkdir(parents=True, exist_ok=True)
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
    with open(out / "run.log", "a") as fh:
        fh.write(f"{stamp} {command}\n")


def _write_json(path: Path, obj) -> None:
    formats._write_atomic(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


# datasets

def video_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in child_rng(seed, "data").integers(0, 2**31 - 1, size=count)]


def cmd_gen_data(args, cfg) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = scene_config(cfg)
    entries = []
    for i, vseed in enumerate(video_seeds(int(cfg["seed"]), int(cfg["videos"]))):
        name = f"video{i:04d}"
        scene = scene_for(base, vseed)
        clip, gt, queries = make_video(scene)
        vdir = out / name
        vdir.mkdir(exist_ok=True)
        formats.save_clip(vdir / "clip.bin", clip)
        formats.save_queries(vdir / "queries.bin", queries)
        formats.save_annotation(vdir, "gt", gt)
        _write_json(vdir / "meta.json", {"name": name, "seed": vseed, "scene": scene.to_dict()})
        entries.append({"name": name, "seed": vseed})
    _write_json(out / MANIFEST, {"seed": int(cfg["seed"]), "scene": _without_seed(base.to_dict()),
                                 "videos": entries})
    _sidecar(out, "gen-data")
    print(f"wrote {len(entries)} videos to {out}")


def _manifest(data: Path) -> list[str]:
    path = data / MANIFEST
    if not path.is_file():
        raise IntegrityError(f"{data} has no {MANIFEST}; generate it with `dvps gen-data`")
    try:
        return [e["name"] for e in json.loads(path.read_text())["videos"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed dataset manifest {path}: {exc}") from exc


def load_dataset(data) -> list[Video]:
    data = Path(data)
    videos = []
    for name in _manifest(data):
        vdir = data / name
        videos.append(Video(name, formats.load_clip(vdir / "clip.bin"),
                            formats.load_annotation(vdir / "gt.json"),
                            formats.load_queries(vdir / "queries.bin")))
    return videos


# training

def _write_curve(path: Path, curve) -> None:
    lines = ["iteration,loss,lr"] + [f"{int(i)},{l!r},{r!r}" for i, l, r in curve]
    formats._write_atomic(path, ("\n".join(lines) + "\n").encode())


def _train_extra(result, curve) -> dict:
    extra = dict(result.optimizer.state())
    extra["meta.train.iteration"] = np.array(float(result.iteration))
    extra["meta.train.curve"] = np.array(curve, dtype=np.float64).reshape(-1, 3)
    return extra


def _resume(path, prefix: str, tcfg: TrainConfig):
    params, model, extra = load_model(path, prefix)
    opt = AdamW(tcfg, {k: v for k, v in extra.items() if k.startswith("opt.")})
    start = int(extra.get("meta.train.iteration", 0))
    curve = [tuple(r) for r in extra.get("meta.train.curve", np.zeros((0, 3))).tolist()]
    return params, model, opt, start, curve


def _run_training(args, cfg, stage: str) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = train_config(cfg, f"{stage}_train")
    videos = load_dataset(args.data)
    tracker_params = None
    if stage == "refiner":
        if not args.tracker or not Path(args.tracker).is_file():
            raise IntegrityError(f"refiner training needs a tracker checkpoint; {args.tracker!r} not found")
        tracker_params, model, _ = load_model(args.tracker, "tracker")
    else:
        model = ModelConfig.from_dict(cfg["model"])
    if args.resume:
        params, ckpt_model, opt, start, curve = _resume(args.resume, stage, tcfg)
        if ckpt_model != model:
            raise ConfigError(f"{args.resume} was trained with a different model config")
    else:
        rng = child_rng(int(cfg["seed"]), "init", stage)
        if stage == "tracker":
            params = initial_tracker(model, videos, rng, tcfg.warm_start)
        else:
            params = initial_refiner(model, tracker_params, rng, tcfg.warm_start)
        opt, start, curve = None, 0, []
    if stage == "tracker":
        result = train_tracker(videos, params, model, tcfg, optimizer=opt, start=start, stop=args.stop_at)
    else:
        result = train_refiner(videos, params, tracker_params, model, tcfg, optimizer=opt, start=start,
                               stop=args.stop_at)
    curve = curve + [tuple(c) for c in result.curve]
    save_model(out / f"{stage}.ckpt", result.params, model, _train_extra(result, curve))
    _write_curve(out / f"{stage}_loss.csv", curve)
    _sidecar(out, f"train-{stage}")
    last = f", final loss {curve[-1][1]:.4f}" if curve else ""
    print(f"{stage}: trained to iteration {result.iteration}{last}; checkpoint {out / f'{stage}.ckpt'}")


def cmd_train_tracker(args, cfg) -> None:
    _run_training(args, cfg, "tracker")


def cmd_train_refiner(args, cfg) -> None:
    _run_training(args, cfg, "refiner")


# inference / evaluation / visualization

def cmd_infer(args, cfg) -> None:
    stage = args.stage or cfg["infer"]["stage"]
    scales = [int(s) for s in args.scales.split(",")] if args.scales else list(cfg["infer"]["scales"])
    tracker = refiner = model = None
    if stage in ("tracker", "refiner"):
        if not args.tracker:
            raise UsageError(f"--stage {stage} needs --tracker")
        tracker, model, _ = load_model(args.tracker, "tracker")
    if stage == "refiner":
        if not args.refiner:
            raise UsageError("--stage refiner needs --refiner")
        refiner, rmodel, _ = load_model(args.refiner, "refiner")
        if rmodel != model:
            raise IntegrityError("tracker and refiner checkpoints disagree on the model config")
    if stage == "prematch" and (args.tracker or args.refiner):
        raise UsageError("--stage prematch takes no checkpoints")
    fuse = FuseConfig(**cfg["fuse"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for v in load_dataset(args.data):
        pred = predict(v.queries, v.clip, stage, IS_THING, tracker=tracker, refiner=refiner, model=model,
                       scales=scales or None, fuse=fuse)
        formats.save_annotation(out / v.name, "pred", pred)
        names.append(v.name)
    _write_json(out / MANIFEST, {"stage": stage, "scales": scales, "videos": [{"name": n} for n in names]})
    _sidecar(out, "infer")
    print(f"{stage}: wrote predictions for {len(names)} videos to {out}")


def _video_names(directory: Path) -> list[str]:
    if (directory / MANIFEST).is_file():
        return _manifest(directory)
    return sorted(p.name for p in directory.iterdir() if p.is_dir())


def cmd_eval(args, cfg) -> None:
    out = Path(args.out) if args.out else None
    if args.report:
        try:
            d = json.loads(Path(args.report).read_text())
            report = MetricReport({int(k): float(v) for k, v in d["vpq_per_k"].items()}, float(d["stq"]),
                                  float(d.get("association_accuracy", 0.0)), list(d.get("per_video", [])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed report {args.report}: {exc}") from exc
    else:
        if not args.pred or not args.gt:
            raise UsageError("eval needs --pred and --gt (or --report)")
        pred_dir, gt_dir = Path(args.pred), Path(args.gt)
        gt_names = _video_names(gt_dir)
        pred_names = set(_video_names(pred_dir))
        missing = [n for n in gt_names if n not in pred_names]
        extra = sorted(pred_names - set(gt_names))
        if missing or extra:
            raise IntegrityError(f"video sets differ; missing in predictions: {missing}; "
                                 f"not in ground truth: {extra}")
        triples = [(n, formats.load_annotation(pred_dir / n / "pred.json"),
                    formats.load_annotation(gt_dir / n / "gt.json")) for n in gt_names]
        report = evaluate(triples)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        formats._write_atomic(out / "report.json", report.to_json().encode())
        formats._write_atomic(out / "report.txt", report.to_table().encode())
        _sidecar(out, "eval")
    print(report.to_table(), end="")


def cmd_viz(args, cfg) -> None:
    video = formats.load_annotation(args.video)
    other = formats.load_annotation(args.compare) if args.compare else None
    if other is not None and other.shape != video.shape:
        raise IntegrityError(f"cannot compare extents {video.shape} and {other.shape}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t in range(video.T):
        rgb = formats.render_frame(video.id_maps[t])
        if other is not None:
            gap = np.full((rgb.shape[0], 2, 3), 255, dtype=np.uint8)
            rgb = np.concatenate([rgb, gap, formats.render_frame(other.id_maps[t])], axis=1)
        formats.save_ppm(out / f"frame_{t:04d}.ppm", rgb)
    print(f"wrote {video.T} frames to {out}")


def cmd_selfcheck(args, cfg) -> int:
    from .selfcheck import run_suites

    fault = args.inject_fault or os.environ.get(SELFCHECK_FAULT_ENV)
    results = run_suites(fault=fault)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        print(f"{status}  {r.name:<12} max error {r.max_error:.3e}  (tolerance {r.tolerance:.0e})")
    return EXIT_OK if ok else EXIT_NUMERIC


# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dvps", description="Synthetic video panoptic segmentation toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a dotted config key, value parsed as JSON when possible")
        return sp

    g = with_config(sub.add_parser("gen-data", help="generate a synthetic dataset"))
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    for stage in ("tracker", "refiner"):
        t = with_config(sub.add_parser(f"train-{stage}", help=f"train the {stage}"))
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--resume", help="checkpoint written by an earlier (stopped) run")
        t.add_argument("--stop-at", type=int, help="stop before this iteration (for staged runs)")
        if stage == "refiner":
            t.add_argument("--tracker", required=True, help="frozen tracker checkpoint")
        t.set_defaults(func=cmd_train_tracker if stage == "tracker" else cmd_train_refiner)

    i = with_config(sub.add_parser("infer", help="run the pipeline and write panoptic predictions"))
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--stage", choices=STAGES)
    i.add_argument("--tracker")
    i.add_argument("--refiner")
    i.add_argument("--scales", help="comma-separated short-side resolutions to merge")
    i.set_defaults(func=cmd_infer)

    e = with_config(sub.add_parser("eval", help="score predictions against ground truth"))
    e.add_argument("--pred")
    e.add_argument("--gt")
    e.add_argument("--out")
    e.add_argument("--report", help="re-render an existing report JSON instead of scoring")
    e.set_defaults(func=cmd_eval)

    v = with_config(sub.add_parser("viz", help="render an annotation or prediction as PPM frames"))
    v.add_argument("--video", required=True, help="annotation JSON (gt.json or pred.json)")
    v.add_argument("--compare", help="second annotation drawn to the right")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz)

    s = with_config(sub.add_parser("selfcheck", help="gradient, matching and metric self-tests"))
    s.add_argument("--inject-fault", metavar="SUITE",
                   help=f"test hook: force SUITE to fail (also via ${SELFCHECK_FAULT_ENV})")
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DVPS_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported by the parser
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args.config, args.set)
        _echo(cfg)
        code = args.func(args, copy.deepcopy(cfg))
        return EXIT_OK if code is None else code
    except (ConfigError, UsageError) as exc:
        print(f"dvps: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"dvps: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, IntegrityError, OSError, ValueError) as exc:
        print(f"dvps: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
