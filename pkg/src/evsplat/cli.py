"""Operator surface: generate synthetic data, simulate events, map exposure
events to frames, train, render, and evaluate.

Config files use JSON; ``--set key=value`` overrides (dotted paths) win over
file values.  Exit codes: 0 success, 1 runtime failure, 2 usage or config
errors.  Concurrent runs on one output directory are refused via a lock file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import dataset as dio
from .camera import pose_at_time
from .events import EventModelConfig, simulate_motion_events
from .exposure import TransmittanceProfile, extract_ipe, map_temporal_to_intensity
from .metrics import MetricReport, psnr, ssim
from .render import render, render_depth
from .scene import load_scene, save_scene
from .training import (DensifyConfig, SamplerConfig, TrainConfig, TrainData, train)

THREADS_ENV = "EVSPLAT_THREADS"

_SCHEMAS = {
    "make-synthetic": {"resolution", "frames", "stops", "span", "turns", "radius",
                       "height", "focal", "background", "exposure_t_end", "levels",
                       "exposure_contrast", "motion_contrast", "gamma",
                       "init_points", "init_noise", "seed"},
    "simulate": {"frames_dir", "timestamps_us", "interval_us",
                 "contrast_threshold", "gamma", "output"},
    "map-exposure": {"events", "t_open_us", "profile", "contrast",
                     "clip_percentile", "output"},
    "train": {"iterations", "warmup_iters", "lr_initial", "seed", "log_interval",
              "eval_interval", "densify", "sampler", "init", "event"},
    "render": set(),
    "eval": set(),
}


@dataclass
class Command:
    subcommand: str
    config: dict = field(default_factory=dict)
    out: str = "."
    seed: int = 0
    data: str | None = None
    checkpoint: str | None = None
    mode: str | None = None
    frame: int | None = None
    split: str = "both"
    depth: bool = False


def _parse_override(text: str):
    if "=" not in text:
        raise ValueError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _apply_override(config: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = config
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValueError(f"override path {dotted!r} crosses a non-object value")
    node[parts[-1]] = value


def _validate_keys(config: dict, allowed: set, where: str) -> None:
    unknown = set(config) - allowed
    if unknown:
        raise ValueError(f"unknown config keys in {where}: {sorted(unknown)}")


def parse_args(argv) -> Command:
    parser = argparse.ArgumentParser(
        prog="evsplat",
        description="Event-based Gaussian splatting: simulation, training, evaluation.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override")
        p.add_argument("--out", default=("." if not out_required else None),
                       required=out_required, help="output directory")
        p.add_argument("--seed", type=int, default=0)

    common(sub.add_parser("make-synthetic", help="generate a synthetic turntable dataset"))
    common(sub.add_parser("simulate", help="simulate motion events from frames"))
    common(sub.add_parser("map-exposure", help="map exposure events to a grayscale frame"))

    p_train = sub.add_parser("train", help="optimize a scene from a dataset")
    common(p_train)
    p_train.add_argument("--data", required=True, help="dataset directory")
    p_train.add_argument("--mode", required=True, choices=["fast", "hq", "hybrid"])

    p_render = sub.add_parser("render", help="render one frame from a checkpoint")
    common(p_render)
    p_render.add_argument("--data", required=True)
    p_render.add_argument("--checkpoint", required=True)
    p_render.add_argument("--frame", type=int, required=True)
    p_render.add_argument("--depth", action="store_true")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint against a dataset split")
    common(p_eval)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", choices=["given", "novel", "both"], default="both")

    args = parser.parse_args(argv)
    config = {}
    if args.config:
        try:
            with open(args.config) as f:
                config = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"unreadable config {args.config!r}: {exc}")
    try:
        for item in args.overrides:
            key, value = _parse_override(item)
            _apply_override(config, key, value)
        _validate_keys(config, _SCHEMAS[args.subcommand], args.subcommand)
    except ValueError as exc:
        parser.error(str(exc))

    return Command(
        subcommand=args.subcommand, config=config, out=args.out, seed=args.seed,
        data=getattr(args, "data", None), checkpoint=getattr(args, "checkpoint", None),
        mode=getattr(args, "mode", None), frame=getattr(args, "frame", None),
        split=getattr(args, "split", "both"), depth=getattr(args, "depth", False))


class _OutputLock:
    """Refuses concurrent subcommands on one output directory."""

    def __init__(self, out_dir: str):
        self.path = os.path.join(out_dir, ".evsplat.lock")
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"output directory is locked by another run: {self.path}")
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            os.unlink(self.path)
        return False


def _effective_seed(cmd: Command) -> int:
    return int(cmd.config.get("seed", cmd.seed))


def _run_make_synthetic(cmd: Command) -> int:
    cfg = dict(cmd.config)
    cfg.setdefault("seed", cmd.seed)
    if "resolution" in cfg:
        cfg["resolution"] = tuple(cfg["resolution"])
    spec = dio.SyntheticSceneSpec(**cfg)
    ds = dio.generate_synthetic_scene(spec)
    dio.write_dataset(cmd.out, ds)
    print(f"wrote synthetic dataset to {cmd.out} "
          f"({len(ds.events)} events, {len(ds.exposure_frames)} exposure stops)")
    return 0


def _run_simulate(cmd: Command) -> int:
    cfg = cmd.config
    frames_dir = cfg["frames_dir"]
    names = sorted(fn for fn in os.listdir(frames_dir) if fn.endswith(".pnm"))
    if len(names) < 2:
        raise RuntimeError("need at least two .pnm frames")
    images = [dio.read_pnm(os.path.join(frames_dir, fn)) for fn in names]
    if "timestamps_us" in cfg:
        times = [int(t) for t in cfg["timestamps_us"]]
        if len(times) != len(images):
            raise RuntimeError("timestamps_us length must match the frame count")
    else:
        step = int(cfg.get("interval_us", 10_000))
        times = [i * step for i in range(len(images))]
    ecfg = EventModelConfig(contrast_threshold=float(cfg.get("contrast_threshold", 0.1)),
                            gamma=float(cfg.get("gamma", 2.2)))
    stream = simulate_motion_events(list(zip(times, images)), ecfg)
    out_path = os.path.join(cmd.out, cfg.get("output", "events.evt1"))
    dio.write_events(out_path, stream)
    print(f"wrote {len(stream)} events to {out_path}")
    return 0


def _profile_from_config(doc: dict | None) -> TransmittanceProfile:
    doc = doc or {}
    kind = doc.get("kind", "linear")
    t_end = float(doc.get("t_end", 1.0))
    samples = np.array(doc["samples"], dtype=np.float64) if "samples" in doc else None
    return TransmittanceProfile(kind=kind, t_end=t_end, samples=samples)


def _run_map_exposure(cmd: Command) -> int:
    cfg = cmd.config
    stream = dio.read_events(cfg["events"])
    profile = _profile_from_config(cfg.get("profile"))
    tm = extract_ipe(stream, int(cfg.get("t_open_us", 0)))
    frame = map_temporal_to_intensity(tm, profile, float(cfg.get("contrast", 0.1)),
                                      clip_percentile=cfg.get("clip_percentile"))
    out_path = os.path.join(cmd.out, cfg.get("output", "frame.pnm"))
    dio.write_pnm(out_path, frame.image)
    print(f"wrote mapped exposure frame to {out_path}")
    return 0


def make_train_data(loaded: dio.LoadedDataset, init_scene, event_cfg=None) -> TrainData:
    """Assemble loop inputs from a dataset directory: training uses the given
    split (exposure frames), evaluation the novel split (ground-truth frames
    when present, mapped exposure frames otherwise)."""
    manifest = loaded.manifest
    given = set(manifest.split.get("given", []))
    novel = manifest.split.get("novel", [])
    frames = [f for f in loaded.exposure_frames if f.pose_id in given]
    gt = loaded.gt_frames
    if gt:
        eval_frames = [(k, gt[k]) for k in novel if k in gt]
    else:
        eval_frames = [(f.pose_id, f.image) for f in loaded.exposure_frames
                       if f.pose_id in set(novel)]
    traj = loaded.trajectory
    extent = getattr(traj, "radius", None)
    span = getattr(traj, "span", loaded.pose_times[-1] if loaded.pose_times else 1.0)
    return TrainData(
        trajectory=traj, span=float(span), init_scene=init_scene,
        events=loaded.events, exposure_frames=frames,
        pose_times=loaded.pose_times, eval_frames=eval_frames,
        event_config=event_cfg or EventModelConfig(),
        scene_extent=extent)


def _train_config_from_dict(cfg: dict, mode: str, seed: int) -> TrainConfig:
    dens = DensifyConfig(**cfg.get("densify", {}))
    samp = SamplerConfig(**cfg.get("sampler", {}))
    return TrainConfig(
        mode=mode,
        iterations=cfg.get("iterations"),
        warmup_iters=int(cfg.get("warmup_iters", 500)),
        lr_initial=cfg.get("lr_initial"),
        densify=dens, sampler=samp,
        seed=int(cfg.get("seed", seed)),
        log_interval=int(cfg.get("log_interval", 100)),
        eval_interval=int(cfg.get("eval_interval", 0)))


def _run_train(cmd: Command) -> int:
    loaded = dio.load_dataset(cmd.data)
    cfg = cmd.config
    seed = _effective_seed(cmd)
    init_cfg = cfg.get("init", {})
    rng = np.random.default_rng(seed)
    background = init_cfg.get("background")
    if background is None:
        background = loaded.manifest.background
    background = 0.5 if background is None else float(background)
    if init_cfg.get("mode", "ply") == "random":
        bbox = init_cfg.get("bbox", [[-0.8, -0.8, -0.8], [0.8, 0.8, 0.8]])
        init_scene = dio.init_point_cloud("random", n=int(init_cfg.get("n", 200)),
                                          bbox=bbox, rng=rng, background=background)
    else:
        if loaded.init_cloud is None:
            raise RuntimeError("dataset has no init_points.ply; use init.mode=random")
        init_scene = dio.init_point_cloud("ply", cloud=loaded.init_cloud,
                                          background=background)
    event_cfg = EventModelConfig(**cfg.get("event", {}))
    data = make_train_data(loaded, init_scene, event_cfg)
    tcfg = _train_config_from_dict(cfg, cmd.mode, seed)

    scene, log = train(data, tcfg)
    save_scene(os.path.join(cmd.out, "scene.egs"), scene)
    with open(os.path.join(cmd.out, "train_log.jsonl"), "w") as f:
        for rec in log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    final = log[-1]
    print(f"trained {cmd.mode} for {final['iterations']} iterations, "
          f"{final['count']} Gaussians"
          + (f", held-out PSNR {final['psnr_eval']:.2f} dB" if "psnr_eval" in final else ""))
    return 0


def _run_render(cmd: Command) -> int:
    scene = load_scene(cmd.checkpoint)
    loaded = dio.load_dataset(cmd.data)
    if not 0 <= cmd.frame < len(loaded.pose_times):
        raise RuntimeError(f"frame {cmd.frame} outside pose table")
    cam = pose_at_time(loaded.trajectory, loaded.pose_times[cmd.frame])
    out = render(scene, cam)
    img_path = os.path.join(cmd.out, f"render_{cmd.frame:03d}.pnm")
    dio.write_pnm(img_path, out.image)
    written = [img_path]
    if cmd.depth:
        depth = render_depth(scene, cam)
        peak = depth.max()
        depth_path = os.path.join(cmd.out, f"depth_{cmd.frame:03d}.pnm")
        dio.write_pnm(depth_path, depth / peak if peak > 0 else depth)
        written.append(depth_path)
    print("wrote " + ", ".join(written))
    return 0


def _run_eval(cmd: Command) -> int:
    scene = load_scene(cmd.checkpoint)
    loaded = dio.load_dataset(cmd.data)
    manifest = loaded.manifest
    gt = loaded.gt_frames
    if not gt:
        gt = {f.pose_id: f.image for f in loaded.exposure_frames}
    splits = ["given", "novel"] if cmd.split == "both" else [cmd.split]
    report_doc = {}
    for name in splits:
        ids = manifest.split.get(name, [])
        rep = MetricReport()
        for pose_id in ids:
            if pose_id not in gt:
                continue
            cam = pose_at_time(loaded.trajectory, loaded.pose_times[pose_id])
            img = render(scene, cam).image
            rep.add(pose_id, psnr(img, gt[pose_id]), ssim(img, gt[pose_id]))
        print(f"split {name}:")
        print(rep.table())
        report_doc[name] = json.loads(rep.to_json())
    with open(os.path.join(cmd.out, "report.json"), "w") as f:
        json.dump(report_doc, f, indent=2, sort_keys=True)
        f.write("\n")
    return 0


_RUNNERS = {
    "make-synthetic": _run_make_synthetic,
    "simulate": _run_simulate,
    "map-exposure": _run_map_exposure,
    "train": _run_train,
    "render": _run_render,
    "eval": _run_eval,
}


def run(cmd: Command) -> int:
    """Execute a parsed command; 0 on success, 1 on runtime failure."""
    threads = os.environ.get(THREADS_ENV)
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    try:
        os.makedirs(cmd.out, exist_ok=True)
        with _OutputLock(cmd.out):
            return _RUNNERS[cmd.subcommand](cmd)
    except (RuntimeError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(parse_args(sys.argv[1:])))


if __name__ == "__main__":
    main()
