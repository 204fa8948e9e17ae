"""Command-line interface: ``sfmnet solve|synth|eval|gradcheck``.

Settings come from defaults, then a JSON ``--config`` file, then flags.
Exit status is 0 on success, 2 for configuration errors (bad flags, missing
or unparseable inputs) and 1 for failures while running.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io as sio
from .geometry import CameraIntrinsics, RigidMotion, rotation_from_sines
from .gradcheck import check_pipeline, check_primitives
from .losses import DepthSupervision, LossWeights, PoseSupervision
from .metrics import EvalReport, endpoint_error, mask_iou, relative_pose_error, scale_invariant_log_rmse
from .solver import SolverConfig, optimize
from .synth import generate_scene, standard_suite

log = logging.getLogger("sfmnet")

IMAGE_SUFFIXES = (".png", ".ppm")
SOLVER_KEYS = {f.name for f in fields(SolverConfig)} - {"weights"}
RUN_KEYS = {"inputs", "scenes", "out", "intrinsics", "intrinsics_pixels", "gt_depth", "gt_pose", "gt_flow",
            "depth_scale", "weights", "pyramid"}
PYRAMID_ON_LEVELS = 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    inputs: list = field(default_factory=list)
    scenes: list = field(default_factory=list)
    out: Path = Path("out")
    intrinsics: CameraIntrinsics | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    gt_depth: Path | None = None
    gt_pose: Path | None = None
    gt_flow: Path | None = None
    depth_scale: float = 1.0 / 1000.0


@dataclass
class Pair:
    name: str
    I_t: np.ndarray
    I_tp1: np.ndarray
    intrinsics: CameraIntrinsics
    out: Path
    supervision: dict = field(default_factory=dict)


# --- configuration -----------------------------------------------------------

def _floats(text, n: int, what: str) -> list[float]:
    parts = text if isinstance(text, (list, tuple)) else str(text).split(",")
    try:
        vals = [float(v) for v in parts]
    except ValueError:
        raise ConfigError(f"{what} must be {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n:
        raise ConfigError(f"{what} must have {n} values, got {len(vals)}")
    return vals


def parse_weights(items) -> dict[str, float]:
    known = {f.name for f in fields(LossWeights)}
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in known:
            raise ConfigError(f"bad weight {item!r}; expected key=value with key in {sorted(known)}")
        try:
            out[key] = float(value)
        except ValueError:
            raise ConfigError(f"weight {key} is not a number: {value!r}") from None
    return out


def _load_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _existing(path) -> Path | None:
    if path is None:
        return None
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"file not found: {path}")
    return path


def build_run_config(args) -> RunConfig:
    raw = _load_json(args.config) if args.config else {}
    unknown = set(raw) - SOLVER_KEYS - RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    solver = {k: raw[k] for k in SOLVER_KEYS & set(raw)}
    weights = dict(raw.get("weights", {}))
    weights.update(parse_weights(["%s=%s" % kv for kv in weights.items()]))
    pyramid = raw.get("pyramid")
    for flag, key in (("seed", "seed"), ("iters", "iterations"), ("k", "k")):
        if getattr(args, flag, None) is not None:
            solver[key] = getattr(args, flag)
    if getattr(args, "weights", None):
        weights.update(parse_weights(args.weights))
    if getattr(args, "pyramid", None) is not None:
        pyramid = args.pyramid
    if pyramid is not None:
        if pyramid not in ("on", "off", True, False):
            raise ConfigError(f"pyramid must be on or off, got {pyramid!r}")
        on = pyramid in ("on", True)
        solver["pyramid_levels"] = max(solver.get("pyramid_levels", 1), PYRAMID_ON_LEVELS) if on else 1
    try:
        solver_cfg = SolverConfig(weights=LossWeights(**weights), **solver)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid solver settings: {err}") from None

    intrinsics = None
    text = getattr(args, "intrinsics", None) or raw.get("intrinsics")
    px = getattr(args, "intrinsics_pixels", None) or raw.get("intrinsics_pixels")
    if text is not None and px is not None:
        raise ConfigError("give intrinsics in normalized or pixel units, not both")
    try:
        if isinstance(text, dict):
            intrinsics = CameraIntrinsics(**text)
        elif text is not None:
            intrinsics = CameraIntrinsics(*_floats(text, 3, "intrinsics"))
        elif px is not None:
            f, cx, cy, w, h = _floats(px, 5, "pixel intrinsics (f,cx,cy,width,height)")
            intrinsics = CameraIntrinsics.from_pixels(f, int(w), cx, cy, int(h))
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid intrinsics: {err}") from None

    def pick(flag, key):
        v = getattr(args, flag, None)
        return v if v is not None else raw.get(key)

    cfg = RunConfig(
        inputs=[Path(p) for p in (getattr(args, "inputs", None) or raw.get("inputs", []))],
        scenes=list(getattr(args, "scene", None) or raw.get("scenes", [])),
        out=Path(pick("out", "out") or "out"),
        intrinsics=intrinsics,
        solver=solver_cfg,
        gt_depth=_existing(pick("gt_depth", "gt_depth")),
        gt_pose=_existing(pick("gt_pose", "gt_pose")),
        gt_flow=_existing(pick("gt_flow", "gt_flow")),
        depth_scale=float(pick("depth_scale", "depth_scale") or 1.0 / 1000.0),
    )
    for p in cfg.inputs:
        _existing(p)
    return cfg


def worker_count(n_jobs: int) -> int:
    env = os.environ.get("SFM_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigError(f"SFM_THREADS must be a positive integer, got {env!r}") from None
        if cap < 1:
            raise ConfigError(f"SFM_THREADS must be a positive integer, got {env!r}")
    return max(1, min(cap, n_jobs))


def run_parallel(fn, jobs: list) -> list:
    """Apply ``fn`` to independent jobs, in order, on at most SFM_THREADS workers."""
    n = worker_count(len(jobs))
    if n == 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))


# --- file helpers ------------------------------------------------------------

def _find(directory: Path, stem: str, suffixes=IMAGE_SUFFIXES) -> Path | None:
    for suf in suffixes:
        p = directory / f"{stem}{suf}"
        if p.exists():
            return p
    return None


def _read_config_input(fn, path, *a):
    try:
        return fn(path, *a)
    except sio.ParseError as err:
        raise ConfigError(f"cannot parse {path}: {err}") from None


def load_pose(path) -> PoseSupervision:
    """Ground-truth camera motion from a motion JSON (``camera`` entry) or ``{"R", "t"}``."""
    data = _read_config_input(lambda p: json.loads(Path(p).read_text()), path)
    if "camera" in data:
        data = data["camera"]
    if "R" in data:
        R = np.asarray(data["R"], dtype=np.float64)
        t = np.asarray(data["t"], dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ConfigError(f"pose in {path} needs a 3x3 R and a 3-vector t")
        return PoseSupervision(R, t)
    m = RigidMotion.from_dict(data)
    R = np.asarray(rotation_from_sines(*m.sines))
    return PoseSupervision(R, np.asarray(m.t) - R @ np.asarray(m.p))


def load_motion(path) -> dict:
    return json.loads(Path(path).read_text())


def motion_json(intrinsics: CameraIntrinsics, camera, objects, camera_bwd, objects_bwd, **extra) -> str:
    doc = {
        "intrinsics": {"f": intrinsics.f, "cx": intrinsics.cx, "cy": intrinsics.cy},
        "camera": camera.as_dict(),
        "objects": [o.as_dict() for o in objects],
        "camera_bwd": camera_bwd.as_dict(),
        "objects_bwd": [o.as_dict() for o in objects_bwd],
    }
    doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_text(path, text: str) -> None:
    sio.atomic_write(path, text.encode())


# --- solve -------------------------------------------------------------------

def _dir_pair(directory: Path, cfg: RunConfig, out: Path) -> Pair:
    a, b = _find(directory, "frame_t"), _find(directory, "frame_tp1")
    if a is None or b is None:
        raise ConfigError(f"{directory} must contain frame_t and frame_tp1 images")
    intr = cfg.intrinsics
    motion = directory / "motion.json"
    if intr is None and motion.exists():
        data = _read_config_input(load_motion, motion)
        if "intrinsics" in data:
            intr = CameraIntrinsics(**data["intrinsics"])
    return Pair(directory.name, _read_config_input(sio.read_image, a), _read_config_input(sio.read_image, b),
                intr or CameraIntrinsics(), out)


def collect_pairs(cfg: RunConfig) -> list[Pair]:
    pairs = []
    files = [p for p in cfg.inputs if p.is_file()]
    dirs = [p for p in cfg.inputs if p.is_dir()]
    if files and (len(files) != 2 or dirs):
        raise ConfigError("give exactly two frame images, or one or more pair directories")
    if files:
        I_t, I_tp1 = (_read_config_input(sio.read_image, p) for p in files)
        pairs.append(Pair(files[0].stem, I_t, I_tp1, cfg.intrinsics or CameraIntrinsics(), cfg.out))
    for d in dirs:
        pairs.append(_dir_pair(d, cfg, cfg.out))
    if cfg.scenes:
        suite = standard_suite()
        for name in cfg.scenes:
            if name not in suite:
                raise ConfigError(f"unknown scene {name!r}; choose from {sorted(suite)}")
            gt = generate_scene(suite[name], name=name)
            pairs.append(Pair(name, gt.I_t, gt.I_tp1, cfg.intrinsics or gt.intrinsics, cfg.out))
    if len(pairs) > 1:
        names = [p.name for p in pairs]
        if len(set(names)) != len(names):
            raise ConfigError(f"pair names must be unique, got {names}")
        for p in pairs:
            p.out = cfg.out / p.name
    if not pairs:
        raise ConfigError("nothing to solve: give frame images, pair directories or --scene")
    for p in pairs:
        if p.I_t.shape != p.I_tp1.shape:
            raise ConfigError(f"{p.name}: frames differ in shape {p.I_t.shape} vs {p.I_tp1.shape}")

    sup = {}
    if cfg.gt_depth:
        sup["depth_t"] = DepthSupervision.from_depth(_read_config_input(sio.read_depth, cfg.gt_depth, cfg.depth_scale))
    if cfg.gt_pose:
        sup["pose"] = load_pose(cfg.gt_pose)
    if cfg.gt_flow:
        sup["flow"] = _read_config_input(sio.read_flo, cfg.gt_flow)
    if sup:
        if len(pairs) != 1:
            raise ConfigError("ground-truth supervision files apply to a single frame pair")
        h, w = pairs[0].I_t.shape[:2]
        for key in ("depth_t", "flow"):
            if key in sup:
                shape = np.shape(sup[key].d_gt if key == "depth_t" else sup[key][0])
                if shape != (h, w):
                    raise ConfigError(f"{key} supervision is {shape}, frames are {(h, w)}")
        pairs[0].supervision = sup
    return pairs


def solve_pair(pair: Pair, config: SolverConfig) -> dict:
    state, trace = optimize(pair.I_t, pair.I_tp1, pair.intrinsics, config=config, supervision=pair.supervision)
    est = state.estimate(state.step, config.mask_rate, config.mask_cap)
    fwd, _ = est.flows(pair.intrinsics)
    out = pair.out
    out.mkdir(parents=True, exist_ok=True)
    sio.write_depth(out / "depth.pfm", est.depth_t)
    sio.write_depth(out / "depth_tp1.pfm", est.depth_tp1)
    sio.write_flo(out / "flow.flo", fwd.U, fwd.V)
    sio.write_image(out / "flow.png", sio.flow_to_color(fwd.U, fwd.V))
    masks = np.asarray(est.masks_t) if est.masks_t is not None else ()
    for i, m in enumerate(masks):
        sio.write_image(out / f"mask_{i}.png", m)
    write_text(out / "motion.json", motion_json(
        pair.intrinsics, est.cam_fwd, est.objs_fwd, est.cam_bwd, est.objs_bwd,
        iterations=state.step, seed=config.seed, final_loss=trace[-1] if trace else None))
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration", "loss"])
    writer.writerows((i, repr(v)) for i, v in enumerate(trace))
    write_text(out / "loss_trace.csv", buf.getvalue())
    t = np.asarray(est.cam_fwd.t)
    log.info("%s: %d iterations, final loss %s, camera t=%s", pair.name, state.step,
             f"{trace[-1]:.6g}" if trace else "n/a", np.array2string(t, precision=4))
    return {"name": pair.name, "out": str(out), "final_loss": trace[-1] if trace else None}


def cmd_solve(args) -> int:
    cfg = build_run_config(args)
    pairs = collect_pairs(cfg)
    results = run_parallel(lambda p: solve_pair(p, cfg.solver), pairs)
    for r in results:
        print(f"{r['name']}: wrote {r['out']}")
    return 0


# --- synth -------------------------------------------------------------------

def write_scene(gt, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    sio.write_image(out / "frame_t.png", gt.I_t)
    sio.write_image(out / "frame_tp1.png", gt.I_tp1)
    sio.write_depth(out / "depth_t.pfm", gt.d_t)
    sio.write_depth(out / "depth_tp1.pfm", gt.d_tp1)
    sio.write_flo(out / "flow.flo", gt.flow.U, gt.flow.V)
    sio.write_flo(out / "flow_bwd.flo", gt.flow_bwd.U, gt.flow_bwd.V)
    sio.write_image(out / "flow.png", sio.flow_to_color(gt.flow.U, gt.flow.V))
    for i, m in enumerate(gt.masks):
        sio.write_image(out / f"mask_{i}.png", m.astype(np.float64))
    sio.write_image(out / "occlusion.png", gt.occlusion.astype(np.float64))
    write_text(out / "motion.json", motion_json(gt.intrinsics, gt.camera, gt.objects, gt.camera_bwd,
                                                gt.objects_bwd, name=gt.name))


def cmd_synth(args) -> int:
    suite = standard_suite(args.size)
    names = args.scene or sorted(suite)
    bad = [n for n in names if n not in suite]
    if bad:
        raise ConfigError(f"unknown scenes {bad}; choose from {sorted(suite)}")
    out = Path(args.out or "synth")

    def make(name):
        gt = generate_scene(suite[name], seed=args.seed, name=name)
        write_scene(gt, out / name)
        return name

    for name in run_parallel(make, names):
        print(f"{name}: wrote {out / name}")
    return 0


# --- eval --------------------------------------------------------------------

def _masks(directory: Path) -> list[np.ndarray]:
    paths = sorted(directory.glob("mask_*.png"), key=lambda p: int(p.stem.split("_")[1]))
    return [sio.read_image(p)[..., 0] for p in paths]


def evaluate_pair(pred: Path, gt: Path, depth_scale: float = 1.0 / 1000.0) -> dict[str, float]:
    """Every metric computable from the files present in both directories."""
    out = {}
    d_pred = _find(pred, "depth", (".pfm", ".png")) or _find(pred, "depth_t", (".pfm", ".png"))
    d_gt = _find(gt, "depth_t", (".pfm", ".png")) or _find(gt, "depth", (".pfm", ".png"))
    if d_pred and d_gt:
        dp, dg = sio.read_depth(d_pred, depth_scale), sio.read_depth(d_gt, depth_scale)
        valid = (dg > 0) & (dp > 0)
        out["silog"] = scale_invariant_log_rmse(dp, dg, valid)
    if (pred / "motion.json").exists() and (gt / "motion.json").exists():
        cam = RigidMotion.from_dict(load_motion(pred / "motion.json")["camera"])
        pose = load_pose(gt / "motion.json")
        out["trans_err"], out["rot_err"] = relative_pose_error(cam, pose.R, pose.t)
    gt_masks = _masks(gt)
    pred_masks = _masks(pred)
    if gt_masks and pred_masks:
        out["mask_iou"] = mask_iou(np.stack(pred_masks), gt_masks)
    if (pred / "flow.flo").exists() and (gt / "flow.flo").exists():
        fp, fg = sio.read_flo(pred / "flow.flo"), sio.read_flo(gt / "flow.flo")
        h, w = fg[0].shape
        xs, ys = np.meshgrid(np.arange(w), np.arange(h))
        valid = (xs + fg[0] >= 0) & (xs + fg[0] <= w - 1) & (ys + fg[1] >= 0) & (ys + fg[1] <= h - 1)
        occ = _find(gt, "occlusion")
        if occ:
            valid &= sio.read_image(occ)[..., 0] < 0.5
        out["epe"] = endpoint_error(fp, fg, valid)
    if not out:
        raise RuntimeError(f"no comparable files between {pred} and {gt}")
    return out


def _is_pair_dir(d: Path) -> bool:
    return any((d / n).exists() for n in ("motion.json", "depth.pfm", "flow.flo"))


def cmd_eval(args) -> int:
    pred, gt = Path(args.pred), Path(args.gt)
    for p in (pred, gt):
        if not p.is_dir():
            raise ConfigError(f"not a directory: {p}")
    if _is_pair_dir(pred):
        jobs = [(pred.name, pred, gt)]
    else:
        jobs = [(d.name, d, gt / d.name) for d in sorted(pred.iterdir()) if d.is_dir()]
        missing = [name for name, _, g in jobs if not g.is_dir()]
        if missing:
            raise ConfigError(f"no ground truth for pairs {missing} under {gt}")
    if not jobs:
        raise ConfigError(f"no prediction pairs under {pred}")
    report = EvalReport()
    for (name, _, _), metrics in zip(jobs, run_parallel(lambda j: evaluate_pair(j[1], j[2], args.depth_scale), jobs)):
        for k, v in metrics.items():
            report.add(name, k, v)
    out = Path(args.out) if args.out else pred
    write_text(out / "report.txt", report.to_text())
    write_text(out / "report.json", report.to_json() + "\n")
    sys.stdout.write(report.to_text())
    return 0


# --- gradcheck ---------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    if args.problems < 1 or args.size < 2 or args.k < 0:
        raise ConfigError("need problems >= 1, size >= 2 and k >= 0")
    seed = args.seed if args.seed is not None else 0
    ok = True
    for r in check_primitives(seed, args.points):
        ok &= r.ok
        print(f"primitive {r.name}: max rel error {r.max_rel_error:.2e} {'ok' if r.ok else 'FAIL'}")
        for msg in r.failures:
            print(f"  {msg}")
    for r in check_pipeline(seed, args.problems, args.size, args.k):
        ok &= r.ok
        print(f"pipeline {r.name}: max rel error {r.max_rel_error:.2e} over {r.checked - r.kinks} coords "
              f"({r.kinks} near kinks) {'ok' if r.ok else 'FAIL'}")
        for msg in r.failures:
            print(f"  {msg}")
    print("gradcheck", "passed" if ok else "FAILED")
    return 0 if ok else 1


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with settings; flags override it")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sfmnet", description="Structure and motion from a frame pair.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[common], help="optimize depth, masks and motions for frame pairs")
    p.add_argument("inputs", nargs="*", help="two frame images, or pair directories holding frame_t/frame_tp1")
    p.add_argument("--scene", action="append", help="solve a generated synthetic scene (repeatable)")
    p.add_argument("--iters", type=int)
    p.add_argument("--k", type=int, help="number of object motion masks")
    p.add_argument("--weights", nargs="+", metavar="KEY=VAL")
    p.add_argument("--intrinsics", help="f,cx,cy in normalized image units")
    p.add_argument("--intrinsics-pixels", help="f,cx,cy,width,height in pixels")
    p.add_argument("--gt-depth", help="depth for frame t (PFM, or 16-bit PNG scaled by --depth-scale)")
    p.add_argument("--gt-pose", help="camera motion JSON")
    p.add_argument("--gt-flow", help="forward flow (.flo)")
    p.add_argument("--depth-scale", type=float, help="metres per 16-bit PNG depth unit (default 1/1000)")
    p.add_argument("--pyramid", choices=["on", "off"])
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic scene suite to disk")
    p.add_argument("--scene", action="append")
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", parents=[common], help="compare predictions against ground truth")
    p.add_argument("pred", help="prediction directory (one pair, or one subdirectory per pair)")
    p.add_argument("gt", help="ground-truth directory laid out like the predictions")
    p.add_argument("--depth-scale", type=float, default=1.0 / 1000.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all gradients")
    p.add_argument("--problems", type=int, default=20)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--points", type=int, default=100, help="random points per primitive")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"sfmnet: configuration error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - report any runtime failure as exit 1
        log.debug("failure", exc_info=True)
        print(f"sfmnet: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
