"""Command-line interface: ``contourreg <command> ...``.

Exit codes: 0 success, 1 usage or parse error, 2 geometry/data error,
3 algorithmic failure. Every command writes a ``*.manifest.json`` next to
its primary output with input hashes, the effective configuration and
timestamps; primary outputs themselves carry no timestamps, so reruns with
the same inputs and seed are byte-identical.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from .calibration import INLIER_THRESH_PX, blind_pnp
from .errors import AlgorithmError, ContourRegError
from .evaluation import (
    CSV_HEADER,
    OFFSET_NAMES,
    evaluate_pose,
    plot_tables,
    robustness_sweep,
    sweep_csv,
)
from .geometry import RigidPose, perturb_pose
from .mesh import read_ply, segment_principal_axis, write_ply
from .registration import MODES, RegistrationConfig, RegistrationReport, register, register_with_restart
from .scene import dumps_json, load_scene, save_scene
from .synth import (
    CameraRingSpec,
    FiducialModel,
    NoiseSpec,
    PhantomSpec,
    build_phantom,
    default_fiducial,
    generate_scene,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("contourreg")

EXIT_OK, EXIT_USAGE, EXIT_GEOMETRY, EXIT_ALGORITHM = 0, 1, 2, 3
JOBS_ENV = "CONTOURREG_JOBS"
# fixed initial offset (tx, ty, tz mm, phi, theta, psi deg) about the reference pose
DEFAULT_INIT = (30.0, -40.0, 5.0, -17.18, 0.0, 17.18)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(n: int):
    def parse(text: str):
        try:
            vals = tuple(float(v) for v in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}") from None
        if len(vals) != n or not all(np.isfinite(vals)):
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated finite numbers, got {text!r}")
        return vals

    return parse


def _ids(text: str) -> list[str]:
    ids = [v.strip() for v in text.split(",") if v.strip()]
    if not ids:
        raise argparse.ArgumentTypeError("expected a comma-separated list of view ids")
    return ids


def _default_jobs() -> int:
    raw = os.environ.get(JOBS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Run provenance: inputs, configuration, seed, version and timing."""

    def __init__(self, command: str, argv: list[str]):
        self.data = {
            "command": command,
            "argv": list(argv),
            "tool_version": __version__,
            "kernel_backend": _kernels.BACKEND,
            "inputs": {},
            "outputs": {},
            "config": {},
            "seed": None,
            "started_utc": _utc_now(),
        }
        self._t0 = time.perf_counter()

    def add_input(self, path) -> None:
        self.data["inputs"][str(path)] = sha256_file(path)

    def add_output(self, path) -> None:
        self.data["outputs"][str(path)] = sha256_file(path)

    def write(self, path) -> None:
        self.data["finished_utc"] = _utc_now()
        self.data["elapsed_s"] = round(time.perf_counter() - self._t0, 3)
        Path(path).write_text(dumps_json(self.data))


def _manifest_path(primary: Path) -> Path:
    if primary.is_dir():
        return primary / "manifest.json"
    return primary.with_name(primary.stem + ".manifest.json")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as f:
        return tomllib.load(f)


def registration_config(cfg: dict, args) -> RegistrationConfig:
    base = dict(cfg.get("registration", {}))
    for key, attr in (("mode", "mode"), ("rng_seed", "seed")):
        val = getattr(args, attr, None)
        if val is not None:
            base[key] = val
    try:
        return RegistrationConfig.from_dict(base)
    except TypeError as exc:
        raise UsageError(f"bad [registration] config: {exc}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_segment(args, cfg, manifest) -> int:
    mesh = read_ply(args.mesh)
    manifest.add_input(args.mesh)
    plane = None
    if (args.split_point is None) != (args.split_normal is None):
        raise UsageError("--split-point and --split-normal go together")
    if args.split_point is not None:
        plane = (args.split_point, args.split_normal)
    out = segment_principal_axis(mesh, condyle_split_plane=plane, keep_labels=args.keep_labels)
    write_ply(args.out, out)
    manifest.data["config"] = {"keep_labels": args.keep_labels, "split_plane": plane}
    counts = {int(c): int(n) for c, n in zip(*np.unique(out.vertex_class, return_counts=True))}
    print(f"labeled {out.n_vertices} vertices: {counts}")
    return _finish(manifest, Path(args.out))


def cmd_calibrate(args, cfg, manifest) -> int:
    scene = load_scene(args.scene)
    fid = FiducialModel.from_dict(json.loads(Path(args.fiducial).read_text()))
    manifest.add_input(args.scene)
    manifest.add_input(args.fiducial)
    ccfg = cfg.get("calibration", {})
    thresh = args.threshold if args.threshold is not None else float(ccfg.get("inlier_thresh_px", INLIER_THRESH_PX))
    seed = args.seed if args.seed is not None else int(ccfg.get("seed", 0))
    info = {}
    for vid, rec in scene.views.items():
        if rec.bead_detections is None:
            log.warning("view %s has no bead detections; keeping its extrinsic", vid)
            continue
        res = blind_pnp(rec.bead_detections, fid, rec.intrinsics, inlier_thresh_px=thresh, seed=seed)
        rec.extrinsic = res.pose
        info[vid] = res.to_dict()
        print(f"{vid}: {res.inlier_count} inliers, mean reprojection {res.mean_reproj_err_px:.3f} px")
    scene.metadata = dict(scene.metadata, calibration=info)
    save_scene(args.out, scene)
    manifest.data["config"] = {"inlier_thresh_px": thresh, "seed": seed}
    manifest.data["seed"] = seed
    return _finish(manifest, Path(args.out))


def _initial_pose(scene, mesh, init) -> RigidPose:
    return perturb_pose(scene.reference_pose, init, mesh.centroid)


def cmd_register(args, cfg, manifest) -> int:
    scene = load_scene(args.scene)
    mesh = read_ply(args.mesh)
    manifest.add_input(args.scene)
    manifest.add_input(args.mesh)
    config = registration_config(cfg, args)
    view_ids = args.views or scene.registration_views
    unknown = [v for v in view_ids if v not in scene.views]
    if unknown:
        raise UsageError(f"unknown view ids: {', '.join(unknown)}")
    init = args.init if args.init is not None else tuple(cfg.get("register", {}).get("init", DEFAULT_INIT))
    restart = args.restart or bool(cfg.get("register", {}).get("restart", False))
    views = scene.cameras(view_ids)
    obs = scene.observations_for(view_ids)
    fn = register_with_restart if restart else register
    report = fn(mesh, views, obs, _initial_pose(scene, mesh, init), config)
    Path(args.out).write_text(dumps_json(report.to_dict()))
    manifest.data["config"] = {
        "registration": config.to_dict(), "init": list(init), "restart": restart, "views": list(view_ids),
    }
    manifest.data["seed"] = config.rng_seed
    print(
        f"converged={report.converged} restarts={report.restart_count} "
        f"median residual {report.final_median_residual_mm:.3f} mm"
    )
    if scene.control_contours and scene.control_views:
        m = evaluate_pose(mesh, scene, report.final_pose, sample_spacing=config.sample_spacing_mm)
        print(f"mRPD {m.mrpd_mm:.3f} mm on {','.join(scene.control_views)} (success={m.success})")
    return _finish(manifest, Path(args.out))


def cmd_evaluate(args, cfg, manifest) -> int:
    scene = load_scene(args.scene)
    mesh = read_ply(args.mesh)
    manifest.add_input(args.scene)
    manifest.add_input(args.mesh)
    control = args.control_views or scene.control_views
    missing = [v for v in control if v not in scene.views or v not in scene.control_contours]
    if missing:
        raise UsageError(f"control view(s) not in scene or without ground-truth contour: {', '.join(missing)}")
    spacing = float(cfg.get("registration", {}).get("sample_spacing_mm", 1.0))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, docs = [], []
    for path in args.reports:
        manifest.add_input(path)
        rep = RegistrationReport.from_dict(json.loads(Path(path).read_text()))
        m = evaluate_pose(mesh, scene, rep.final_pose, control, spacing, metadata={"report": str(path)})
        docs.append({"report": str(path), **m.to_dict()})
        rows.append([str(path), f"{m.mrpd_mm:.6f}", int(m.success)] + [f"{m.mrpd_mm_per_view[v]:.6f}" for v in control])
        print(f"{path}: mRPD {m.mrpd_mm:.3f} mm success={m.success}")
    (out_dir / "metrics.json").write_text(dumps_json({"control_views": list(control), "results": docs}))
    header = ["report", "mrpd_mm", "success"] + [f"mrpd_mm_{v}" for v in control]
    lines = [",".join(header)] + [",".join(str(c) for c in r) for r in rows]
    (out_dir / "metrics.csv").write_text("\n".join(lines) + "\n")
    manifest.data["config"] = {"control_views": list(control), "sample_spacing_mm": spacing}
    manifest.add_output(out_dir / "metrics.csv")
    return _finish(manifest, out_dir)


def cmd_sweep(args, cfg, manifest) -> int:
    scene = load_scene(args.scene)
    mesh = read_ply(args.mesh)
    manifest.add_input(args.scene)
    manifest.add_input(args.mesh)
    scfg = cfg.get("sweep", {})
    config = registration_config(cfg, args)
    runs = args.runs if args.runs is not None else int(scfg.get("runs", 50))
    if runs < 0:
        raise UsageError("--runs must be >= 0")
    seed = args.seed if args.seed is not None else int(scfg.get("seed", 0))
    restart = args.restart or bool(scfg.get("restart", False))
    jobs = args.jobs if args.jobs is not None else int(scfg.get("jobs", _default_jobs()))
    trans = float(scfg.get("trans_range_mm", 50.0))
    rot = float(scfg.get("rot_range_deg", 180.0))
    result = robustness_sweep(
        mesh, scene, config, n_runs=runs, trans_range_mm=trans, rot_range_deg=rot,
        restart=restart, seed=seed, jobs=jobs,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sweep.csv").write_text(sweep_csv(result))
    (out_dir / "summary.json").write_text(dumps_json(result.summary()))
    for name, text in plot_tables(result).items():
        (out_dir / f"plot_{name}.tsv").write_text(text)
    manifest.data["config"] = {
        "registration": config.to_dict(), "runs": runs, "restart": restart, "jobs": jobs,
        "trans_range_mm": trans, "rot_range_deg": rot, "csv_columns": ["run"] + CSV_HEADER,
    }
    manifest.data["seed"] = seed
    for name in ("sweep.csv", "summary.json"):
        manifest.add_output(out_dir / name)
    rate = result.success_rate
    print(f"{result.successes}/{runs} successful" + (f" ({100 * rate:.0f}%)" if rate is not None else ""))
    return _finish(manifest, out_dir)


def cmd_demo(args, cfg, manifest) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    mesh = build_phantom(PhantomSpec())
    write_ply(out / "phantom.ply", mesh)
    fid = default_fiducial()
    (out / "fiducial.json").write_text(dumps_json(fid.to_dict()))
    noise = NoiseSpec(gaussian_sigma_px=args.sigma, seed=args.seed)
    scene = generate_scene(mesh, CameraRingSpec(), RigidPose.identity(), noise, fid)
    truth = {vid: rec.extrinsic for vid, rec in scene.views.items()}
    for rec in scene.views.values():
        rec.extrinsic = None  # calibration has to recover these
    save_scene(out / "scene_uncalibrated.json", scene)
    print(f"[demo] phantom {mesh.n_vertices} vertices, {len(scene.views)} views")

    worst = 0.0
    for vid, rec in scene.views.items():
        res = blind_pnp(rec.bead_detections, fid, rec.intrinsics)
        rec.extrinsic = res.pose
        worst = max(worst, res.mean_reproj_err_px)
        drift = np.linalg.norm(res.pose.inverse().translation - truth[vid].inverse().translation)
        log.info("%s: %d inliers, source position error %.3f mm", vid, res.inlier_count, drift)
    save_scene(out / "scene.json", scene)
    print(f"[demo] calibrated {len(scene.views)} views, worst mean reprojection {worst:.3f} px")

    config = RegistrationConfig(rng_seed=args.seed)
    views = scene.cameras(scene.registration_views)
    obs = scene.observations_for(scene.registration_views)
    report = register_with_restart(mesh, views, obs, _initial_pose(scene, mesh, DEFAULT_INIT), config)
    (out / "report.json").write_text(dumps_json(report.to_dict()))
    m = evaluate_pose(mesh, scene, report.final_pose)
    (out / "metrics.json").write_text(dumps_json(m.to_dict()))
    print(
        f"[demo] registered on {','.join(scene.registration_views)}: mRPD {m.mrpd_mm:.3f} mm, "
        f"success={m.success}, restarts={report.restart_count} ({time.perf_counter() - t0:.1f} s)"
    )
    manifest.data["config"] = {"sigma_px": args.sigma, "registration": config.to_dict(), "init": list(DEFAULT_INIT)}
    manifest.data["seed"] = args.seed
    for name in ("phantom.ply", "fiducial.json", "scene.json", "report.json", "metrics.json"):
        manifest.add_output(out / name)
    return _finish(manifest, out)


def _finish(manifest: Manifest, primary: Path) -> int:
    if primary.is_file():
        manifest.add_output(primary)
    manifest.write(_manifest_path(primary))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="contourreg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="TOML file with [registration], [register], [sweep], [calibration] tables")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("segment", help="label a mesh into diaphysis and condyles")
    s.add_argument("mesh")
    s.add_argument("out")
    s.add_argument("--keep-labels", action="store_true", help="leave an already labeled mesh untouched")
    s.add_argument("--split-point", type=_floats(3), metavar="X,Y,Z")
    s.add_argument("--split-normal", type=_floats(3), metavar="X,Y,Z")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("calibrate", help="solve view extrinsics from bead detections")
    s.add_argument("scene")
    s.add_argument("fiducial")
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--threshold", type=float, help=f"inlier threshold in px (default {INLIER_THRESH_PX})")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("register", help="register the mesh to the scene's contours")
    s.add_argument("scene")
    s.add_argument("mesh")
    s.add_argument("-o", "--out", default="report.json")
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--views", type=_ids, metavar="A,B")
    s.add_argument("--init", type=_floats(6), metavar="TX,TY,TZ,PHI,THETA,PSI",
                   help="offset from the scene reference pose (mm, deg; intrinsic Z-Y-X)")
    s.add_argument("--restart", action="store_true")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("evaluate", help="mRPD and contour metrics for registration reports")
    s.add_argument("scene")
    s.add_argument("mesh")
    s.add_argument("reports", nargs="+")
    s.add_argument("--control-views", type=_ids, metavar="C1,C2,C3")
    s.add_argument("--out-dir", default="evaluation")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="robustness sweep over random initial poses")
    s.add_argument("scene")
    s.add_argument("mesh")
    s.add_argument("--runs", type=int)
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--restart", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, help=f"worker processes (default ${JOBS_ENV} or 1)")
    s.add_argument("--out-dir", default="sweep")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("demo", help="synthetic end-to-end run: phantom, calibration, registration")
    s.add_argument("--out-dir", default="demo")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sigma", type=float, default=0.3, help="contour and bead noise, px")
    s.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        manifest = Manifest(args.command, argv)
        if args.config:
            manifest.add_input(args.config)
        return args.func(args, cfg, manifest)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"contourreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AlgorithmError as exc:
        print(f"contourreg: algorithm failure: {exc}", file=sys.stderr)
        return EXIT_ALGORITHM
    except (ContourRegError, OSError, ValueError, KeyError, tomllib.TOMLDecodeError) as exc:
        print(f"contourreg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_GEOMETRY


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

__all__ = ["DEFAULT_INIT", "OFFSET_NAMES", "build_parser", "main"]
