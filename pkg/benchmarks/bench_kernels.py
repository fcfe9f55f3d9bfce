"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Both implementations are called on identical inputs; the script also checks
that they agree before timing them.
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np

from contourreg import _kernels
from contourreg.calibration import _hypotheses, bearings
from contourreg.geometry import RigidPose
from contourreg.mesh import extract_silhouette
from contourreg.synth import (
    CameraRingSpec,
    PhantomSpec,
    bead_detections,
    build_phantom,
    default_fiducial,
    random_view_pose,
    ring_views,
)


def _best(fn, repeat):
    fn()  # warm-up / JIT
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    mesh = build_phantom(PhantomSpec())
    view = ring_views(CameraRingSpec())[0]
    pose = RigidPose.identity()
    k = view.intrinsics
    E = view.extrinsic
    X = np.ascontiguousarray(rng.uniform(-60, 60, (20000, 3)))
    topo = mesh.topology
    eye = pose.inverse().apply(view.center)
    sil = extract_silhouette(mesh, pose, view)
    uv_sil = np.ascontiguousarray(rng.uniform(0, 976, (len(sil), 2)))
    obs = np.ascontiguousarray(uv_sil[rng.integers(0, len(uv_sil), 1500)] + rng.normal(0, 0.5, (1500, 2)))

    fid = default_fiducial()
    cam = type(view)(k, random_view_pose(rng), "bench")
    det, _ = bead_detections(fid, cam, rng, 0.3, 2, 3, min_separation_px=5.0)
    det = np.ascontiguousarray(det[np.lexsort((det[:, 1], det[:, 0]))])
    hyps = _hypotheses(len(det), len(fid.bead_positions), 0)[:20000]
    bear = bearings(det, k)
    beads = np.ascontiguousarray(fid.bead_positions)
    cx, cy = k.principal_point

    return {
        "project (20k points)": lambda impl: impl.project(X, E.rotation, E.translation, k.focal_px, cx, cy),
        "nearest_2d (1500 x silhouette)": lambda impl: impl.nearest_2d(obs, uv_sil),
        "silhouette_mask (mesh edges)": lambda impl: impl.silhouette_mask(
            eye, topo.midpoints, mesh.face_normals, topo.edge_faces
        ),
        "pnp_search (20k hypotheses)": lambda impl: impl.pnp_search(
            bear, det, beads, hyps, k.focal_px, cx, cy, 0.8, 10**9
        ),
    }


def _agree(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_agree(x, y) for x, y in zip(a, b))
    return bool(np.allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float), atol=1e-9, equal_nan=True))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write the timings to this file")
    args = ap.parse_args(argv)

    impls = [_kernels.numpy_impl]
    if _kernels.numba_impl is not None:
        impls.append(_kernels.numba_impl)
    else:
        print("numba is not installed; timing the numpy path only")

    rows = []
    print(f"{'kernel':34s} " + " ".join(f"{i.name:>12s}" for i in impls) + "   speedup  agree")
    for name, call in cases().items():
        outs = [call(i) for i in impls]
        t = [_best(lambda i=i: call(i), args.repeat) for i in impls]
        agree = _agree(outs[0], outs[-1])
        speed = t[0] / t[-1] if len(t) > 1 else 1.0
        rows.append({"kernel": name, **{i.name + "_s": v for i, v in zip(impls, t)}, "speedup": speed, "agree": agree})
        print(f"{name:34s} " + " ".join(f"{v * 1e3:10.2f}ms" for v in t) + f"  {speed:7.1f}x  {agree}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=1)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
