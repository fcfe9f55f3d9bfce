import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from contourreg import _kernels
from contourreg.calibration import _hypotheses, bearings
from contourreg.geometry import CameraView, RigidPose
from contourreg.synth import bead_detections, default_fiducial, default_intrinsics, random_view_pose

from conftest import BACKENDS, random_pose

pts = arrays(np.float64, st.tuples(st.integers(1, 60), st.just(2)), elements=st.floats(-500, 500))


def brute_nn(q, r):
    d = np.linalg.norm(q[:, None, :] - r[None, :, :], axis=2)
    return d.min(axis=1)


@settings(max_examples=80, deadline=None)
@given(pts, pts)
def test_nearest_2d_equals_brute_force(q, r):
    for impl in BACKENDS:
        idx, d = impl.nearest_2d(np.ascontiguousarray(q), np.ascontiguousarray(r))
        np.testing.assert_allclose(d, brute_nn(q, r), atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(q - r[idx], axis=1), d, atol=1e-9)


def test_nearest_2d_large_random(impl):
    rng = np.random.default_rng(0)
    for n in (1, 17, 500):
        q = rng.uniform(0, 976, (n, 2))
        r = rng.uniform(0, 976, (500, 2))
        _, d = impl.nearest_2d(q, r)
        np.testing.assert_allclose(d, brute_nn(q, r), atol=1e-9)


def test_nearest_2d_rejects_empty_refs():
    with pytest.raises(ValueError):
        _kernels.nearest_2d(np.zeros((3, 2)), np.zeros((0, 2)))


def test_project_backends_agree(impl):
    rng = np.random.default_rng(1)
    X = rng.uniform(-50, 50, (200, 3))
    P = random_pose(rng, 10)
    t = P.translation + [0, 0, 700]
    uv, zmin = impl.project(X, P.rotation, t, 1000.0, 488.0, 488.0)
    cam = X @ P.rotation.T + t
    np.testing.assert_allclose(uv, 1000.0 * cam[:, :2] / cam[:, 2:] + 488.0, atol=1e-9)
    assert zmin == pytest.approx(cam[:, 2].min())


def test_silhouette_mask_backends_agree(phantom):
    topo = phantom.topology
    rng = np.random.default_rng(2)
    for _ in range(5):
        eye = rng.normal(size=3) * 700
        masks = [b.silhouette_mask(eye, topo.midpoints, phantom.face_normals, topo.edge_faces) for b in BACKENDS]
        for m in masks[1:]:
            np.testing.assert_array_equal(m, masks[0])


def test_p3p_backends_agree():
    rng = np.random.default_rng(3)
    K = default_intrinsics()
    for _ in range(20):
        X = rng.uniform(-40, 40, (3, 3))
        P = RigidPose(random_pose(rng).rotation, [0, 0, 700])
        uv = (X @ P.rotation.T + P.translation)
        uv = 1000 * uv[:, :2] / uv[:, 2:]
        j = bearings(uv + 488, K)
        sols = [b.p3p_single(np.ascontiguousarray(j), np.ascontiguousarray(X)) for b in BACKENDS]
        R0, t0 = sols[0]
        for R, t in sols[1:]:
            assert len(R) == len(R0)
            for Ri, ti in zip(R, t):
                k = np.argmin([np.abs(Ri - Rj).max() for Rj in R0])
                np.testing.assert_allclose(Ri, R0[k], atol=1e-8)
                np.testing.assert_allclose(ti, t0[k], atol=1e-5)


def test_pnp_search_backends_agree():
    rng = np.random.default_rng(4)
    fid = default_fiducial()
    K = default_intrinsics()
    view = CameraView(K, random_view_pose(rng), "v")
    det, _ = bead_detections(fid, view, rng, 0.3, 6, 2, min_separation_px=5.0)
    det = np.ascontiguousarray(det[np.lexsort((det[:, 1], det[:, 0]))])
    hyps = _hypotheses(len(det), 16, 0)[:30000]
    args = (bearings(det, K), det, np.ascontiguousarray(fid.bead_positions), hyps, K.focal_px, 488.0, 488.0, 0.8, 99)
    out = [b.pnp_search(*args) for b in BACKENDS]
    for o in out[1:]:
        assert o[0] == out[0][0] and o[2] == out[0][2]
        np.testing.assert_allclose(o[3], out[0][3], atol=1e-9)


def test_backend_flag_selects_numpy():
    import subprocess
    import sys

    code = "import contourreg; print(contourreg.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env={"CONTOURREG_DISABLE_NUMBA": "1", "PATH": ""},
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
