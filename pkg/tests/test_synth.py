import numpy as np
import pytest

from contourreg.errors import NonManifoldResult, OutOfFrame
from contourreg.evaluation import run_single
from contourreg.geometry import euler_to_pose, project_points
from contourreg.registration import RegistrationConfig
from contourreg.scene import Scene, load_scene, save_scene
from contourreg.synth import (
    CameraRingSpec,
    FiducialModel,
    NoiseSpec,
    PhantomSpec,
    build_phantom,
    clean_contours,
    corrupt_contours,
    default_fiducial,
    default_view_split,
    generate_scene,
    ring_views,
)


def test_noise_budget():
    rng = np.random.default_rng(0)
    for n in (10, 333, 1000):
        pts = rng.uniform(0, 976, (n, 2))
        cls = rng.integers(1, 4, n)
        noise = NoiseSpec(0.5, spurious_fraction=0.1, misclass_fraction=0.3, dropout_fraction=0.2, seed=1)
        out, ocls, kind = corrupt_contours(pts, cls, noise, rng, (976, 976))
        m = n - int(round(0.2 * n))
        assert abs(np.sum(kind != 2) - 0.8 * n) <= 1
        assert abs(np.sum(kind == 1) - 0.3 * m) <= 1
        assert abs(np.sum(kind == 2) - 0.1 * len(out)) <= 1
        assert np.all((ocls >= 1) & (ocls <= 3))


def test_misclassified_points_change_class():
    rng = np.random.default_rng(1)
    cls = np.repeat([1, 2, 3], 200)
    _, ocls, kind = corrupt_contours(np.zeros((600, 2)), cls, NoiseSpec(misclass_fraction=0.5), rng, (976, 976))
    assert np.all(ocls[kind == 1] != cls[kind == 1])
    assert np.all(ocls[kind == 0] == cls[kind == 0])


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(spurious_fraction=1.5)
    with pytest.raises(ValueError):
        NoiseSpec(gaussian_sigma_px=-1)
    with pytest.raises(ValueError):
        CameraRingSpec(angular_spacing_deg=0)


def test_phantom_errors():
    with pytest.raises(NonManifoldResult):
        build_phantom(PhantomSpec(include_shaft=False, include_condyles=(False, False)))


def test_fiducial_validation():
    assert len(default_fiducial().bead_positions) == 16
    with pytest.raises(ValueError):
        FiducialModel(np.zeros((3, 3)), (0, 1, 2))
    flat = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]])
    with pytest.raises(ValueError):
        FiducialModel(flat, (0, 1, 2, 3))
    f = default_fiducial()
    g = FiducialModel.from_dict(f.to_dict())
    np.testing.assert_array_equal(g.bead_positions, f.bead_positions)


def test_view_split_spacing():
    ring = CameraRingSpec()
    reg, ctl = default_view_split(ring)
    views = {v.view_id: v for v in ring_views(ring)}
    d0, d1 = (views[r].extrinsic.rotation[2] for r in reg)
    assert np.degrees(np.arccos(d0 @ d1)) >= 45 - 1e-9
    assert len(ctl) == 3 and not set(ctl) & set(reg)


def test_clean_scene_self_consistent(phantom, clean_scene):
    for vid in clean_scene.registration_views:
        view = clean_scene.camera(vid)
        uv, cls, _ = clean_contours(phantom, clean_scene.ground_truth, view)
        obs = clean_scene.observations[vid]
        for c in (1, 2, 3):
            np.testing.assert_array_equal(obs.points_by_class[c], uv[cls == c])


def test_generation_deterministic(phantom):
    a = generate_scene(phantom, noise=NoiseSpec(0.5, 0.1, 0.1, seed=4), fiducial=default_fiducial())
    b = generate_scene(phantom, noise=NoiseSpec(0.5, 0.1, 0.1, seed=4), fiducial=default_fiducial())
    assert a.to_dict() == b.to_dict()


def test_out_of_frame(phantom):
    with pytest.raises(OutOfFrame):
        generate_scene(phantom, true_pose=euler_to_pose(0, 0, 0, (0, 400, 0)))


def test_scene_json_roundtrip(tmp_path, phantom):
    s = generate_scene(phantom, noise=NoiseSpec(0.3, seed=2), fiducial=default_fiducial())
    p = tmp_path / "s.json"
    save_scene(p, s)
    t = load_scene(p)
    assert t.to_dict() == s.to_dict()
    save_scene(tmp_path / "t.json", t)
    assert (tmp_path / "t.json").read_bytes() == p.read_bytes()
    assert isinstance(Scene.from_dict(s.to_dict()), Scene)


@pytest.mark.slow
def test_heavy_mispredictions_still_register(phantom):
    scene = generate_scene(phantom, noise=NoiseSpec(0.5, spurious_fraction=0.1, misclass_fraction=0.3, seed=0))
    cfg = RegistrationConfig(max_correspondence_updates=200)
    _, met = run_single(phantom, scene, cfg, [20, -30, 10, 40, -30, 60], restart=True)
    assert met.success
