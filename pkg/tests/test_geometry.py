import json
import math

import numpy as np
import pytest

from cyclebev.geometry import (CameraModel, CameraRig, GridSpec, backproject_to_ground, default_rig,
                               intrinsics, look_at_rotation, make_bev_grid, make_pixel_grid,
                               project_world_to_image, visibility_fraction)
from cyclebev.scene_synth import Scene, SceneObject


def cam(K=None, R=None, T=None, h=224, w=224):
    return CameraModel(K=np.eye(3) if K is None else np.asarray(K, float),
                       R=np.eye(3) if R is None else R,
                       T=np.zeros(3) if T is None else np.asarray(T, float), height=h, width=w)


def random_rig(rng, n=4):
    cams = []
    for _ in range(n):
        R = look_at_rotation(rng.uniform(-math.pi, math.pi), rng.uniform(0.05, 0.4), rng.uniform(-0.05, 0.05))
        K = intrinsics(rng.uniform(80, 200), rng.uniform(80, 200), rng.uniform(90, 130), rng.uniform(50, 60))
        T = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1.0, 2.5)])
        cams.append(CameraModel(K=K, R=R, T=T, height=112, width=224))
    return CameraRig(cams)


def test_identity_projection():
    p = project_world_to_image(cam(), [[0, 0, 2]])
    assert (p.u[0], p.v[0], p.depth[0]) == (0.0, 0.0, 2.0)
    assert p.valid[0]


def test_hand_computed_projection():
    K = [[100, 0, 112], [0, 100, 112], [0, 0, 1]]
    p = project_world_to_image(cam(K), [[1, 0, 2]])
    # (100*1 + 112*2) / 2 = 162 ; (112*2) / 2 = 112
    assert p.u[0] == 162.0 and p.v[0] == 112.0 and p.depth[0] == 2.0


def test_behind_camera_is_invalid_and_kept():
    p = project_world_to_image(cam(), [[0, 0, -1], [0, 0, 0], [0, 0, 3]])
    assert list(p.valid) == [False, False, True]
    assert len(p.u) == 3 and np.isnan(p.u[0])


def test_invalid_rig_rejected():
    with pytest.raises(ValueError):
        cam(R=np.diag([1.0, 1.0, 1.1]))
    with pytest.raises(ValueError):
        cam(K=[[-1, 0, 0], [0, 1, 0], [0, 0, 1]])
    with pytest.raises(ValueError):
        CameraRig([])


def test_roundtrip_random_rigs(rng):
    for _ in range(3):
        rig = random_rig(rng)
        for c in rig:
            pts = np.column_stack([rng.uniform(-40, 40, 10_000), rng.uniform(-40, 40, 10_000), np.zeros(10_000)])
            proj = project_world_to_image(c, pts)
            back, hit = backproject_to_ground(c, proj.uv[proj.valid])
            ground_front = proj.valid
            assert hit.all()
            assert np.abs(back - pts[ground_front]).max() < 1e-9
            again = project_world_to_image(c, back)
            assert np.abs(again.uv - proj.uv[proj.valid]).max() < 1e-6


def test_horizon_has_no_intersection():
    K = intrinsics(100, 100, 112, 56)
    c = CameraModel(K=K, R=look_at_rotation(0.0, 0.0), T=np.array([0, 0, 1.5]), height=112, width=224)
    _, hit = backproject_to_ground(c, [[112, 56], [112, 20], [112, 100]])
    assert list(hit) == [False, False, True]


def test_tilted_principal_point():
    K = intrinsics(100, 100, 112, 56)
    pitch = math.radians(20)
    c = CameraModel(K=K, R=look_at_rotation(0.3, pitch), T=np.array([0, 0, 2.0]), height=112, width=224)
    pt, hit = backproject_to_ground(c, [[112, 56]])
    assert hit[0]
    d = 2.0 / math.tan(pitch)
    assert np.allclose(pt[0, :2], [d * math.cos(0.3), d * math.sin(0.3)], atol=1e-9)
    p = project_world_to_image(c, pt)
    assert abs(p.u[0] - 112) < 1e-6 and abs(p.v[0] - 56) < 1e-6


def test_scale_invariance(rng):
    c = default_rig()[0]
    pts = np.column_stack([rng.uniform(2, 20, 50), rng.uniform(-5, 5, 50), rng.uniform(0, 3, 50)])
    a = project_world_to_image(c, pts)
    b = project_world_to_image(c, c.T + 2.5 * (pts - c.T))
    assert np.allclose(a.uv, b.uv, atol=1e-9)
    assert np.allclose(b.depth, 2.5 * a.depth, atol=1e-9)


def test_rigid_motion_consistency(rng):
    rig = default_rig()
    ang = 0.7
    Rz = np.array([[math.cos(ang), -math.sin(ang), 0], [math.sin(ang), math.cos(ang), 0], [0, 0, 1]])
    shift = np.array([3.0, -2.0, 0.0])
    pts = rng.uniform(-20, 20, (200, 3))
    for c in rig:
        moved = CameraModel(K=c.K, R=c.R @ Rz.T, T=Rz @ c.T + shift, height=c.height, width=c.width)
        a = project_world_to_image(c, pts)
        b = project_world_to_image(moved, pts @ Rz.T + shift)
        assert np.array_equal(a.valid, b.valid)
        assert np.allclose(a.uv[a.valid], b.uv[b.valid], atol=1e-9)


def test_bev_grid_examples():
    g = make_bev_grid(GridSpec(2, 2, 2.0, 2.0), 0)
    assert sorted(map(tuple, g)) == [(-0.5, -0.5, 0), (-0.5, 0.5, 0), (0.5, -0.5, 0), (0.5, 0.5, 0)]
    g = make_bev_grid(GridSpec(200, 200, 100.0, 100.0), 0).reshape(200, 200, 3)
    assert np.all(np.diff(g[:, 0, 0]) == 0.5)
    g1 = make_bev_grid(GridSpec(200, 200, 100.0, 100.0), 1).reshape(100, 100, 3)
    assert np.all(np.diff(g1[:, 0, 0]) == 1.0)
    with pytest.raises(ValueError):
        make_bev_grid(GridSpec(2, 2), 2)
    assert np.array_equal(make_bev_grid(GridSpec(), 1), make_bev_grid(GridSpec(), 1))


def test_pixel_grid_examples():
    g = make_pixel_grid(cam(h=2, w=2), 1)
    assert sorted(map(tuple, g)) == [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)]
    assert make_pixel_grid(cam(h=224, w=448), 8).shape == (1568, 2)
    with pytest.raises(ValueError):
        make_pixel_grid(cam(h=224, w=448), 448)


def test_rig_json_roundtrip():
    rig = random_rig(np.random.default_rng(5))
    again = CameraRig.from_json(rig.to_json())
    assert again == rig
    doc = json.loads(rig.to_json())
    assert set(doc["cameras"][0]) == {"K", "R", "T", "H_I", "W_I"}
    assert len(doc["cameras"][0]["K"]) == 9


def _scene(objs):
    return Scene(road=[], objects=objs, seed=0)


def test_visibility_lone_object():
    scene = _scene([SceneObject("vehicle", 10.0, 0.0, 4.0, 2.0, 0.0, 1.5)])
    assert visibility_fraction(scene, 0, default_rig()) == 1.0


def test_visibility_fully_occluded():
    wall = SceneObject("vehicle", 6.0, 0.0, 10.0, 2.0, math.pi / 2, 4.0)
    ped = SceneObject("pedestrian", 12.0, 0.0, 0.5, 0.5, 0.0, 1.8)
    scene = _scene([wall, ped])
    assert visibility_fraction(scene, 1, default_rig()) == 0.0
    assert visibility_fraction(scene, 0, default_rig()) > 0.5


def test_visibility_half_outside_frustum():
    # one level camera looking along +x; its left frustum plane is the vertical plane y = x
    K = intrinsics(112, 112, 112, 56)
    c = CameraModel(K=K, R=look_at_rotation(0.0, 0.0), T=np.array([0.0, 0.0, 1.6]), height=112, width=224)
    box = SceneObject("vehicle", 10.0, 10.0, 3.0, 2.0, math.pi / 4, 1.5)
    frac = visibility_fraction(_scene([box]), 0, CameraRig([c]), sampling=16)
    assert abs(frac - 0.5) <= 1 / 16


def test_visibility_unknown_id():
    with pytest.raises(KeyError):
        visibility_fraction(_scene([]), 0, default_rig())
