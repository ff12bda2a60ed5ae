import math

import numpy as np
import pytest

from surrounddepth import synth
from surrounddepth.geometry import (
    CameraModel,
    PoseSE3,
    compose,
    inverse,
    relative_pose,
    rot_y,
    translation,
    universal_to_local,
)

SMALL = synth.RigSpec(width=48, height=32)


class TestRig:
    def test_ring_adjacency(self, rig):
        assert len(rig) == 6
        assert rig.adjacency == ((0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0))

    def test_two_camera_ring(self):
        assert synth.ring_adjacency(2) == ((0, 1),)

    def test_yaw_spacing(self, rig):
        for i in range(6):
            R = relative_pose(rig, (i + 1) % 6, i).rotation
            yaw = math.atan2(R[0, 2], R[0, 0])
            assert abs(abs(yaw) - math.pi / 3) <= 1e-9

    def test_extrinsics_valid(self, rig):
        for T in rig.extrinsics:
            R = T.rotation
            assert np.abs(R.T @ R - np.eye(3)).max() <= 1e-9
            assert abs(np.linalg.det(R) - 1) <= 1e-9
            assert np.linalg.norm(T.translation) == pytest.approx(1.0)

    def test_neighbour_baseline(self, rig):
        # cameras one metre from the centre, 60 degrees apart: chord of one metre
        assert np.linalg.norm(relative_pose(rig, 0, 1).translation) == pytest.approx(1.0)

    def test_overlap(self, rig):
        for i, j in rig.adjacency:
            frac = synth.frustum_overlap(rig.cameras[i], rig.extrinsics[i], rig.cameras[j], rig.extrinsics[j])
            assert frac >= 1 / 3

    def test_needs_two_cameras(self):
        with pytest.raises(ValueError):
            synth.build_rig(synth.RigSpec(n_cameras=1))

    def test_unsatisfiable_overlap(self):
        with pytest.raises(ValueError, match="overlap"):
            synth.build_rig(synth.RigSpec(hfov_deg=50.0))

    def test_deterministic(self):
        a, b = synth.build_rig(), synth.build_rig()
        assert all(x.allclose(y, 0.0) for x, y in zip(a.extrinsics, b.extrinsics))


class TestTextures:
    def test_range_and_determinism(self):
        s, t = np.meshgrid(np.linspace(-3, 3, 40), np.linspace(-2, 2, 30))
        a = synth.Texture(5)(s, t)
        assert np.array_equal(a, synth.Texture(5)(s, t))
        assert a.min() >= 0 and a.max() <= 1
        assert not np.array_equal(a, synth.Texture(6)(s, t))

    def test_solid_texture_is_continuous(self):
        tex = synth.SolidTexture(0)
        x = np.random.default_rng(0).uniform(-5, 5, (100, 3))
        step = np.array([1e-6, -1e-6, 1e-6])
        assert np.abs(tex.at(x) - tex.at(x + step)).max() < 1e-4

    def test_seam_colours_agree(self):
        scene = synth.default_scene()
        ground, wall = scene.primitives[0], scene.primitives[2]
        # a point on both the ground plane and the first wall
        n = wall.normal
        d = float(np.dot(wall.point, n))
        along = np.array([n[2], 0.0, -n[0]])
        x = d * n + 0.3 * along
        x[1] = ground.point[1]
        assert np.array_equal(ground.shade(x[None]), wall.shade(x[None]))


class TestRender:
    def test_fronto_plane_depth(self):
        cam = CameraModel(40.0, 40.0, 23.5, 15.5, 48, 32)
        scene = synth.scene_with_primitives([synth.fronto_plane(10.0)])
        _, depth = synth.render_view(scene, cam, PoseSE3.identity())
        assert depth.valid.all()
        assert np.abs(depth.data - 10.0).max() <= 1e-12
        _, moved = synth.render_view(scene, cam, translation(0, 0, 1))
        assert np.abs(moved.data - 9.0).max() <= 1e-12

    def test_vehicle_pose_moves_rig(self):
        rig = synth.build_rig(SMALL)
        scene = synth.scene_with_primitives([synth.fronto_plane(10.0)])
        _, depth = synth.render(scene, rig, translation(0, 0, 1))[0]
        # camera 0 sits 1 m ahead of the vehicle origin
        assert np.abs(depth.data - 8.0).max() <= 1e-12

    def test_bitwise_deterministic(self, scene):
        rig = synth.build_rig(SMALL)
        a = synth.render(scene, rig)
        b = synth.render(synth.default_scene(0), rig)
        for (ia, da), (ib, db) in zip(a, b):
            assert ia.data.tobytes() == ib.data.tobytes()
            assert da.data.tobytes() == db.data.tobytes()

    def test_every_ray_hits(self, frames):
        for _, depth in frames:
            assert depth.valid.all()
            assert depth.data.min() > 0 and depth.data.max() <= 200

    def test_background_sphere(self):
        cam = CameraModel(40.0, 40.0, 23.5, 15.5, 48, 32)
        _, depth = synth.render_view(synth.scene_with_primitives([]), cam, PoseSE3.identity())
        assert depth.valid.all()
        # distance along each ray is the radius; depth is its z component
        rays = synth.pixel_rays(cam)
        assert np.allclose(depth.data * np.linalg.norm(rays, axis=-1), 150.0, rtol=1e-12)

    def test_no_background(self):
        cam = CameraModel(40.0, 40.0, 23.5, 15.5, 48, 32)
        _, depth = synth.render_view(synth.scene_with_primitives([], far=None), cam, PoseSE3.identity())
        assert not depth.valid.any()

    def test_sphere_depth(self):
        cam = CameraModel(40.0, 40.0, 23.5, 15.5, 48, 32)
        scene = synth.scene_with_primitives([synth.Sphere(np.array([0.0, 0.0, 10.0]), 2.0)])
        _, depth = synth.render_view(scene, cam, PoseSE3.identity())
        # the ray through the principal point meets the sphere's front pole
        assert depth.data[15:17, 23:25].min() == pytest.approx(8.0, abs=0.02)

    def test_matches_closed_form(self, scene):
        rig = synth.build_rig(SMALL)
        V = compose(translation(0.2, 0.0, 0.4), rot_y(0.1))
        views = synth.render(scene, rig, V)
        for cam, T, (_, depth) in zip(rig.cameras, rig.extrinsics, views):
            M = compose(V, T)
            best = np.full((cam.height, cam.width), np.inf)
            # independent per-primitive loop over plane equations n.(o + z r) = n.p
            for prim in scene.primitives:
                n = np.asarray(prim.normal)
                for v in range(cam.height):
                    for u in range(cam.width):
                        r = M.rotation @ np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
                        den = n @ r
                        if abs(den) < 1e-12:
                            continue
                        z = n @ (np.asarray(prim.point) - M.translation) / den
                        if 1e-9 < z < best[v, u]:
                            best[v, u] = z
            assert np.abs(depth.data - best).max() <= 1e-9

    def test_depth_at_matches_render(self, scene, rig, frames):
        cam, T = rig.cameras[2], rig.extrinsics[2]
        pts = np.array([[10.0, 20.0], [160.0, 96.0], [300.0, 150.0]])
        d = synth.depth_at(scene, cam, T, pts)
        grid = frames[2][1].data
        assert np.allclose(d, grid[pts[:, 1].astype(int), pts[:, 0].astype(int)], rtol=1e-12)


class TestSequence:
    def test_counts(self, scene):
        rig = synth.build_rig(SMALL)
        seq = synth.make_sequence(scene, rig, translation(0, 0, 0.5), 3)
        assert seq.steps == 3
        assert sum(len(f) for f in seq.frames) == 3 * len(rig)

    def test_needs_two_steps(self, scene):
        with pytest.raises(ValueError):
            synth.make_sequence(scene, synth.build_rig(SMALL), PoseSE3.identity(), 1)

    def test_identity_motion(self, scene):
        seq = synth.make_sequence(scene, synth.build_rig(SMALL), PoseSE3.identity(), 2)
        for (ia, da), (ib, db) in zip(*seq.frames):
            assert np.array_equal(ia.data, ib.data) and np.array_equal(da.data, db.data)

    def test_ego_motion_is_given_motion(self, scene):
        motion = compose(translation(0.1, 0, 0.5), rot_y(0.05))
        seq = synth.make_sequence(scene, synth.build_rig(SMALL), motion, 3)
        assert seq.ego_motion(1, 0).allclose(motion, 1e-12)
        assert seq.ego_motion(2, 1).allclose(motion, 1e-12)
        assert seq.ego_motion(0, 1).allclose(inverse(motion), 1e-12)

    def test_camera_motion_is_conjugated(self, scene):
        rig = synth.build_rig(SMALL)
        motion = translation(0, 0, 0.5)
        seq = synth.make_sequence(scene, rig, motion, 2)
        for i, T in enumerate(rig.extrinsics):
            assert seq.camera_motion(i, 1, 0).allclose(universal_to_local(motion, T), 1e-9)

    def test_forward_motion_shrinks_front_depth(self):
        rig = synth.build_rig(SMALL)
        scene = synth.scene_with_primitives([synth.fronto_plane(10.0)])
        seq = synth.make_sequence(scene, rig, translation(0, 0, 0.5), 2)
        d0, d1 = seq.frames[0][0][1].data, seq.frames[1][0][1].data
        assert np.allclose(d0 - d1, 0.5)
