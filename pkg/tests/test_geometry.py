"""Geometry contracts: frustum math, lifting, splatting, ego-motion, warping."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevcast import geometry as G
from bevcast import tensor as T
from bevcast.tensor import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def random_se3(r, max_angle=np.pi, max_t=5.0):
    axis = r.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = r.uniform(-max_angle, max_angle)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    rot = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
    return G.SE3Transform(rot, r.uniform(-max_t, max_t, 3))


class TestSE3:
    def test_identity_composition(self):
        out = G.compose_egomotion([G.SE3Transform.identity(), G.SE3Transform.identity()])
        np.testing.assert_allclose(out.to_matrix(), np.eye(4), atol=1e-12)

    def test_translation_composition(self):
        a = G.SE3Transform(np.eye(3), (1, 0, 0))
        b = G.SE3Transform(np.eye(3), (0, 2, 0))
        out = G.compose_egomotion([a, b])
        np.testing.assert_allclose(out.translation, [1, 2, 0], atol=1e-12)

    def test_four_quarter_turns_identity(self):
        quarter = G.SE3Transform.from_yaw_translation(np.pi / 2)
        out = G.compose_egomotion([quarter] * 4)
        np.testing.assert_allclose(out.to_matrix(), np.eye(4), atol=1e-9)

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            G.compose_egomotion([])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_associativity(self, seed):
        r = rng(seed)
        a, b, c = (random_se3(r) for _ in range(3))
        left = a.compose(b).compose(c)
        right = a.compose(b.compose(c))
        np.testing.assert_allclose(left.to_matrix(), right.to_matrix(), atol=1e-9)

    def test_inverse_roundtrip(self):
        m = random_se3(rng(3))
        np.testing.assert_allclose((m @ m.inverse()).to_matrix(), np.eye(4), atol=1e-12)

    def test_reorthonormalization_on_drift(self):
        r = np.eye(3) + 1e-6 * rng(1).standard_normal((3, 3))
        m = G.SE3Transform(r, np.zeros(3))
        np.testing.assert_allclose(m.rotation.T @ m.rotation, np.eye(3), atol=1e-12)


class TestFrustum:
    def test_paper_depth_slice_count(self):
        spec = G.DepthSpec(2.0, 50.0, 1.0)
        assert spec.num_slices == 48

    def test_principal_point_on_axis(self):
        intr = G.CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)
        fr = G.create_frustum(intr, 1, G.DepthSpec(2.0, 6.0, 1.0))
        # pixel (50, 50) is the principal point; stride 1 keeps pixel coords
        pt = fr.points[2, 50, 50]
        np.testing.assert_allclose(pt, [0.0, 0.0, 4.0], atol=1e-12)

    def test_pinhole_formula_by_hand(self):
        intr = G.CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 200, 100)
        fr = G.create_frustum(intr, 1, G.DepthSpec(10.0, 11.0, 1.0))
        pt = fr.points[0, 50, 150]
        np.testing.assert_allclose(pt, [10.0, 0.0, 10.0], atol=1e-12)

    def test_depth_equals_slice_depth(self):
        intr = G.CameraIntrinsics(40.0, 40.0, 28.0, 16.0, 56, 32)
        ds = G.DepthSpec(2.0, 10.0, 2.0)
        fr = G.create_frustum(intr, 8, ds)
        for k, d in enumerate(ds.slice_depths()):
            assert np.all(fr.points[k, :, :, 2] == d)

    def test_stride_divisibility_checked(self):
        intr = G.CameraIntrinsics(40.0, 40.0, 25.0, 16.0, 50, 32)
        with pytest.raises(ValueError, match="divisible"):
            G.create_frustum(intr, 8, G.DepthSpec(2.0, 4.0, 1.0))


class TestLift:
    def test_one_hot_depth(self):
        feats = Tensor(rng(0).standard_normal((3, 2, 2)))
        logits = np.full((4, 2, 2), -1e3)
        logits[1] = 1e3
        out = G.lift_features(feats, Tensor(logits))
        np.testing.assert_allclose(out.data[:, 1], feats.data, atol=1e-12)
        assert np.abs(out.data[:, [0, 2, 3]]).max() < 1e-12

    def test_uniform_mode(self):
        feats = Tensor(rng(1).standard_normal((3, 2, 2)))
        logits = Tensor(rng(2).standard_normal((4, 2, 2)))
        out = G.lift_features(feats, logits, mode="uniform")
        for d in range(4):
            np.testing.assert_allclose(out.data[:, d], feats.data / 4, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_mass_identity(self, seed):
        r = rng(seed)
        feats = Tensor(r.standard_normal((3, 4, 5)))
        logits = Tensor(r.standard_normal((6, 4, 5)) * 3)
        for mode in ("learned", "uniform"):
            out = G.lift_features(feats, logits, mode=mode)
            np.testing.assert_allclose(out.data.sum(axis=1), feats.data, atol=1e-12)


def identity_rig_spec():
    return G.BevSpec(10.0, 10.0, 0.5)


class TestSplat:
    def test_single_point_at_origin(self):
        spec = identity_rig_spec()
        lifted = Tensor(np.array([[[[2.5]]], [[[1.0]]]]))  # C=2, D=1, 1x1
        frustum = G.FrustumGrid(np.zeros((1, 1, 1, 3)))
        # camera placed at the ego origin looking anywhere; point is at origin
        grid = G.splat_to_bev(lifted, frustum, G.SE3Transform.identity(), spec)
        r, c, ok = spec.cells_of_points(np.zeros((1, 3)))
        assert ok.all()
        np.testing.assert_allclose(grid.values.data[:, r[0], c[0]], [2.5, 1.0])
        assert grid.values.data.sum() == pytest.approx(3.5)

    def test_two_points_same_cell_sum(self):
        spec = identity_rig_spec()
        pts = np.zeros((2, 1, 1, 3))
        pts[0, 0, 0] = [0.1, 0.1, 0.0]
        pts[1, 0, 0] = [0.2, 0.2, 0.0]  # same 0.5 m cell
        lifted = Tensor(np.array([[[[1.0]], [[2.0]]]]))  # C=1, D=2
        grid = G.splat_to_bev(lifted, G.FrustumGrid(pts), G.SE3Transform.identity(), spec)
        assert grid.values.data.max() == pytest.approx(3.0)
        assert grid.values.data.sum() == pytest.approx(3.0)

    def test_out_of_range_points_dropped_and_tallied(self):
        spec = identity_rig_spec()
        pts = np.zeros((2, 1, 1, 3))
        pts[1, 0, 0] = [100.0, 0.0, 0.0]
        lifted = Tensor(np.ones((1, 2, 1, 1)))
        grid = G.splat_to_bev(lifted, G.FrustumGrid(pts), G.SE3Transform.identity(), spec)
        assert grid.values.data.sum() == pytest.approx(1.0)
        assert grid.dropped_points == 1

    def test_mass_conservation_random_rigs(self):
        # independent per-point accumulation oracle, 100 random rigs
        for seed in range(100):
            r = rng(seed)
            spec = G.BevSpec(20.0, 20.0, 0.5)
            d, he, we = 3, 2, 4
            lifted = r.standard_normal((2, d, he, we))
            frustum = G.FrustumGrid(r.uniform(-4, 4, (d, he, we, 3)))
            ext = random_se3(r, max_angle=np.pi, max_t=3.0)
            zr = (-1.5, 2.0)
            grid = G.splat_to_bev(Tensor(lifted), frustum, ext, spec, zr)

            oracle = np.zeros((2, spec.height, spec.width))
            dropped = 0
            for di in range(d):
                for hi in range(he):
                    for wi in range(we):
                        p = ext.apply(frustum.points[di, hi, wi])
                        rr, cc, ok = spec.cells_of_points(p[None])
                        if ok[0] and zr[0] <= p[2] <= zr[1]:
                            oracle[:, rr[0], cc[0]] += lifted[:, di, hi, wi]
                        else:
                            dropped += 1
            np.testing.assert_allclose(grid.values.data, oracle, atol=1e-9)
            assert grid.dropped_points == dropped
            np.testing.assert_allclose(grid.values.data.sum(), oracle.sum(), atol=1e-9)

    def test_gradient_reaches_features(self):
        spec = identity_rig_spec()
        lifted = Tensor(rng(0).standard_normal((2, 2, 2, 2)), requires_grad=True)
        frustum = G.FrustumGrid(rng(1).uniform(-2, 2, (2, 2, 2, 3)))
        grid = G.splat_to_bev(lifted, frustum, G.SE3Transform.identity(), spec)
        grid.values.sum().backward()
        assert lifted.grad is not None
        assert np.count_nonzero(lifted.grad) > 0


class TestWarp:
    def make_grid(self, seed=0, n=20, c=3):
        spec = G.BevSpec(n * 0.5, n * 0.5, 0.5)
        vals = Tensor(rng(seed).standard_normal((c, n, n)))
        return G.BevGrid(spec, vals)

    def test_identity_motion_exact(self):
        grid = self.make_grid()
        out = G.warp_bev(grid, G.SE3Transform.identity())
        np.testing.assert_array_equal(out.values.data, grid.values.data)

    def test_one_cell_translation_is_raster_shift(self):
        grid = self.make_grid(seed=2)
        motion = G.SE3Transform(np.eye(3), (0.5, 0.0, 0.0))  # +x by one cell
        out = G.warp_bev(grid, motion)
        # content moves forward: row r of the output equals row r+1 of the input
        np.testing.assert_allclose(out.values.data[:, :-1, :], grid.values.data[:, 1:, :],
                                   atol=1e-12)

    def test_180_yaw_flips_raster(self):
        grid = self.make_grid(seed=3)
        out = G.warp_bev(grid, G.SE3Transform.from_yaw_translation(np.pi))
        np.testing.assert_allclose(out.values.data, grid.values.data[:, ::-1, ::-1], atol=1e-9)

    def test_forward_backward_identity_interior(self):
        grid = self.make_grid(seed=4)
        motion = G.SE3Transform(np.eye(3), (1.0, -0.5, 0.0))
        back = G.warp_bev(G.warp_bev(grid, motion), motion.inverse())
        np.testing.assert_allclose(back.values.data[:, 4:-4, 4:-4],
                                   grid.values.data[:, 4:-4, 4:-4], atol=1e-6)

    def test_roll_pitch_z_ignored(self):
        grid = self.make_grid(seed=5)
        tilt = random_se3(rng(9), max_angle=0.0)
        tilted = G.SE3Transform(
            tilt.rotation @ np.array([[1, 0, 0], [0, np.cos(0.3), -np.sin(0.3)],
                                      [0, np.sin(0.3), np.cos(0.3)]]),
            (0.0, 0.0, 2.0))
        out = G.warp_bev(grid, tilted)
        np.testing.assert_array_equal(out.values.data, grid.values.data)

    def test_gradients_flow(self):
        spec = G.BevSpec(8.0, 8.0, 0.5)
        vals = Tensor(rng(6).standard_normal((2, 16, 16)), requires_grad=True)
        out = G.warp_bev(G.BevGrid(spec, vals), G.SE3Transform.from_yaw_translation(0.2, 0.7, 0.1))
        out.values.sum().backward()
        assert vals.grad is not None and np.abs(vals.grad).sum() > 0


class TestEgoWarpPhysics:
    def test_feature_ahead_moves_closer_when_ego_advances(self):
        """World content must slide backwards through the raster as ego drives on."""
        spec = G.BevSpec(20.0, 20.0, 0.5)
        vals = np.zeros((1, spec.height, spec.width))
        r, c, ok = spec.cells_of_points(np.array([[5.0, 0.0, 0.0]]))
        vals[0, r[0], c[0]] = 1.0
        step = G.SE3Transform(np.eye(3), (1.0, 0.0, 0.0))  # ego 1 m forward per frame
        motion = G.present_from_past([step, step])
        out = G.warp_bev(G.BevGrid(spec, Tensor(vals)), motion)
        r2, c2, _ = spec.cells_of_points(np.array([[3.0, 0.0, 0.0]]))
        assert out.values.data[0, r2[0], c2[0]] == pytest.approx(1.0, abs=1e-9)

    def test_turning_ego_two_steps(self):
        """Compose a translation and a yaw step; track one world point by hand."""
        spec = G.BevSpec(20.0, 20.0, 0.25)
        a0 = G.SE3Transform.from_yaw_translation(0.0, 2.0, 0.0)
        a1 = G.SE3Transform.from_yaw_translation(np.pi / 2, 0.0, 0.0)
        # pose_0 = I, pose_1 = a0, pose_2 = a0·a1 (position (2,0), yaw 90°)
        world_pt = np.array([4.0, 1.0, 0.0])
        p_past = world_pt  # frame 0 coords
        pose2 = a0.compose(a1)
        p_present = pose2.inverse().apply(world_pt)
        motion = G.present_from_past([a0, a1])
        np.testing.assert_allclose(motion.apply(p_past), p_present, atol=1e-12)

        vals = np.zeros((1, spec.height, spec.width))
        r, c, _ = spec.cells_of_points(p_past[None])
        vals[0, r[0], c[0]] = 1.0
        out = G.warp_bev(G.BevGrid(spec, Tensor(vals)), motion)
        r2, c2, ok = spec.cells_of_points(p_present[None])
        assert ok[0]
        # bilinear resampling may spread the unit mass across adjacent cells,
        # but it must all land in the immediate neighborhood of the target
        hood = out.values.data[0, r2[0] - 1:r2[0] + 2, c2[0] - 1:c2[0] + 2]
        assert hood.sum() == pytest.approx(1.0, abs=1e-9)
        assert out.values.data.sum() == pytest.approx(1.0, abs=1e-9)


class TestRigIO:
    def test_roundtrip(self, tmp_path):
        intr = G.CameraIntrinsics(47.0, 47.0, 56.0, 32.0, 112, 64)
        ext = G.SE3Transform.from_yaw_translation(0.3, 0.1, -0.2, 1.6)
        rig = G.CameraRig(["cam_0"], [intr], [ext])
        path = tmp_path / "rig.json"
        rig.save(path)
        back = G.CameraRig.load(path)
        assert back.names == ["cam_0"]
        assert back.intrinsics[0] == intr
        np.testing.assert_allclose(back.extrinsics[0].to_matrix(), ext.to_matrix(), atol=1e-12)
