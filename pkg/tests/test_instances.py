"""Instance decoding: NMS, grouping, assignment, tracking, baselines."""

import numpy as np
import pytest

from bevcast import instances as I
from bevcast.tensor import Tensor
from oracles import assignment_cost, brute_force_assignment


def gaussian_bump(h, w, cr, cc, sigma=3.0, peak=1.0):
    rr, cc_ = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return peak * np.exp(-((rr - cr) ** 2 + (cc_ - cc) ** 2) / (2 * sigma**2))


class TestNms:
    def test_single_bump_single_center(self):
        cmap = gaussian_bump(20, 20, 7, 11)
        centers = I.nms_centers(cmap, 0.1, 3)
        assert centers == [(7, 11, 1.0)]

    def test_all_below_threshold(self):
        cmap = np.full((10, 10), 0.05)
        assert I.nms_centers(cmap, 0.1, 3) == []

    def test_two_bumps_match_exhaustive_scan(self):
        cmap = np.maximum(gaussian_bump(30, 30, 5, 5), gaussian_bump(30, 30, 5, 15, peak=0.8))
        centers = I.nms_centers(cmap, 0.1, 3)

        # oracle: full scan with the same rule
        expected = []
        for r in range(30):
            for c in range(30):
                v = cmap[r, c]
                if v <= 0.1:
                    continue
                win = cmap[max(0, r - 1):r + 2, max(0, c - 1):c + 2]
                if v < win.max():
                    continue
                tie_better = False
                for rr in range(max(0, r - 1), min(30, r + 2)):
                    for cc in range(max(0, c - 1), min(30, c + 2)):
                        if cmap[rr, cc] == v and (rr, cc) < (r, c):
                            tie_better = True
                if not tie_better:
                    expected.append((r, c, v))
        expected.sort(key=lambda x: (-x[2], x[0], x[1]))
        assert centers == expected
        assert [(r, c) for r, c, _ in centers] == [(5, 5), (5, 15)]

    def test_plateau_resolved_lexicographically(self):
        cmap = np.zeros((8, 8))
        cmap[3, 3] = cmap[3, 4] = 0.9
        centers = I.nms_centers(cmap, 0.1, 3)
        assert [(r, c) for r, c, _ in centers] == [(3, 3)]

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            I.nms_centers(np.zeros((4, 4)), 0.0, 3)
        with pytest.raises(ValueError):
            I.nms_centers(np.zeros((4, 4)), 0.5, 4)


class TestGroupPixels:
    def test_single_center_takes_all(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[2:5, 2:5] = True
        ids = I.group_pixels([(3, 3, 1.0)], np.zeros((2, 10, 10)), mask)
        assert set(ids[mask]) == {1}
        assert (ids[~mask] == 0).all()

    def test_offset_lands_on_center(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[1, 1] = True
        offset = np.zeros((2, 8, 8))
        offset[:, 1, 1] = [4, 5]  # points at (5, 6)
        ids = I.group_pixels([(0, 0, 1.0), (5, 6, 0.9)], offset, mask)
        assert ids[1, 1] == 2

    def test_no_centers_all_background(self):
        mask = np.ones((5, 5), dtype=bool)
        ids = I.group_pixels([], np.zeros((2, 5, 5)), mask)
        assert (ids == 0).all()

    def test_partition_matches_bruteforce(self):
        r = np.random.default_rng(0)
        h = w = 16
        centers = [(4, 4, 1.0), (11, 12, 0.9)]
        mask = r.random((h, w)) < 0.4
        offset = r.standard_normal((2, h, w))
        ids = I.group_pixels(centers, offset, mask)
        for (rr, cc) in zip(*np.nonzero(mask)):
            tr = rr + offset[0, rr, cc]
            tc = cc + offset[1, rr, cc]
            dists = [np.hypot(tr - r0, tc - c0) for r0, c0, _ in centers]
            assert ids[rr, cc] == int(np.argmin(dists)) + 1

    def test_every_foreground_pixel_assigned(self):
        r = np.random.default_rng(3)
        mask = r.random((12, 12)) < 0.5
        ids = I.group_pixels([(6, 6, 1.0)], r.standard_normal((2, 12, 12)), mask)
        assert ((ids > 0) == mask).all()


class TestHungarian:
    def test_single_entry(self):
        assert I.hungarian([[3.0]]) == [(0, 0)]

    def test_identity_favoring(self):
        cost = np.ones((4, 4)) - np.eye(4)
        pairs = I.hungarian(cost)
        assert pairs == [(i, i) for i in range(4)]
        assert sum(cost[i, j] for i, j in pairs) == 0.0

    def test_rectangular_shapes(self):
        cost = np.array([[1.0, 0.0, 5.0], [2.0, 3.0, 0.5]])
        pairs = I.hungarian(cost)
        assert len(pairs) == 2
        assert sum(cost[i, j] for i, j in pairs) == pytest.approx(0.5)

    def test_nan_rejected(self):
        with pytest.raises(ValueError, match="NaN"):
            I.hungarian(np.array([[np.nan, 1.0], [1.0, 2.0]]))

    def test_200_random_matrices_match_bruteforce(self):
        r = np.random.default_rng(42)
        for _ in range(200):
            n = int(r.integers(1, 8))
            m = int(r.integers(1, 8))
            cost = r.uniform(-10, 10, (n, m))
            pairs = I.hungarian(cost)
            got = assignment_cost(cost, pairs)
            want, _ = brute_force_assignment(cost)
            assert got == want, f"{cost} -> {pairs}"


class TestTracking:
    def test_identity_with_zero_flow(self):
        centers = [(3, 3, 1.0), (8, 8, 0.9)]
        ids, nxt = I.track_instances(centers, [1, 2], None, centers, 3.0, 3)
        assert ids == [1, 2] and nxt == 3

    def test_flow_carries_id_over_large_motion(self):
        prev = [(5, 5, 1.0)]
        flow = np.zeros((2, 16, 16))
        flow[:, 5, 5] = [0, 2]
        curr = [(5, 7, 1.0)]
        ids, _ = I.track_instances(prev, [4], flow, curr, 1.0, 5)
        assert ids == [4]
        # without flow the 2-cell jump exceeds the radius: fresh id
        ids2, nxt = I.track_instances(prev, [4], None, curr, 1.0, 5)
        assert ids2 == [5] and nxt == 6

    def test_empty_previous_frame(self):
        ids, nxt = I.track_instances([], [], None, [(1, 1, 0.5), (2, 2, 0.4)], 3.0, 7)
        assert ids == [7, 8] and nxt == 9


def outputs_from_labels(seg, centerness, offset, flow):
    """Perfect-head FrameOutputs from label-style arrays."""
    logits = np.stack([np.where(seg > 0, -10.0, 10.0), np.where(seg > 0, 10.0, -10.0)])
    return I.FrameOutputs(
        seg_logits=Tensor(logits),
        centerness=Tensor(centerness if centerness.ndim == 3 else centerness[None]),
        offset=Tensor(offset),
        flow=Tensor(flow) if flow is not None else None,
    )


def square_scene_outputs(positions_per_frame, h=32, w=32):
    """Little synthetic frames: 3x3 squares with exact centerness/offset/flow."""
    frames = []
    for t, positions in enumerate(positions_per_frame):
        seg = np.zeros((h, w))
        cmap = np.zeros((h, w))
        offset = np.zeros((2, h, w))
        flow = np.zeros((2, h, w))
        for k, (r, c) in enumerate(positions):
            seg[r - 1:r + 2, c - 1:c + 2] = 1.0
            cmap = np.maximum(cmap, gaussian_bump(h, w, r, c))
            rr, cc = np.meshgrid(np.arange(r - 1, r + 2), np.arange(c - 1, c + 2), indexing="ij")
            offset[0, r - 1:r + 2, c - 1:c + 2] = r - rr
            offset[1, r - 1:r + 2, c - 1:c + 2] = c - cc
            if t + 1 < len(positions_per_frame):
                nr, nc = positions_per_frame[t + 1][k]
                flow[0, r - 1:r + 2, c - 1:c + 2] = nr - r
                flow[1, r - 1:r + 2, c - 1:c + 2] = nc - c
        frames.append(outputs_from_labels(seg, cmap, offset, flow))
    return frames


class TestDecodeTimeline:
    def test_static_agent_keeps_id(self):
        frames = square_scene_outputs([[(10, 10)], [(10, 10)], [(10, 10)]])
        tl = I.decode_timeline(frames)
        assert len(tl) == 3
        assert tl.ids() == [1]
        for f in tl.frames:
            assert (f[9:12, 9:12] == 1).all()

    def test_fast_agent_needs_flow(self):
        positions = [[(5, 5)], [(5, 10)], [(5, 15)]]
        frames = square_scene_outputs(positions)
        tl = I.decode_timeline(frames, I.PostprocParams(match_radius=3.0))
        assert tl.ids() == [1]

        # strip the flow: the 5-cell jump exceeds the radius, ids switch
        frames_noflow = square_scene_outputs(positions)
        for f in frames_noflow:
            f.flow = None
        tl2 = I.decode_timeline(frames_noflow, I.PostprocParams(match_radius=3.0))
        assert len(tl2.ids()) == 3

    def test_empty_scene(self):
        seg = np.zeros((16, 16))
        frames = [outputs_from_labels(seg, np.zeros((16, 16)), np.zeros((2, 16, 16)),
                                      np.zeros((2, 16, 16))) for _ in range(3)]
        tl = I.decode_timeline(frames)
        assert tl.ids() == []
        assert all((f == 0).all() for f in tl.frames)

    def test_deterministic(self):
        frames = square_scene_outputs([[(6, 6), (20, 20)], [(7, 6), (20, 21)]])
        a = I.decode_timeline(frames)
        b = I.decode_timeline(square_scene_outputs([[(6, 6), (20, 20)], [(7, 6), (20, 21)]]))
        assert all((x == y).all() for x, y in zip(a.frames, b.frames))
        assert a.first_seen == b.first_seen


class TestBaselines:
    def make_past(self, positions, h=32, w=32):
        """Past decoded frames [(map, centers, ids)] for one agent id 1."""
        out = []
        for r, c in positions:
            m = np.zeros((h, w), dtype=np.int64)
            m[r - 1:r + 2, c - 1:c + 2] = 1
            out.append((m, [(r, c, 1.0)], [1]))
        return out

    def test_static_repeats_present(self):
        past = self.make_past([(10, 10), (12, 10)])
        tl = I.baseline_predict("static", past, 3)
        assert len(tl) == 4
        for f in tl.frames:
            assert (f == past[-1][0]).all()

    def test_extrapolate_static_agent_equals_static(self):
        past = self.make_past([(10, 10), (10, 10), (10, 10)])
        tl_e = I.baseline_predict("extrapolate", past, 2)
        tl_s = I.baseline_predict("static", past, 2)
        assert all((a == b).all() for a, b in zip(tl_e.frames, tl_s.frames))

    def test_extrapolate_constant_velocity(self):
        past = self.make_past([(10, 10), (11, 10), (12, 10)])  # 1 cell/frame down
        tl = I.baseline_predict("extrapolate", past, 3)
        for j in range(1, 4):
            rows = np.nonzero(tl.frames[j] == 1)[0]
            assert rows.mean() == pytest.approx(12 + j)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            I.baseline_predict("hover", self.make_past([(5, 5)]), 1)


class TestTimelineIO:
    def test_roundtrip(self, tmp_path):
        frames = square_scene_outputs([[(8, 8)], [(9, 8)]])
        tl = I.decode_timeline(frames)
        I.save_timeline(tl, tmp_path / "tl")
        back = I.load_timeline(tmp_path / "tl")
        assert len(back) == len(tl)
        for a, b in zip(tl.frames, back.frames):
            assert (a == b).all()
        assert back.first_seen == tl.first_seen

    def test_truncated_pgm_names_offset(self, tmp_path):
        frames = square_scene_outputs([[(8, 8)]])
        tl = I.decode_timeline(frames)
        I.save_timeline(tl, tmp_path / "tl")
        path = sorted((tmp_path / "tl").glob("*.pgm"))[0]
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(ValueError, match="offset"):
            I.load_timeline(tmp_path / "tl")
