"""From raw head outputs to temporally consistent instance timelines.

Pipeline per frame: non-maximum suppression on centerness, offset-guided
pixel grouping, then center matching across frames via minimum-cost
assignment on flow-warped positions. Also hosts the static/extrapolation
prediction baselines. Everything here is plain numpy; tie-breaks are total
orders so decoding is deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from bevcast.tensor import Tensor


@dataclass
class FrameOutputs:
    """Decoded heads for one timestep."""

    seg_logits: Tensor      # [2, H, W]
    centerness: Tensor      # [1, H, W], sigmoid range
    offset: Tensor          # [2, H, W], (row, col) cells toward instance center
    flow: Tensor | None     # [2, H, W], (row, col) cells/frame, this frame -> next

    def seg_mask(self, threshold: float = 0.5) -> np.ndarray:
        logits = self.seg_logits.data
        shifted = logits - logits.max(axis=0, keepdims=True)
        e = np.exp(shifted)
        prob_fg = e[1] / e.sum(axis=0)
        return prob_fg > threshold


@dataclass
class PostprocParams:
    center_threshold: float = 0.1
    nms_window: int = 3
    seg_threshold: float = 0.5
    match_radius: float = 3.0


@dataclass
class InstanceTimeline:
    """Per-timestep id rasters; one id means one tracked agent throughout."""

    frames: list[np.ndarray] = field(default_factory=list)
    first_seen: dict[int, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    def ids(self):
        return sorted(self.first_seen)

    @staticmethod
    def from_id_rasters(rasters) -> "InstanceTimeline":
        tl = InstanceTimeline()
        for t, ras in enumerate(rasters):
            ras = np.asarray(ras, dtype=np.int64)
            tl.frames.append(ras)
            for uid in np.unique(ras):
                if uid > 0 and int(uid) not in tl.first_seen:
                    tl.first_seen[int(uid)] = t
        return tl

    def crop_center(self, rows: int, cols: int) -> "InstanceTimeline":
        h, w = self.frames[0].shape
        r0 = (h - rows) // 2
        c0 = (w - cols) // 2
        return InstanceTimeline.from_id_rasters(
            [f[r0:r0 + rows, c0:c0 + cols] for f in self.frames])


def nms_centers(centerness, threshold: float, window: int = 3):
    """Peaks of a centerness map: list of (row, col, score), best first.

    A pixel wins iff it exceeds the threshold and no window neighbor has a
    larger value or an equal value at a lexicographically smaller position.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    if window % 2 != 1 or window < 1:
        raise ValueError(f"window must be odd, got {window}")
    cmap = np.asarray(centerness, dtype=np.float64)
    if cmap.ndim == 3:
        cmap = cmap[0]
    h, w = cmap.shape
    half = window // 2
    keep = cmap > threshold
    padded = np.full((h + 2 * half, w + 2 * half), -np.inf)
    padded[half:half + h, half:half + w] = cmap
    for dr in range(-half, half + 1):
        for dc in range(-half, half + 1):
            if dr == 0 and dc == 0:
                continue
            shifted = padded[half + dr:half + dr + h, half + dc:half + dc + w]
            beats_us = shifted > cmap
            if (dr, dc) < (0, 0):  # equal-valued neighbor wins on lexicographic order
                beats_us = beats_us | (shifted == cmap)
            keep &= ~beats_us
    rows, cols = np.nonzero(keep)
    found = [(int(r), int(c), float(cmap[r, c])) for r, c in zip(rows, cols)]
    found.sort(key=lambda rc: (-rc[2], rc[0], rc[1]))
    return found


def group_pixels(centers, offset, seg_mask) -> np.ndarray:
    """Assign every foreground pixel to its offset-nearest center.

    Returns an id raster where center k (0-based list index) owns id k+1.
    Ties go to the lowest center index; with no centers, everything is
    background.
    """
    offset = np.asarray(offset, dtype=np.float64)
    seg_mask = np.asarray(seg_mask, dtype=bool)
    if offset.shape[1:] != seg_mask.shape:
        raise ValueError(f"offset {offset.shape} vs mask {seg_mask.shape}")
    ids = np.zeros(seg_mask.shape, dtype=np.int64)
    if not centers:
        return ids
    rows, cols = np.nonzero(seg_mask)
    if rows.size == 0:
        return ids
    tr = rows + offset[0, rows, cols]
    tc = cols + offset[1, rows, cols]
    centers_arr = np.array([[r, c] for r, c, _ in centers], dtype=np.float64)
    d2 = (tr[:, None] - centers_arr[None, :, 0]) ** 2 + (tc[:, None] - centers_arr[None, :, 1]) ** 2
    ids[rows, cols] = np.argmin(d2, axis=1) + 1
    return ids


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment; returns min(n, m) (row, col) pairs.

    Potentials-and-augmenting-paths formulation, O(n^2 m).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError(f"cost must be a non-empty 2-D matrix, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    transposed = False
    if cost.shape[0] > cost.shape[1]:
        cost = cost.T
        transposed = True
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match_of_col = np.zeros(m + 1, dtype=np.int64)  # row matched to each column
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match_of_col[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_of_col[j0]
            delta = inf
            j1 = -1
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[match_of_col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_of_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_of_col[j0] = match_of_col[j1]
            j0 = j1
    pairs = [(int(match_of_col[j]) - 1, j - 1) for j in range(1, m + 1) if match_of_col[j]]
    if transposed:
        pairs = [(c, r) for r, c in pairs]
    return sorted(pairs)


def track_instances(prev_centers, prev_ids, prev_flow, curr_centers,
                    match_radius: float, next_id: int):
    """Carry ids from the previous frame's centers to the current ones.

    Previous centers are displaced by the flow sampled at their own pixel
    (zero displacement when ``prev_flow`` is None), matched to current
    centers by minimum total distance, and matches farther than
    ``match_radius`` are rejected. Unmatched current centers draw fresh ids
    starting at ``next_id``. Returns (curr_ids, next_id).
    """
    if not curr_centers:
        return [], next_id
    if not prev_centers:
        ids = list(range(next_id, next_id + len(curr_centers)))
        return ids, next_id + len(curr_centers)
    warped = []
    for r, c, _ in prev_centers:
        if prev_flow is None:
            warped.append((float(r), float(c)))
        else:
            warped.append((r + float(prev_flow[0, r, c]), c + float(prev_flow[1, r, c])))
    cost = np.zeros((len(warped), len(curr_centers)))
    for i, (wr, wc) in enumerate(warped):
        for j, (r, c, _) in enumerate(curr_centers):
            cost[i, j] = np.hypot(wr - r, wc - c)
    curr_ids = [-1] * len(curr_centers)
    for i, j in hungarian(cost):
        if cost[i, j] <= match_radius:
            curr_ids[j] = prev_ids[i]
    for j in range(len(curr_centers)):
        if curr_ids[j] == -1:
            curr_ids[j] = next_id
            next_id += 1
    return curr_ids, next_id


def decode_frame(outputs: FrameOutputs, params: PostprocParams):
    """One frame: NMS centers plus the raw (center-indexed) grouping raster."""
    centers = nms_centers(outputs.centerness.data, params.center_threshold, params.nms_window)
    mask = outputs.seg_mask(params.seg_threshold)
    raw_ids = group_pixels(centers, outputs.offset.data, mask)
    return centers, raw_ids


def decode_timeline(outputs_list, params: PostprocParams | None = None) -> InstanceTimeline:
    """NMS + grouping per frame, then flow-based tracking across frames."""
    params = params or PostprocParams()
    timeline = InstanceTimeline()
    prev_centers: list = []
    prev_ids: list = []
    prev_flow = None
    next_id = 1
    for t, outputs in enumerate(outputs_list):
        centers, raw_ids = decode_frame(outputs, params)
        if t == 0:
            ids = list(range(1, len(centers) + 1))
            next_id = len(centers) + 1
        else:
            ids, next_id = track_instances(prev_centers, prev_ids, prev_flow, centers,
                                           params.match_radius, next_id)
        frame = np.zeros_like(raw_ids)
        for k, uid in enumerate(ids):
            frame[raw_ids == k + 1] = uid
            if uid not in timeline.first_seen:
                timeline.first_seen[uid] = t
        timeline.frames.append(frame)
        prev_centers, prev_ids = centers, ids
        prev_flow = outputs.flow.data if outputs.flow is not None else None
    return timeline


def baseline_predict(mode: str, past_frames, horizon: int) -> InstanceTimeline:
    """Prediction baselines over decoded past frames in the present frame.

    ``past_frames`` is a chronological list of (id_raster, centers, ids); the
    last entry is the present. ``static`` repeats the present raster;
    ``extrapolate`` re-identifies instances across the past with assignment
    matching, fits a constant velocity per instance, and translates each
    present mask rigidly per future step.
    """
    if not past_frames:
        raise ValueError("baseline_predict needs at least the present frame")
    present_map, present_centers, present_ids = past_frames[-1]
    frames = [present_map.copy()]
    if mode == "static":
        frames.extend(present_map.copy() for _ in range(horizon))
        return InstanceTimeline.from_id_rasters(frames)
    if mode != "extrapolate":
        raise ValueError(f"unknown baseline mode {mode!r}")

    # chain past detections into tracks ending at the present centers
    tracks = {uid: [(float(r), float(c))] for (r, c, _), uid
              in zip(present_centers, present_ids)}
    prev_pos = {uid: (float(r), float(c)) for (r, c, _), uid
                in zip(present_centers, present_ids)}
    step_back = 0
    for past_map, centers, ids in reversed(past_frames[:-1]):
        step_back += 1
        if not centers or not prev_pos:
            break
        live = sorted(prev_pos)
        cost = np.zeros((len(live), len(centers)))
        for i, uid in enumerate(live):
            for j, (r, c, _) in enumerate(centers):
                cost[i, j] = np.hypot(prev_pos[uid][0] - r, prev_pos[uid][1] - c)
        matched = {}
        for i, j in hungarian(cost):
            if cost[i, j] <= 4.0 * step_back:
                matched[live[i]] = (float(centers[j][0]), float(centers[j][1]))
        for uid, pos in matched.items():
            tracks[uid].append(pos)
        prev_pos = matched

    velocity = {}
    for uid, seq in tracks.items():
        if len(seq) < 2:
            velocity[uid] = (0.0, 0.0)
            continue
        # seq runs from present backwards; least-squares slope per cell axis
        steps = -np.arange(len(seq), dtype=np.float64)
        pos = np.array(seq)
        denom = ((steps - steps.mean()) ** 2).sum()
        vr = ((steps - steps.mean()) * (pos[:, 0] - pos[:, 0].mean())).sum() / denom
        vc = ((steps - steps.mean()) * (pos[:, 1] - pos[:, 1].mean())).sum() / denom
        velocity[uid] = (vr, vc)

    h, w = present_map.shape
    for j in range(1, horizon + 1):
        frame = np.zeros_like(present_map)
        for uid in sorted(velocity):
            dr = int(round(velocity[uid][0] * j))
            dc = int(round(velocity[uid][1] * j))
            rows, cols = np.nonzero(present_map == uid)
            nr, nc = rows + dr, cols + dc
            ok = (nr >= 0) & (nr < h) & (nc >= 0) & (nc < w)
            frame[nr[ok], nc[ok]] = uid
        frames.append(frame)
    return InstanceTimeline.from_id_rasters(frames)


# -- timeline serialization ---------------------------------------------------


def save_timeline(timeline: InstanceTimeline, directory) -> None:
    """One 16-bit PGM per frame plus a JSON id registry."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(timeline.frames):
        if frame.max() > 65535 or frame.min() < 0:
            raise ValueError("instance ids exceed the 16-bit raster range")
        _write_pgm16(directory / f"frame_{t:04d}.pgm", frame.astype(np.uint16))
    registry = {"version": 1, "first_seen": {str(k): v for k, v in timeline.first_seen.items()}}
    with open(directory / "registry.json", "w") as fp:
        json.dump(registry, fp, indent=1, sort_keys=True)


def load_timeline(directory) -> InstanceTimeline:
    directory = Path(directory)
    with open(directory / "registry.json") as fp:
        registry = json.load(fp)
    if registry.get("version") != 1:
        raise ValueError(f"unsupported timeline version {registry.get('version')!r}")
    frames = []
    for path in sorted(directory.glob("frame_*.pgm")):
        frames.append(_read_pgm16(path).astype(np.int64))
    tl = InstanceTimeline.from_id_rasters(frames)
    tl.first_seen = {int(k): v for k, v in registry["first_seen"].items()}
    return tl


def _write_pgm16(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fp:
        fp.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n65535\n".encode())
        fp.write(arr.astype(">u2").tobytes())


def _read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as fp:
        raw = fp.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    if parts[2] != b"65535":
        raise ValueError(f"{path}: expected 16-bit maxval")
    payload = parts[3]
    want = w * h * 2
    if len(payload) < want:
        header = len(raw) - len(payload)
        raise ValueError(f"{path}: truncated at offset {header + len(payload)} "
                         f"(need {want} payload bytes, have {len(payload)})")
    return np.frombuffer(payload[:want], dtype=">u2").reshape(h, w)
