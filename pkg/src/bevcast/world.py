"""Synthetic box-world: kinematic agents, a moving camera rig, crude rendering.

Scenes are rectangular agents on a flat checkerboard ground plane, driven by
static / constant-velocity / constant-turn profiles, observed by an ego
vehicle with surround pinhole cameras. Rendering is flat-shaded z-buffered
rasterization: no textures or lighting, but perspective, occlusion and
motion are real. Everything is deterministic given a seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from bevcast.geometry import CameraIntrinsics, CameraRig, SE3Transform
from bevcast.labels import AgentBox

NEAR_CLIP = 0.2
GROUND_CHECKER_M = 2.0
GROUND_COLORS = ((92, 92, 96), (150, 150, 156))
SKY_COLOR = (178, 205, 228)


class DatasetError(RuntimeError):
    pass


def agent_color(global_index: int) -> tuple[int, int, int]:
    """A stable, well-separated color per agent via the golden-ratio hue walk."""
    hue = (0.137 + global_index * 0.61803398875) % 1.0
    i = int(hue * 6)
    f = hue * 6 - i
    v, p, q, t = 1.0, 0.25, 1.0 - 0.75 * f, 0.25 + 0.75 * f
    r, g, b = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]
    return int(r * 255), int(g * 255), int(b * 255)


@dataclass
class Agent:
    instance_id: int
    length: float
    width: float
    height: float
    color: tuple[int, int, int]
    xs: np.ndarray      # world x per frame
    ys: np.ndarray
    yaws: np.ndarray


@dataclass
class Scene:
    duration: int
    ego_poses: list          # SE3Transform per frame, ego -> world
    agents: list[Agent]

    def ego_motions(self) -> list[SE3Transform]:
        """Step motions a_i with pose(i+1) = pose(i) · a_i."""
        return [self.ego_poses[i].inverse() @ self.ego_poses[i + 1]
                for i in range(self.duration - 1)]


@dataclass
class SceneParams:
    duration: int = 10
    n_agents_min: int = 2
    n_agents_max: int = 4
    spawn_radius: float = 14.0
    min_spawn_distance: float = 4.0
    min_separation: float = 2.5
    agent_length: tuple[float, float] = (3.8, 5.0)
    agent_width: tuple[float, float] = (1.8, 2.4)
    agent_height: tuple[float, float] = (1.5, 1.9)
    speed_max: float = 1.5            # m/frame for constant-velocity agents
    turn_rate_max: float = 0.15       # rad/frame for constant-turn agents
    p_static: float = 0.4
    p_turning: float = 0.2
    ego_speed: float = 0.5            # m/frame
    ego_yaw_rate: float = 0.0         # rad/frame
    color_offset: int = 0             # shifts the agent palette between scenes

    def to_json_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

    @staticmethod
    def from_json_dict(obj: dict) -> "SceneParams":
        known = set(SceneParams.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown scene params: {sorted(unknown)}")
        fixed = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
        return SceneParams(**fixed)


def _trajectory(r, params, kind, spawn, heading):
    ts = np.arange(params.duration, dtype=np.float64)
    if kind == "static":
        xs = np.full_like(ts, spawn[0])
        ys = np.full_like(ts, spawn[1])
        yaws = np.full_like(ts, heading)
    elif kind == "cv":
        speed = r.uniform(0.4 * params.speed_max, params.speed_max)
        xs = spawn[0] + ts * speed * np.cos(heading)
        ys = spawn[1] + ts * speed * np.sin(heading)
        yaws = np.full_like(ts, heading)
    else:  # constant turn
        speed = r.uniform(0.4 * params.speed_max, params.speed_max)
        omega = r.uniform(0.4, 1.0) * params.turn_rate_max * (1 if r.random() < 0.5 else -1)
        radius = speed / abs(omega)
        side = np.sign(omega)
        cx = spawn[0] - side * radius * np.sin(heading)
        cy = spawn[1] + side * radius * np.cos(heading)
        angles = heading - side * np.pi / 2 + omega * ts
        xs = cx + radius * np.cos(angles)
        ys = cy + radius * np.sin(angles)
        yaws = heading + omega * ts
    return xs, ys, yaws


def simulate_scene(params: SceneParams, seed: int) -> Scene:
    """Sample agents and motion profiles; reject trajectories that collide."""
    r = np.random.default_rng(seed)
    yaw = 0.0
    pos = np.zeros(2)
    ego_poses = []
    for _ in range(params.duration):
        ego_poses.append(SE3Transform.from_yaw_translation(yaw, pos[0], pos[1]))
        pos = pos + params.ego_speed * np.array([np.cos(yaw), np.sin(yaw)])
        yaw += params.ego_yaw_rate

    n_agents = int(r.integers(params.n_agents_min, params.n_agents_max + 1))
    agents: list[Agent] = []
    attempts = 0
    while len(agents) < n_agents and attempts < 200:
        attempts += 1
        spawn = r.uniform(-params.spawn_radius, params.spawn_radius, 2)
        if np.linalg.norm(spawn) < params.min_spawn_distance:
            continue
        heading = r.uniform(-np.pi, np.pi)
        u = r.random()
        kind = "static" if u < params.p_static else \
            ("turn" if u < params.p_static + params.p_turning else "cv")
        xs, ys, yaws = _trajectory(r, params, kind, spawn, heading)
        length = r.uniform(*params.agent_length)
        width = r.uniform(*params.agent_width)
        height = r.uniform(*params.agent_height)
        # keep agents clear of each other and of the ego path, all frames
        radius = 0.5 * np.hypot(length, width)
        ok = True
        for other in agents:
            other_radius = 0.5 * np.hypot(other.length, other.width)
            dist = np.hypot(xs - other.xs, ys - other.ys)
            if (dist < radius + other_radius + params.min_separation).any():
                ok = False
                break
        if ok:
            ego_xy = np.array([[p.translation[0], p.translation[1]] for p in ego_poses])
            dist = np.hypot(xs - ego_xy[:, 0], ys - ego_xy[:, 1])
            if (dist < radius + 2.0 + params.min_separation).any():
                ok = False
        if not ok:
            continue
        idx = len(agents)
        agents.append(Agent(idx + 1, length, width, height,
                            agent_color(params.color_offset + idx), xs, ys, yaws))
    return Scene(params.duration, ego_poses, agents)


def boxes_for_frame(scene: Scene, frame: int) -> list[AgentBox]:
    """All agent boxes in the ego frame of ``frame`` (visibility not yet set)."""
    inv = scene.ego_poses[frame].inverse()
    out = []
    for agent in scene.agents:
        center_w = np.array([agent.xs[frame], agent.ys[frame], agent.height / 2])
        center_e = inv.apply(center_w)
        yaw_e = agent.yaws[frame] - scene.ego_poses[frame].yaw()
        out.append(AgentBox(agent.instance_id, tuple(center_e),
                            (agent.length, agent.width, agent.height), float(yaw_e)))
    return out


def default_rig(n_cameras: int = 4, width: int = 112, height: int = 64,
                hfov_deg: float = 100.0, mount_height: float = 1.6) -> CameraRig:
    """Evenly spaced surround cameras at the ego center."""
    fx = (width / 2) / np.tan(np.radians(hfov_deg) / 2)
    intr = CameraIntrinsics(fx, fx, width / 2, height / 2, width, height)
    # columns: camera axes (x right, y down, z forward) expressed in ego axes
    base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    names, intrs, exts = [], [], []
    for k in range(n_cameras):
        yaw = 2 * np.pi * k / n_cameras
        c, s = np.cos(yaw), np.sin(yaw)
        yaw_rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        names.append(f"cam_{k}")
        intrs.append(intr)
        exts.append(SE3Transform(yaw_rot @ base, (0.0, 0.0, mount_height)))
    return CameraRig(names, intrs, exts)


# -- rendering ------------------------------------------------------------------


def _box_corners(agent: Agent, frame: int) -> np.ndarray:
    """8 world-frame corners of the agent box at a frame."""
    l, w, h = agent.length / 2, agent.width / 2, agent.height
    local = np.array([[sx, sy, sz] for sx in (-l, l) for sy in (-w, w) for sz in (0.0, h)])
    yaw = agent.yaws[frame]
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + np.array([agent.xs[frame], agent.ys[frame], 0.0])


# corner indexing: bit0 z, bit1 y, bit2 x; two triangles per box face
_BOX_FACES = (
    (0, 1, 3, 2),  # -x
    (4, 6, 7, 5),  # +x
    (0, 4, 5, 1),  # -y
    (2, 3, 7, 6),  # +y
    (1, 5, 7, 3),  # top
    (0, 2, 6, 4),  # bottom
)
_FACE_SHADE = (0.75, 1.0, 0.65, 0.9, 1.1, 0.5)


def _clip_triangle_near(tri: np.ndarray):
    """Sutherland-Hodgman clip of one camera-space triangle against z=NEAR."""
    out = []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        ain, bin_ = a[2] >= NEAR_CLIP, b[2] >= NEAR_CLIP
        if ain:
            out.append(a)
        if ain != bin_:
            t = (NEAR_CLIP - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    if len(out) < 3:
        return []
    return [np.array([out[0], out[i], out[i + 1]]) for i in range(1, len(out) - 1)]


def _raster_triangle(tri_cam, color, instance_id, intr, img, zbuf, idbuf):
    for tri in _clip_triangle_near(tri_cam):
        z = tri[:, 2]
        u = intr.fx * tri[:, 0] / z + intr.cx
        v = intr.fy * tri[:, 1] / z + intr.cy
        lo_u = max(int(np.floor(u.min())), 0)
        hi_u = min(int(np.ceil(u.max())), intr.width - 1)
        lo_v = max(int(np.floor(v.min())), 0)
        hi_v = min(int(np.ceil(v.max())), intr.height - 1)
        if lo_u > hi_u or lo_v > hi_v:
            continue
        px, py = np.meshgrid(np.arange(lo_u, hi_u + 1), np.arange(lo_v, hi_v + 1))
        d = (u[1] - u[0]) * (v[2] - v[0]) - (u[2] - u[0]) * (v[1] - v[0])
        if abs(d) < 1e-12:
            continue
        w1 = ((px - u[0]) * (v[2] - v[0]) - (py - v[0]) * (u[2] - u[0])) / d
        w2 = ((px - u[0]) * -(v[1] - v[0]) + (py - v[0]) * (u[1] - u[0])) / d
        w0 = 1.0 - w1 - w2
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        if not inside.any():
            continue
        inv_z = w0 / z[0] + w1 / z[1] + w2 / z[2]
        depth = np.where(inv_z > 0, 1.0 / np.maximum(inv_z, 1e-12), np.inf)
        rows = py[inside]
        cols = px[inside]
        dd = depth[inside]
        closer = dd < zbuf[rows, cols]
        rows, cols, dd = rows[closer], cols[closer], dd[closer]
        zbuf[rows, cols] = dd
        img[rows, cols] = color
        idbuf[rows, cols] = instance_id


def _render_ground(intr: CameraIntrinsics, cam_pose_world: SE3Transform):
    """Checkerboard ground plane and sky, plus the ground depth buffer."""
    px, py = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    dirs_cam = np.stack([(px - intr.cx) / intr.fx, (py - intr.cy) / intr.fy,
                         np.ones_like(px, dtype=np.float64)], axis=-1)
    rot = cam_pose_world.rotation
    origin = cam_pose_world.translation
    dirs_w = dirs_cam @ rot.T
    img = np.empty((intr.height, intr.width, 3), dtype=np.uint8)
    img[:] = SKY_COLOR
    zbuf = np.full((intr.height, intr.width), np.inf)
    dz = dirs_w[..., 2]
    hits = dz < -1e-9
    t = np.where(hits, -origin[2] / np.where(hits, dz, -1.0), 0.0)
    gx = origin[0] + t * dirs_w[..., 0]
    gy = origin[1] + t * dirs_w[..., 1]
    checker = ((np.floor(gx / GROUND_CHECKER_M) + np.floor(gy / GROUND_CHECKER_M)) % 2).astype(int)
    depth = t * dirs_cam[..., 2]  # camera-frame z of the hit
    for which in (0, 1):
        sel = hits & (checker == which)
        img[sel] = GROUND_COLORS[which]
    zbuf[hits] = depth[hits]
    return img, zbuf


def render_camera(scene: Scene, intr: CameraIntrinsics, cam_pose_world: SE3Transform,
                  frame: int):
    """(rgb uint8 [H,W,3], instance id buffer [H,W]) for one camera."""
    img, zbuf = _render_ground(intr, cam_pose_world)
    idbuf = np.zeros((intr.height, intr.width), dtype=np.int64)
    world_to_cam = cam_pose_world.inverse()
    for agent in scene.agents:
        corners_w = _box_corners(agent, frame)
        corners_c = world_to_cam.apply(corners_w)
        if (corners_c[:, 2] < NEAR_CLIP).all():
            continue
        base = np.array(agent.color, dtype=np.float64)
        for face, shade in zip(_BOX_FACES, _FACE_SHADE):
            color = np.clip(base * shade, 0, 255).astype(np.uint8)
            quad = corners_c[list(face)]
            _raster_triangle(quad[[0, 1, 2]], color, agent.instance_id, intr, img, zbuf, idbuf)
            _raster_triangle(quad[[0, 2, 3]], color, agent.instance_id, intr, img, zbuf, idbuf)
    return img, idbuf


def render_cameras(scene: Scene, rig: CameraRig, frame: int):
    """All cameras of one frame: (list of rgb images, list of id buffers)."""
    images, idbufs = [], []
    ego_pose = scene.ego_poses[frame]
    for intr, ext in zip(rig.intrinsics, rig.extrinsics):
        cam_pose = ego_pose @ ext
        img, idbuf = render_camera(scene, intr, cam_pose, frame)
        images.append(img)
        idbufs.append(idbuf)
    return images, idbufs


def visibility_filter(boxes: list[AgentBox], id_buffers, min_pixels: int = 5) -> list[AgentBox]:
    """Flag each box visible iff some camera shows >= min_pixels of it."""
    counts = {}
    for buf in id_buffers:
        ids, n = np.unique(buf, return_counts=True)
        for uid, cnt in zip(ids, n):
            if uid > 0:
                counts[int(uid)] = max(counts.get(int(uid), 0), int(cnt))
    out = []
    for box in boxes:
        visible = counts.get(box.instance_id, 0) >= min_pixels
        out.append(AgentBox(box.instance_id, box.center, box.size, box.yaw, visible))
    return out


@dataclass
class RenderedSample:
    """One scene, rendered: the model-facing data package."""

    scene_id: int
    rig: CameraRig
    images: list                 # [frame][camera] uint8 [H,W,3]
    ego_poses: list              # SE3Transform per frame
    ego_motions: list            # SE3Transform per step
    boxes: list                  # [frame] list of AgentBox (visibility set)

    @property
    def duration(self) -> int:
        return len(self.images)


def render_scene(scene: Scene, rig: CameraRig, scene_id: int = 0) -> RenderedSample:
    images, boxes = [], []
    for frame in range(scene.duration):
        imgs, idbufs = render_cameras(scene, rig, frame)
        images.append(imgs)
        boxes.append(visibility_filter(boxes_for_frame(scene, frame), idbufs))
    return RenderedSample(scene_id, rig, images, scene.ego_poses,
                          scene.ego_motions(), boxes)


# -- PPM image IO ----------------------------------------------------------------


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("write_ppm expects uint8 [H,W,3]")
    with open(path, "wb") as fp:
        fp.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fp.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fp:
        raw = fp.read()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise DatasetError(f"{path}: not a binary PPM")
    try:
        w, h = (int(x) for x in parts[1].split())
    except ValueError as exc:
        raise DatasetError(f"{path}: bad PPM size line") from exc
    payload = parts[3]
    want = w * h * 3
    if len(payload) < want:
        header = len(raw) - len(payload)
        raise DatasetError(f"{path}: truncated image data at offset {header + len(payload)} "
                           f"(need {want} payload bytes, have {len(payload)})")
    return np.frombuffer(payload[:want], dtype=np.uint8).reshape(h, w, 3).copy()


# -- dataset export/import --------------------------------------------------------

MANIFEST_NAME = "dataset.json"


def export_dataset(samples: list[RenderedSample], path, seed: int | None = None,
                   params: SceneParams | None = None) -> None:
    """Directory layout: scene_XXXX/{rig,ego,boxes}.json + frame_YYYY/cam_Z.ppm."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    scene_dirs = []
    for sample in samples:
        name = f"scene_{sample.scene_id:04d}"
        scene_dirs.append(name)
        sdir = root / name
        sdir.mkdir(exist_ok=True)
        sample.rig.save(sdir / "rig.json")
        ego = {"version": 1,
               "poses": [p.to_matrix().tolist() for p in sample.ego_poses],
               "motions": [m.to_matrix().tolist() for m in sample.ego_motions]}
        with open(sdir / "ego.json", "w") as fp:
            json.dump(ego, fp, sort_keys=True)
        frames = [[b.to_json_dict() for b in frame] for frame in sample.boxes]
        with open(sdir / "boxes.json", "w") as fp:
            json.dump({"version": 1, "frames": frames}, fp, sort_keys=True)
        for t, imgs in enumerate(sample.images):
            fdir = sdir / f"frame_{t:04d}"
            fdir.mkdir(exist_ok=True)
            for k, img in enumerate(imgs):
                write_ppm(fdir / f"cam_{k}.ppm", img)
    manifest = {"version": 1, "seed": seed, "scenes": scene_dirs,
                "params": params.to_json_dict() if params else None}
    with open(root / MANIFEST_NAME, "w") as fp:
        json.dump(manifest, fp, indent=1, sort_keys=True)


def import_dataset(path) -> list[RenderedSample]:
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetError(f"no {MANIFEST_NAME} under {root}")
    with open(manifest_path) as fp:
        manifest = json.load(fp)
    if manifest.get("version") != 1:
        raise DatasetError(f"unsupported dataset version {manifest.get('version')!r}")
    samples = []
    for name in manifest["scenes"]:
        sdir = root / name
        rig = CameraRig.load(sdir / "rig.json")
        with open(sdir / "ego.json") as fp:
            ego = json.load(fp)
        poses = [SE3Transform.from_matrix(np.array(m)) for m in ego["poses"]]
        motions = [SE3Transform.from_matrix(np.array(m)) for m in ego["motions"]]
        with open(sdir / "boxes.json") as fp:
            boxes_obj = json.load(fp)
        boxes = [[AgentBox.from_json_dict(b) for b in frame] for frame in boxes_obj["frames"]]
        images = []
        for t in range(len(poses)):
            fdir = sdir / f"frame_{t:04d}"
            imgs = []
            for k in range(len(rig)):
                imgs.append(read_ppm(fdir / f"cam_{k}.ppm"))
            images.append(imgs)
        samples.append(RenderedSample(int(name.split("_")[1]), rig, images, poses,
                                      motions, boxes))
    return samples
