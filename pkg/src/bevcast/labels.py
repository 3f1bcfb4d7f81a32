"""Training label rasters from 3D agent boxes.

Boxes arrive in the ego frame of their own timestep; everything is moved
into the present frame with the ground-truth ego motion, rasterized as
rotated-rectangle footprints, and expanded into segmentation, centerness,
center offset, future flow and id rasters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bevcast.geometry import BevSpec, SE3Transform, compose_egomotion

LABEL_CHANNELS = 6  # seg 1 + centerness 1 + offset 2 + flow 2


@dataclass
class AgentBox:
    instance_id: int
    center: tuple[float, float, float]  # meters, ego frame at the box's timestep
    size: tuple[float, float, float]    # length (heading), width, height
    yaw: float
    visible: bool = True

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValueError(f"box sizes must be positive, got {self.size}")

    def to_json_dict(self) -> dict:
        return {"id": self.instance_id, "center": list(self.center),
                "size": list(self.size), "yaw": self.yaw, "visible": self.visible}

    @staticmethod
    def from_json_dict(obj: dict) -> "AgentBox":
        return AgentBox(int(obj["id"]), tuple(obj["center"]), tuple(obj["size"]),
                        float(obj["yaw"]), bool(obj["visible"]))


@dataclass
class FrameLabels:
    segmentation: np.ndarray  # [1, H, W] binary
    centerness: np.ndarray    # [1, H, W] in [0, 1]
    offset: np.ndarray        # [2, H, W] (row, col) cells, pixel -> instance center
    flow: np.ndarray          # [2, H, W] (row, col) cells/frame, this frame -> next
    instance_ids: np.ndarray  # [H, W] int

    def stacked(self) -> np.ndarray:
        """The 6-channel conditioning layout: seg, centerness, offset, flow."""
        return np.concatenate([self.segmentation, self.centerness, self.offset, self.flow])


def rasterize_box_footprint(spec: BevSpec, center_xy, yaw: float, length: float,
                            width: float) -> np.ndarray:
    """Cells whose centers fall inside the rotated rectangle footprint."""
    xs, ys = spec.cell_centers()
    dx = xs - center_xy[0]
    dy = ys - center_xy[1]
    cos_y, sin_y = np.cos(yaw), np.sin(yaw)
    local_x = cos_y * dx + sin_y * dy
    local_y = -sin_y * dx + cos_y * dy
    return (np.abs(local_x) <= length / 2) & (np.abs(local_y) <= width / 2)


def generate_labels(boxes_per_timestep, future_ego_motions, bev_spec: BevSpec,
                    sigma: float = 3.0) -> list[FrameLabels]:
    """Labels for frames t..t+H, all expressed in the frame-t ego coordinates.

    ``future_ego_motions`` lists the per-step motions a_t..a_{t+H-1}; frame
    t+j boxes are carried back through the first j of them. Invisible boxes
    are dropped. Offsets point at the mask's integer-rounded center of mass;
    flow stores the center displacement to the next frame for ids present in
    both, zero elsewhere.
    """
    n_frames = len(boxes_per_timestep)
    if n_frames == 0:
        return []
    if len(future_ego_motions) < n_frames - 1:
        raise ValueError(
            f"need {n_frames - 1} ego motions for {n_frames} frames, got {len(future_ego_motions)}")
    h, w = bev_spec.height, bev_spec.width

    id_rasters = []
    centers_of_mass = []  # per frame: {id: (row, col) ints}
    for j, boxes in enumerate(boxes_per_timestep):
        seen = set()
        for box in boxes:
            if box.instance_id in seen:
                raise ValueError(f"duplicate instance id {box.instance_id} in frame {j}")
            seen.add(box.instance_id)
        if j == 0:
            to_present = SE3Transform.identity()
        else:
            to_present = compose_egomotion(list(reversed(future_ego_motions[:j])))
        ids = np.zeros((h, w), dtype=np.int64)
        for box in boxes:
            if not box.visible:
                continue
            center = to_present.apply(np.asarray(box.center))
            yaw = box.yaw + to_present.yaw()
            mask = rasterize_box_footprint(bev_spec, center[:2], yaw,
                                           box.size[0], box.size[1])
            ids[mask] = box.instance_id
        coms = {}
        for uid in np.unique(ids):
            if uid == 0:
                continue
            rows, cols = np.nonzero(ids == uid)
            # half-up rounding keeps rounded centers translation-equivariant
            coms[int(uid)] = (int(np.floor(rows.mean() + 0.5)), int(np.floor(cols.mean() + 0.5)))
        id_rasters.append(ids)
        centers_of_mass.append(coms)

    labels = []
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for j in range(n_frames):
        ids = id_rasters[j]
        coms = centers_of_mass[j]
        seg = (ids > 0).astype(np.float64)[None]
        centerness = np.zeros((h, w))
        offset = np.zeros((2, h, w))
        flow = np.zeros((2, h, w))
        next_coms = centers_of_mass[j + 1] if j + 1 < n_frames else {}
        for uid, (cr, ccol) in coms.items():
            bump = np.exp(-((rr - cr) ** 2 + (cc - ccol) ** 2) / (2.0 * sigma * sigma))
            centerness = np.maximum(centerness, bump)
            pix = ids == uid
            offset[0][pix] = cr - rr[pix]
            offset[1][pix] = ccol - cc[pix]
            if uid in next_coms:
                flow[0][pix] = next_coms[uid][0] - cr
                flow[1][pix] = next_coms[uid][1] - ccol
        labels.append(FrameLabels(seg, centerness[None], offset, flow, ids))
    return labels
