"""The learned model: image encoder, BEV temporal fusion, variational future.

The forward pass lifts each camera's features along predicted depth slices,
pools them into a shared BEV raster per timestep, warps the past rasters to
the present, fuses them with a causal 3D-conv temporal network, samples a
latent future code, unrolls future BEV states with a convolutional GRU, and
decodes every state into segmentation / centerness / offset / flow heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from bevcast import geometry as G
from bevcast import tensor as T
from bevcast.geometry import BevSpec, CameraRig, DepthSpec, SE3Transform
from bevcast.instances import FrameOutputs
from bevcast.layers import (ChannelNorm, Conv2d, Conv3d, ConvGRUCell, ConvNormRelu,
                            Module, ModuleList, Parameter, ResidualBlock2d,
                            UpsampleConcatConv)
from bevcast.tensor import Tensor

ABLATION_FLAGS = ("no_temporal", "no_transformation", "no_unrolling",
                  "no_future_flow", "uniform_depth", "deterministic",
                  "unit_gaussian_prior")

ACTION_CHANNELS = 3  # spatially broadcast planar ego motion (yaw, tx, ty)


@dataclass
class ModelConfig:
    n_cameras: int = 4
    past_context: int = 3
    horizon: int = 4
    channels: int = 24
    latent_dim: int = 8
    depth_min: float = 2.0
    depth_max: float = 26.0
    depth_size: float = 1.5
    bev_x_extent: float = 50.0
    bev_y_extent: float = 50.0
    bev_resolution: float = 0.5
    image_height: int = 64
    image_width: int = 112
    temporal_blocks: int = 2
    z_min: float = -2.0
    z_max: float = 4.0
    label_channels: int = 6
    no_temporal: bool = False
    no_transformation: bool = False
    no_unrolling: bool = False
    no_future_flow: bool = False
    uniform_depth: bool = False
    deterministic: bool = False
    unit_gaussian_prior: bool = False

    ENCODER_STRIDE = 8

    def __post_init__(self):
        if self.past_context < 1:
            raise ValueError("past_context must be >= 1")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.channels < 2:
            raise ValueError("channels must be >= 2")
        if self.image_height % self.ENCODER_STRIDE or self.image_width % self.ENCODER_STRIDE:
            raise ValueError(
                f"image dims must be divisible by the encoder stride {self.ENCODER_STRIDE}")
        self.depth_spec  # validate
        self.bev_spec

    @property
    def depth_spec(self) -> DepthSpec:
        return DepthSpec(self.depth_min, self.depth_max, self.depth_size)

    @property
    def bev_spec(self) -> BevSpec:
        return BevSpec(self.bev_x_extent, self.bev_y_extent, self.bev_resolution)

    @property
    def z_range(self):
        return (self.z_min, self.z_max)

    def ablations(self) -> list[str]:
        return [f for f in ABLATION_FLAGS if getattr(self, f)]

    def to_json_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json_dict(obj: dict) -> "ModelConfig":
        known = set(ModelConfig.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return ModelConfig(**obj)


@dataclass
class LatentDistribution:
    """Diagonal Gaussian over the latent code; tensors are [B, L]."""

    mean: Tensor
    log_std: Tensor

    def std(self) -> Tensor:
        return T.exp(T.clip(self.log_std, -20.0, 5.0))


def sample_latent(dist: LatentDistribution, mode: str = "sample",
                  rng: np.random.Generator | None = None) -> Tensor:
    """Reparameterized draw (gradients reach mean and log_std) or the mean."""
    if mode == "mean":
        return dist.mean
    if mode != "sample":
        raise ValueError(f"unknown sampling mode {mode!r}")
    if rng is None:
        raise ValueError("sample mode needs a generator")
    z = rng.standard_normal(dist.mean.shape)
    return dist.mean + dist.std() * Tensor(z)


class ImageEncoder(Module):
    """Four-stage plain CNN, stride 8, emitting feature + depth-logit channels."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        c = cfg.channels
        d = cfg.depth_spec.num_slices
        self.out_channels = c
        self.depth_slices = d
        self.stem = ConvNormRelu(rng, 3, 16, stride=2)
        self.stem2 = ConvNormRelu(rng, 16, 16)
        self.stage2 = ConvNormRelu(rng, 16, c, stride=2)
        self.stage2b = ConvNormRelu(rng, c, c)
        self.stage3 = ConvNormRelu(rng, c, c, stride=2)
        self.stage3b = ConvNormRelu(rng, c, c)
        self.head = Conv2d(rng, c, c + d, 3)

    def forward(self, images: Tensor):
        """[N,3,H,W] -> (features [N,C,H/8,W/8], depth logits [N,D,H/8,W/8])."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected [N,3,H,W] images, got {images.shape}")
        h = self.stem2(self.stem(images))
        h = self.stage2b(self.stage2(h))
        h = self.stage3b(self.stage3(h))
        out = self.head(h)
        return out[:, :self.out_channels], out[:, self.out_channels:]


class TemporalBlock(Module):
    """Three compressed branches over [N,C,T,H,W] fused onto a skip path.

    Branches: a (2,3,3) conv, a (1,3,3) conv, and a pairwise-temporal global
    spatial average broadcast back; each runs behind a 1x1x1 compression to
    half the input channels. Temporal kernels are causal via replicate
    padding on the left, so T is preserved.
    """

    def __init__(self, rng, cin: int, cout: int):
        super().__init__()
        if cin < 2:
            raise ValueError(f"temporal block needs >= 2 input channels, got {cin}")
        half = cin // 2
        self.compress_a = Conv3d(rng, cin, half, (1, 1, 1))
        self.norm_ca = ChannelNorm(half)
        self.compress_b = Conv3d(rng, cin, half, (1, 1, 1))
        self.norm_cb = ChannelNorm(half)
        self.compress_c = Conv3d(rng, cin, half, (1, 1, 1))
        self.norm_cc = ChannelNorm(half)
        self.conv_a = Conv3d(rng, half, half, (2, 3, 3), padding=(0, 1, 1))
        self.norm_a = ChannelNorm(half)
        self.conv_b = Conv3d(rng, half, half, (1, 3, 3), padding=(0, 1, 1))
        self.norm_b = ChannelNorm(half)
        self.fuse = Conv3d(rng, 3 * half, cout, (1, 1, 1))
        self.proj = Conv3d(rng, cin, cout, (1, 1, 1)) if cin != cout else None

    @staticmethod
    def _pad_left(x):
        return T.concat([x[:, :, 0:1], x], axis=2)

    def forward(self, x: Tensor) -> Tensor:
        a = T.relu(self.norm_ca(self.compress_a(x)))
        a = T.relu(self.norm_a(self.conv_a(self._pad_left(a))))
        b = T.relu(self.norm_cb(self.compress_b(x)))
        b = T.relu(self.norm_b(self.conv_b(b)))
        c = T.relu(self.norm_cc(self.compress_c(x)))
        cp = self._pad_left(c)
        pooled = (cp[:, :, :-1] + cp[:, :, 1:]) * 0.5
        pooled = pooled.mean(axis=(3, 4), keepdims=True)
        c = T.broadcast_to(pooled, c.shape)
        fused = self.fuse(T.concat([a, b, c], axis=1))
        skip = self.proj(x) if self.proj is not None else x
        return fused + skip


class TemporalModel(Module):
    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        if cfg.no_temporal:
            self.present_proj = Conv2d(rng, c, c, 1, padding=0)
        else:
            cin = c + ACTION_CHANNELS
            blocks = []
            for i in range(cfg.temporal_blocks):
                blocks.append(TemporalBlock(rng, cin if i == 0 else c, c))
            self.blocks = ModuleList(blocks)

    def forward(self, stack: Tensor | None, present: Tensor) -> Tensor:
        """[B,C+A,T,H,W] history plus [B,C,H,W] present -> state [B,C,H,W]."""
        if self.cfg.no_temporal:
            return self.present_proj(present)
        h = stack
        for block in self.blocks:
            h = block(h)
        return h[:, :, h.shape[2] - 1]


class DistributionHead(Module):
    """Four stride-2 residual blocks, global average, 1x1 conv to 2L values."""

    def __init__(self, rng, cin: int, latent_dim: int):
        super().__init__()
        self.cin = cin
        self.latent_dim = latent_dim
        chans = [max(cin // (2 ** (i + 1)), 4) for i in range(4)]
        blocks = []
        prev = cin
        for c in chans:
            blocks.append(ResidualBlock2d(rng, prev, c, stride=2))
            prev = c
        self.blocks = ModuleList(blocks)
        self.final = Conv2d(rng, prev, 2 * latent_dim, 1, padding=0)

    def forward(self, x: Tensor) -> LatentDistribution:
        if x.shape[1] != self.cin:
            raise ValueError(f"distribution head expects {self.cin} channels, got {x.shape[1]}")
        h = x
        for block in self.blocks:
            h = block(h)
        pooled = h.mean(axis=(2, 3), keepdims=True)
        out = self.final(pooled).reshape((x.shape[0], 2 * self.latent_dim))
        return LatentDistribution(out[:, :self.latent_dim], out[:, self.latent_dim:])


class FuturePredictor(Module):
    """Recurrent future rollout: conv-GRU plus three residual blocks per step.

    The latent code is broadcast over the raster and fed as the recurrent
    input at every step; each step's output becomes the next hidden state.
    The no_unrolling variant maps (state, code) to all future states at once.
    """

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        if cfg.no_unrolling:
            self.direct = ConvNormRelu(rng, c + cfg.latent_dim, c)
            self.direct_out = Conv2d(rng, c, cfg.horizon * c, 1, padding=0)
        else:
            self.gru = ConvGRUCell(rng, c, cfg.latent_dim)
            self.refine = ModuleList([ResidualBlock2d(rng, c, c) for _ in range(3)])

    def forward(self, state: Tensor, eta_map: Tensor, horizon: int) -> list[Tensor]:
        if horizon == 0:
            return []
        c = self.cfg.channels
        if self.cfg.no_unrolling:
            if horizon != self.cfg.horizon:
                raise ValueError("no_unrolling head is built for the configured horizon")
            h = self.direct(T.concat([state, eta_map], axis=1))
            flat = self.direct_out(h)
            return [flat[:, j * c:(j + 1) * c] for j in range(horizon)]
        states = []
        h = state
        for _ in range(horizon):
            g = self.gru(h, eta_map)
            for block in self.refine:
                g = block(g)
            states.append(g)
            h = g
        return states


class Decoder(Module):
    """Shared backbone (stride-2 stem, three residual stages, three 2x
    upsamplings with skips) and one two-conv head per output."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        c = cfg.channels
        s1, s2, s3 = c, 2 * c, 4 * c
        hid = max(8, c // 2)
        self.stem = ConvNormRelu(rng, c, c, stride=2)
        self.stage1 = ModuleList([ResidualBlock2d(rng, c, s1), ResidualBlock2d(rng, s1, s1)])
        self.stage2 = ModuleList([ResidualBlock2d(rng, s1, s2, 2), ResidualBlock2d(rng, s2, s2)])
        self.stage3 = ModuleList([ResidualBlock2d(rng, s2, s3, 2), ResidualBlock2d(rng, s3, s3)])
        self.up1 = UpsampleConcatConv(rng, s3, s2, s2)
        self.up2 = UpsampleConcatConv(rng, s2, s1, s1)
        self.pre_up3 = ConvNormRelu(rng, s1, c)
        self.fuse3 = Conv2d(rng, 2 * c, c, 1, padding=0)
        self.fuse3_norm = ChannelNorm(c)
        self.head_seg = self._head(rng, c, hid, 2)
        self.head_center = self._head(rng, c, hid, 1)
        self.head_offset = self._head(rng, c, hid, 2)
        if not cfg.no_future_flow:
            self.head_flow = self._head(rng, c, hid, 2)
        self.cfg = cfg

    @staticmethod
    def _head(rng, cin, hid, cout):
        return ModuleList([ConvNormRelu(rng, cin, hid), Conv2d(rng, hid, cout, 1, padding=0)])

    @staticmethod
    def _run_head(head, x):
        return head[1](head[0](x))

    def forward(self, state: Tensor) -> FrameOutputs:
        squeeze = state.ndim == 3
        if squeeze:
            state = state.reshape((1,) + state.shape)
        x = state
        h = self.stem(x)
        for block in self.stage1:
            h = block(h)
        skip1 = h
        for block in self.stage2:
            h = block(h)
        skip2 = h
        for block in self.stage3:
            h = block(h)
        h = self.up1(h, skip2)
        h = self.up2(h, skip1)
        h = self.pre_up3(h)
        up = T.upsample_bilinear2x(h)
        up = up[:, :, :x.shape[2], :x.shape[3]]
        h = T.relu(self.fuse3_norm(self.fuse3(T.concat([up, x], axis=1))))
        seg = self._run_head(self.head_seg, h)
        center = T.sigmoid(self._run_head(self.head_center, h))
        offset = self._run_head(self.head_offset, h)
        flow = None if self.cfg.no_future_flow else self._run_head(self.head_flow, h)
        if squeeze:
            return FrameOutputs(seg[0], center[0], offset[0],
                                None if flow is None else flow[0])
        return FrameOutputs(seg, center, offset, flow)


@dataclass
class ForwardResult:
    bev_per_step: list          # chronological BEV tensors [B,C,H,W]
    state: Tensor               # s at the present frame, [B,C,H,W]
    present: LatentDistribution | None
    future: LatentDistribution | None
    eta: Tensor                 # [B,L]
    states: list                # present + future states, length horizon+1
    outputs: list               # batched FrameOutputs per timestep

    def frame(self, j: int, b: int) -> FrameOutputs:
        out = self.outputs[j]
        return FrameOutputs(out.seg_logits[b], out.centerness[b], out.offset[b],
                            None if out.flow is None else out.flow[b])


class FutureBevModel(Module):
    """End to end: surround images over past frames to future BEV heads."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ImageEncoder(rng, cfg)
        self.temporal = TemporalModel(rng, cfg)
        if not cfg.deterministic:
            self.future_head = DistributionHead(
                rng, cfg.channels + cfg.label_channels * cfg.horizon, cfg.latent_dim)
            if not cfg.unit_gaussian_prior:
                self.present_head = DistributionHead(rng, cfg.channels, cfg.latent_dim)
        self.future_predictor = FuturePredictor(rng, cfg)
        self.decoder = Decoder(rng, cfg)
        self._frustums = None
        self._rig = None

    # -- rig binding ---------------------------------------------------------

    def bind_rig(self, rig: CameraRig) -> None:
        cfg = self.cfg
        if len(rig) != cfg.n_cameras:
            raise ValueError(f"model expects {cfg.n_cameras} cameras, rig has {len(rig)}")
        for intr in rig.intrinsics:
            if (intr.width, intr.height) != (cfg.image_width, cfg.image_height):
                raise ValueError("rig image size does not match the model config")
        self._frustums = [G.create_frustum(intr, cfg.ENCODER_STRIDE, cfg.depth_spec)
                          for intr in rig.intrinsics]
        self._rig = rig

    # -- pipeline pieces -------------------------------------------------------

    def encode_image(self, image: Tensor):
        """Single-camera contract: [3,H,W] -> ([C,He,We], [D,He,We])."""
        feats, logits = self.encoder(image.reshape((1,) + image.shape))
        return feats[0], logits[0]

    def bev_from_cameras(self, feats_per_cam, logits_per_cam) -> G.BevGrid:
        """Lift and splat one timestep's cameras into a BEV grid."""
        if self._rig is None:
            raise RuntimeError("bind_rig must be called before building BEV features")
        mode = "uniform" if self.cfg.uniform_depth else "learned"
        lifted = [G.lift_features(f, l, mode) for f, l in zip(feats_per_cam, logits_per_cam)]
        return G.splat_cameras(lifted, self._frustums, self._rig.extrinsics,
                               self.cfg.bev_spec, self.cfg.z_range)

    def build_temporal_state(self, past_grids, past_motions) -> Tensor:
        """Warp past BEV grids [B,C,H,W] to the present and fuse over time.

        ``past_grids`` is chronological with the present last;
        ``past_motions[b][i]`` moves ego frame i to i+1 for sample b.
        """
        t = len(past_grids)
        bsz = past_grids[0].shape[0]
        for b in range(bsz):
            if len(past_motions[b]) != t - 1:
                raise ValueError(f"sample {b}: got {len(past_motions[b])} motions for {t} grids")
        present = past_grids[-1]
        if self.cfg.no_temporal:
            return self.temporal(None, present)
        spec = self.cfg.bev_spec
        frames = []
        for i in range(t):
            grid = past_grids[i]
            if i < t - 1 and not self.cfg.no_transformation:
                coords = np.stack([
                    G.warp_coordinates(spec, G.present_from_past(past_motions[b][i:]))
                    for b in range(bsz)])
                grid = T.grid_sample_bilinear(grid, Tensor(coords))
            actions = np.zeros((bsz, ACTION_CHANNELS, spec.height, spec.width))
            if i < t - 1:
                for b in range(bsz):
                    actions[b] = np.asarray(past_motions[b][i].planar())[:, None, None]
            frame = T.concat([grid, Tensor(actions)], axis=1)
            frames.append(frame.reshape((bsz, frame.shape[1], 1, spec.height, spec.width)))
        stack = T.concat(frames, axis=2)
        return self.temporal(stack, present)

    def distributions(self, state: Tensor, future_labels: np.ndarray | None):
        """(present, future) latent distributions; entries may be None.

        ``future_labels`` is [B, H*label_channels, Hb, Wb]; the future
        distribution exists only when labels are given and the model is
        probabilistic.
        """
        cfg = self.cfg
        if cfg.deterministic:
            return None, None
        present = None
        if not cfg.unit_gaussian_prior:
            present = self.present_head(state)
        else:
            zeros = Tensor(np.zeros((state.shape[0], cfg.latent_dim)))
            present = LatentDistribution(zeros, Tensor(np.zeros(zeros.shape)))
        future = None
        if future_labels is not None and cfg.horizon > 0:
            stacked = T.concat([state, Tensor(future_labels)], axis=1)
            future = self.future_head(stacked)
        return present, future

    def predict_future_states(self, state: Tensor, eta: Tensor, horizon=None) -> list:
        """Unroll future states from the present state and a latent code [B,L]."""
        horizon = self.cfg.horizon if horizon is None else horizon
        if horizon == 0:
            return []
        b = state.shape[0]
        eta_map = T.broadcast_to(
            eta.reshape((b, self.cfg.latent_dim, 1, 1)),
            (b, self.cfg.latent_dim, state.shape[2], state.shape[3]))
        return self.future_predictor(state, eta_map, horizon)

    def decode(self, state: Tensor) -> FrameOutputs:
        return self.decoder(state)

    def decode_states(self, states: list) -> list:
        """Decode present+future states in one batched pass, then split."""
        n_states = len(states)
        b = states[0].shape[0]
        merged = T.concat(states, axis=0)
        out = self.decoder(merged)
        result = []
        for j in range(n_states):
            sl = slice(j * b, (j + 1) * b)
            result.append(FrameOutputs(
                out.seg_logits[sl], out.centerness[sl], out.offset[sl],
                None if out.flow is None else out.flow[sl]))
        return result

    # -- full forward ----------------------------------------------------------

    def forward(self, images: np.ndarray, past_motions, mode: str = "mean",
                future_labels: np.ndarray | None = None,
                rng: np.random.Generator | None = None) -> ForwardResult:
        """Run the pipeline on a batch.

        images: [B, t, n_cam, 3, H, W] floats in [0, 1];
        past_motions: per sample, the t-1 step motions;
        mode: 'train' samples the future distribution, 'sample' the present,
        'mean' uses the present mean. Deterministic models always use a zero
        code.
        """
        cfg = self.cfg
        bsz, t, n_cam = images.shape[:3]
        if t != cfg.past_context or n_cam != cfg.n_cameras:
            raise ValueError(f"batch shape {images.shape[:3]} does not match the config")
        flat = Tensor(np.ascontiguousarray(images.reshape((-1,) + images.shape[3:])))
        feats, logits = self.encoder(flat)

        grids = []
        for i in range(t):
            per_b = []
            for b in range(bsz):
                base = (b * t + i) * n_cam
                cam_feats = [feats[base + k] for k in range(n_cam)]
                cam_logits = [logits[base + k] for k in range(n_cam)]
                bev = self.bev_from_cameras(cam_feats, cam_logits)
                per_b.append(bev.values.reshape((1,) + bev.values.shape))
            grids.append(T.concat(per_b, axis=0) if bsz > 1 else per_b[0])

        state = self.build_temporal_state(grids, past_motions)
        present, future = self.distributions(state, future_labels)

        if cfg.deterministic:
            eta = Tensor(np.zeros((bsz, cfg.latent_dim)))
        elif mode == "train":
            source = future if future is not None else present
            eta = sample_latent(source, "sample", rng)
        elif mode == "sample":
            eta = sample_latent(present, "sample", rng)
        elif mode == "mean":
            eta = present.mean
        else:
            raise ValueError(f"unknown forward mode {mode!r}")

        future_states = self.predict_future_states(state, eta)
        states = [state] + future_states
        outputs = self.decode_states(states)
        return ForwardResult(grids, state, present, future, eta, states, outputs)
