"""Training objective: top-k cross-entropy, spatial regressions, KL, weighting.

Task losses are combined with learnable homoscedastic-uncertainty weights
(exp(-w)*loss + w per task) and future timesteps are exponentially
discounted with normalized weights. The divergence between the future and
present latent distributions enters with a fixed multiplier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bevcast import tensor as T
from bevcast.layers import Module, Parameter
from bevcast.tensor import Tensor

LOG_STD_MIN = -20.0
LOG_STD_MAX = 5.0

TASKS = ("segmentation", "centerness", "offset", "flow")


@dataclass
class LossConfig:
    top_k: float = 0.25
    discount: float = 0.95
    probabilistic_weight: float = 100.0

    def __post_init__(self):
        if not (0.0 < self.top_k <= 1.0):
            raise ValueError(f"top_k must be in (0, 1], got {self.top_k}")
        if not (0.0 < self.discount <= 1.0):
            raise ValueError(f"discount must be in (0, 1], got {self.discount}")
        if self.probabilistic_weight < 0.0:
            raise ValueError("probabilistic_weight must be non-negative")


class UncertaintyWeights(Module):
    """One learnable log-variance scalar per task."""

    def __init__(self, include_flow: bool = True):
        super().__init__()
        self.include_flow = include_flow
        self.segmentation = Parameter(np.zeros(1))
        self.centerness = Parameter(np.zeros(1))
        self.offset = Parameter(np.zeros(1))
        if include_flow:
            self.flow = Parameter(np.zeros(1))

    def weight(self, task: str) -> Parameter:
        return getattr(self, task)


def topk_cross_entropy(seg_logits: Tensor, labels: np.ndarray, k: float) -> Tensor:
    """Mean of the ceil(k*H*W) largest per-pixel cross-entropies."""
    if seg_logits.ndim != 3 or seg_logits.shape[0] != 2:
        raise ValueError(f"expected [2,H,W] logits, got {seg_logits.shape}")
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim == 3:
        labels = labels[0]
    h, w = labels.shape
    logp = T.log_softmax(seg_logits, axis=0)
    y = Tensor(labels)
    ce = -(logp[1] * y + logp[0] * (1.0 - y))
    ce_flat = ce.reshape((h * w,))
    n_keep = int(np.ceil(k * h * w))
    if n_keep >= h * w:
        return ce_flat.mean()
    idx = np.argpartition(ce_flat.data, -n_keep)[-n_keep:]
    idx.sort()
    return T.take(ce_flat, idx).mean()


def masked_vector_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean over masked pixels of the 1-norm of the 2-vector error."""
    mask = np.asarray(mask, dtype=np.float64)
    n = mask.sum()
    if n == 0:
        return Tensor(0.0)
    diff = T.absolute(pred - Tensor(np.asarray(target, dtype=np.float64)))
    per_pixel = diff[0] + diff[1]
    return (per_pixel * Tensor(mask)).sum() / n


def spatial_losses(pred, label, k: float = 0.25) -> dict:
    """Per-task losses of one frame: seg top-k CE, centerness L2, offset/flow L1.

    ``pred`` is a FrameOutputs (flow may be None), ``label`` a FrameLabels.
    Offset and flow are averaged over instance pixels only.
    """
    out = {}
    out["segmentation"] = topk_cross_entropy(pred.seg_logits, label.segmentation, k)
    diff = pred.centerness - Tensor(label.centerness)
    out["centerness"] = (diff * diff).mean()
    mask = label.instance_ids > 0
    out["offset"] = masked_vector_l1(pred.offset, label.offset, mask)
    if pred.flow is not None:
        out["flow"] = masked_vector_l1(pred.flow, label.flow, mask)
    return out


def kl_diag_gaussians(future, present=None) -> Tensor:
    """Closed-form KL(F || P) of diagonal Gaussians, summed over the latent dim.

    ``present=None`` measures against the unit Gaussian N(0, I). Batched
    inputs [B, L] are averaged over the batch.
    """
    mu_f = future.mean
    ls_f = T.clip(future.log_std, LOG_STD_MIN, LOG_STD_MAX)
    if present is None:
        mu_p = Tensor(np.zeros(mu_f.shape))
        ls_p = Tensor(np.zeros(mu_f.shape))
    else:
        mu_p = present.mean
        ls_p = T.clip(present.log_std, LOG_STD_MIN, LOG_STD_MAX)
    var_f = T.exp(ls_f * 2.0)
    var_p = T.exp(ls_p * 2.0)
    d = mu_f - mu_p
    term = ls_p - ls_f + (var_f + d * d) / (var_p * 2.0) - 0.5
    if term.ndim == 1:
        return term.sum()
    return term.sum(axis=1).mean()


def discount_weights(gamma: float, horizon: int) -> np.ndarray:
    """Normalized per-timestep weights proportional to gamma^j, j = 0..H."""
    w = gamma ** np.arange(horizon + 1, dtype=np.float64)
    return w / w.sum()


def total_loss(per_timestep_losses, kl, config: LossConfig,
               weights: UncertaintyWeights):
    """Combine per-timestep task losses into the training scalar.

    Each task is discount-averaged over timesteps, wrapped in its
    uncertainty weight, and summed; the KL term is added with the fixed
    probabilistic multiplier. Returns (total, per-task floats).
    """
    horizon = len(per_timestep_losses) - 1
    gammas = discount_weights(config.discount, horizon)
    parts = {}
    total = None
    for task in TASKS:
        if task not in per_timestep_losses[0]:
            continue
        acc = None
        for j, frame_losses in enumerate(per_timestep_losses):
            term = frame_losses[task] * float(gammas[j])
            acc = term if acc is None else acc + term
        parts[task] = acc.item()
        w = weights.weight(task).reshape(())
        weighted = T.exp(-w) * acc + w
        total = weighted if total is None else total + weighted
    if kl is not None and config.probabilistic_weight > 0:
        parts["kl"] = kl.item()
        total = total + kl * config.probabilistic_weight
    return total, parts
