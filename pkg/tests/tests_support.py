"""Shared helpers for test modules."""

import numpy as np

from bevcast.instances import FrameOutputs
from bevcast.tensor import Tensor


def outputs_from_perfect_labels(labels) -> FrameOutputs:
    """FrameOutputs that reproduce a FrameLabels exactly (ideal heads)."""
    seg = labels.segmentation[0]
    logits = np.stack([np.where(seg > 0, -25.0, 25.0), np.where(seg > 0, 25.0, -25.0)])
    return FrameOutputs(
        seg_logits=Tensor(logits),
        centerness=Tensor(labels.centerness),
        offset=Tensor(labels.offset),
        flow=Tensor(labels.flow),
    )
