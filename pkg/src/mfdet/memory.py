"""Proposal/feature memory across frames.

A FIFO bank keeps the last n frames' proposals, backbone maps, and ego
poses. Key sets for the temporal attention come from the union of all
stored proposals plus the target frame's, re-expressed in each stored
frame's coordinates, so an object missed in one frame can still be
queried there. Per-box features are rotated-ROI averages: a K x K grid
of key points in the box footprint, bilinearly sampled from the dense
map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import Pose, transform_box_array
from .pillars import BEVFeatureMap
from .single_frame import ProposalSet


@dataclass
class BankEntry:
    proposals: ProposalSet
    fmap: BEVFeatureMap
    pose: Pose
    frame_index: int


class MemoryBank:
    """FIFO of the most recent `capacity` frames."""

    def __init__(self, capacity: int = 4):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[BankEntry] = []

    def __len__(self):
        return len(self.entries)

    def push(self, proposals: ProposalSet, fmap: BEVFeatureMap, pose: Pose, frame_index: int):
        if self.entries:
            ref = self.entries[0]
            if proposals.size != ref.proposals.size:
                raise ValueError("proposal count differs from stored entries")
            if fmap.tensor.shape != ref.fmap.tensor.shape:
                raise ValueError("feature-map shape differs from stored entries")
            if frame_index <= self.entries[-1].frame_index:
                raise ValueError("frame indices must strictly increase")
        self.entries.append(
            BankEntry(proposals=proposals, fmap=fmap, pose=pose, frame_index=frame_index)
        )
        if len(self.entries) > self.capacity:
            self.entries.pop(0)

    def clear(self):
        self.entries.clear()

    def snapshot(self):
        return list(self.entries)


@dataclass
class ViewKeys:
    """Attention key set for one stored frame."""

    boxes_view: np.ndarray  # (M, 7) union boxes in the stored frame's ego coords
    boxes_target: np.ndarray  # (M, 7) same boxes in the target frame's ego coords
    valid: np.ndarray  # (M,) bool
    frame_index: int
    fmap: BEVFeatureMap
    sources: np.ndarray = field(default=None)  # (M,) index of the contributing frame


def union_proposals(
    bank: MemoryBank, target: ProposalSet, target_pose: Pose, include_target: bool = True
):
    """Build the per-stored-frame key sets from all proposals in play.

    Every stored frame receives the union of target and stored proposals
    (size (n_stored + 1) * N, or n_stored * N when the target is already
    a bank entry), each re-expressed into that frame's ego coordinates.
    """
    if len(bank) == 0:
        raise ValueError("memory bank is empty")
    entries = bank.snapshot()
    sources = [(e.proposals, e.pose, e.frame_index) for e in entries]
    if include_target and all(e.frame_index != target.frame_index for e in entries):
        sources.append((target, target_pose, target.frame_index))

    views = []
    for entry in entries:
        chunks_view, chunks_target, valids, source_ids = [], [], [], []
        for props, pose, fidx in sources:
            chunks_view.append(transform_box_array(props.boxes, pose, entry.pose))
            chunks_target.append(transform_box_array(props.boxes, pose, target_pose))
            valids.append(props.valid)
            source_ids.append(np.full(props.size, fidx, dtype=np.int64))
        views.append(
            ViewKeys(
                boxes_view=np.concatenate(chunks_view, axis=0),
                boxes_target=np.concatenate(chunks_target, axis=0),
                valid=np.concatenate(valids),
                frame_index=entry.frame_index,
                fmap=entry.fmap,
                sources=np.concatenate(source_ids),
            )
        )
    return views


def roi_key_points(boxes: np.ndarray, k: int) -> np.ndarray:
    """(N, K*K, 2) key points: centers of an equal K x K split of each footprint."""
    if k < 1:
        raise ValueError("K must be >= 1")
    offsets = (np.arange(k) + 0.5) / k - 0.5
    u, v = np.meshgrid(offsets, offsets, indexing="ij")
    local = np.stack([u.reshape(-1), v.reshape(-1)], axis=1)  # (K*K, 2) in box units
    scaled = local[None, :, :] * boxes[:, None, 3:5]
    c, s = np.cos(boxes[:, 6]), np.sin(boxes[:, 6])
    x = scaled[:, :, 0] * c[:, None] - scaled[:, :, 1] * s[:, None] + boxes[:, None, 0]
    y = scaled[:, :, 0] * s[:, None] + scaled[:, :, 1] * c[:, None] + boxes[:, None, 1]
    return np.stack([x, y], axis=-1)


def bilinear_sample(fmap: BEVFeatureMap, points_xy: torch.Tensor) -> torch.Tensor:
    """Sample (Q, 2) ego-frame xy points from the map; zeros outside.

    Continuous map coordinates put integer values at cell centers.
    """
    tensor = fmap.tensor
    c, h, w = tensor.shape
    sx, sy = fmap.cell_size
    px = (points_xy[:, 0] - fmap.grid.x_min) / sx - 0.5
    py = (points_xy[:, 1] - fmap.grid.y_min) / sy - 0.5
    x0 = torch.floor(px)
    y0 = torch.floor(py)
    wx = (px - x0).to(tensor.dtype)
    wy = (py - y0).to(tensor.dtype)

    out = tensor.new_zeros((points_xy.shape[0], c))
    for dx, dy, weight in (
        (0, 0, (1 - wx) * (1 - wy)),
        (1, 0, wx * (1 - wy)),
        (0, 1, (1 - wx) * wy),
        (1, 1, wx * wy),
    ):
        gx = (x0 + dx).long()
        gy = (y0 + dy).long()
        inside = (gx >= 0) & (gx < h) & (gy >= 0) & (gy < w)
        if inside.any():
            idx = torch.nonzero(inside, as_tuple=True)[0]
            vals = tensor[:, gx[idx], gy[idx]].T
            out = out.index_add(0, idx, vals * weight[idx][:, None])
    return out


def extract_roi_features(fmap: BEVFeatureMap, boxes, k: int = 7) -> torch.Tensor:
    """Average of K x K bilinear key-point samples per rotated box -> (N, C)."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.shape[0] == 0:
        return fmap.tensor.new_zeros((0, fmap.channels))
    pts = roi_key_points(arr, k)
    flat = torch.as_tensor(pts.reshape(-1, 2))
    sampled = bilinear_sample(fmap, flat)
    return sampled.reshape(arr.shape[0], k * k, fmap.channels).mean(dim=1)
