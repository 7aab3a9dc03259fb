"""Single-frame detection stage.

A small BEV conv backbone feeds an anchor-free per-pillar head that
regresses one box per feature-map location (offsets from the pillar
center, log sizes against a single class prior, binned orientation).
Proposal selection replaces sequential NMS with windowed local-peak
detection on the objectness map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import wrap_angle
from .pillars import BEVFeatureMap, PillarGrid


@dataclass(frozen=True)
class BoxPrior:
    """Single class prior used to normalize anchor-free regression."""

    length: float = 4.7
    width: float = 2.1
    height: float = 1.7
    z_center: float = 0.85

    @property
    def diagonal(self) -> float:
        return math.hypot(self.length, self.width)


class BEVBackbone(nn.Module):
    """Three stride-2 stages, each upsampled back and fused by a 1x1 conv."""

    def __init__(
        self,
        in_channels: int = 64,
        stage_channels=(32, 64, 128),
        convs_per_stage: int = 2,
        out_channels: int = 64,
        out_stride: int = 1,
        dtype=torch.float32,
    ):
        super().__init__()
        if out_stride not in (1, 2, 4, 8):
            raise ValueError("out_stride must be one of 1, 2, 4, 8")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.out_stride = out_stride
        kw = {"dtype": dtype}
        stages = []
        prev = in_channels
        for ch in stage_channels:
            layers = [nn.Conv2d(prev, ch, 3, stride=2, padding=1, **kw), nn.ReLU()]
            for _ in range(convs_per_stage - 1):
                layers += [nn.Conv2d(ch, ch, 3, padding=1, **kw), nn.ReLU()]
            stages.append(nn.Sequential(*layers))
            prev = ch
        self.stages = nn.ModuleList(stages)
        branch = max(out_channels // 2, 8)
        ups = []
        for i, ch in enumerate(stage_channels):
            ratio = 2 ** (i + 1) // out_stride
            layers = []
            if ratio > 1:
                # nearest upsample + conv keeps constant inputs constant
                layers.append(nn.Upsample(scale_factor=ratio, mode="nearest"))
            layers += [nn.Conv2d(ch, branch, 3, padding=1, **kw), nn.ReLU()]
            ups.append(nn.Sequential(*layers))
        self.ups = nn.ModuleList(ups)
        self.merge = nn.Conv2d(branch * len(stage_channels), out_channels, 1, **kw)

    def forward(self, dense: torch.Tensor) -> torch.Tensor:
        """dense: (C_in, H, W) -> (C_out, H / out_stride, W / out_stride)."""
        if dense.ndim != 3 or dense.shape[0] != self.in_channels:
            raise ValueError(
                f"expected ({self.in_channels}, H, W) input, got {tuple(dense.shape)}"
            )
        if dense.shape[1] % 8 or dense.shape[2] % 8:
            raise ValueError("input spatial dims must be divisible by 8")
        x = dense[None]
        outs = []
        for stage, up in zip(self.stages, self.ups):
            x = stage(x)
            outs.append(up(x))
        return self.merge(torch.cat(outs, dim=1))[0]


@dataclass
class DenseHeadOutput:
    """Per-location predictions over the feature map."""

    objectness: torch.Tensor  # (H, W) logits
    center: torch.Tensor  # (2, H, W) xy offsets in prior-diagonal units
    z: torch.Tensor  # (H, W) z offset in prior-height units
    log_size: torch.Tensor  # (3, H, W)
    bin_logits: torch.Tensor  # (B, H, W)
    bin_residuals: torch.Tensor  # (B, H, W) radians from each bin center

    @property
    def spatial_shape(self):
        return tuple(self.objectness.shape)


class DenseHead(nn.Module):
    """Shared 3x3 conv followed by 1x1 prediction branches."""

    def __init__(self, channels: int = 64, num_bins: int = 12, dtype=torch.float32):
        super().__init__()
        if num_bins < 1:
            raise ValueError("num_bins must be >= 1")
        self.num_bins = num_bins
        kw = {"dtype": dtype}
        self.shared = nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1, **kw), nn.ReLU())
        self.heads = nn.Conv2d(channels, 1 + 2 + 1 + 3 + 2 * num_bins, 1, **kw)

    def forward(self, features: torch.Tensor) -> DenseHeadOutput:
        x = self.heads(self.shared(features[None]))[0]
        b = self.num_bins
        return DenseHeadOutput(
            objectness=x[0],
            center=x[1:3],
            z=x[3],
            log_size=x[4:7],
            bin_logits=x[7 : 7 + b],
            bin_residuals=x[7 + b : 7 + 2 * b],
        )


def orientation_bin_centers(num_bins: int) -> np.ndarray:
    """Equal bins over [-pi, pi); center of bin i at -pi + (i + 0.5) * 2pi / B."""
    return -math.pi + (np.arange(num_bins) + 0.5) * (2 * math.pi / num_bins)


def orientation_bin_index(theta, num_bins: int):
    """Index of the bin containing the wrapped angle."""
    wrapped = wrap_angle(theta)
    idx = np.floor((np.asarray(wrapped) + math.pi) / (2 * math.pi / num_bins)).astype(np.int64)
    return np.clip(idx, 0, num_bins - 1)


def decode_dense(out: DenseHeadOutput, fmap: BEVFeatureMap, prior: BoxPrior) -> torch.Tensor:
    """Decode every feature-map location into a (H, W, 7) box tensor."""
    h, w = out.spatial_shape
    centers = torch.as_tensor(fmap.cell_centers(), dtype=out.objectness.dtype)
    d = prior.diagonal
    cx = centers[:, :, 0] + out.center[0] * d
    cy = centers[:, :, 1] + out.center[1] * d
    cz = prior.z_center + out.z * prior.height
    prior_sizes = torch.tensor(
        [prior.length, prior.width, prior.height], dtype=out.objectness.dtype
    )
    sizes = prior_sizes[:, None, None] * torch.exp(out.log_size)
    bin_centers = torch.as_tensor(
        orientation_bin_centers(out.bin_logits.shape[0]), dtype=out.objectness.dtype
    )
    best_bin = out.bin_logits.argmax(dim=0)
    residual = torch.gather(out.bin_residuals, 0, best_bin[None])[0]
    heading = bin_centers[best_bin] + residual
    heading = torch.remainder(heading + math.pi, 2 * math.pi) - math.pi
    return torch.stack([cx, cy, cz, sizes[0], sizes[1], sizes[2], heading], dim=-1)


def encode_dense_target(gt_box: np.ndarray, cell_center_xy: np.ndarray, prior: BoxPrior):
    """Regression targets for one ground truth at one feature-map cell.

    Returns (center_xy (2,), z, log_size (3,)); the heading target comes
    from :func:`orientation_target`. Exact inverse of decode_dense at
    that cell.
    """
    d = prior.diagonal
    center = (gt_box[0:2] - cell_center_xy) / d
    z = (gt_box[2] - prior.z_center) / prior.height
    log_size = np.log(gt_box[3:6] / np.array([prior.length, prior.width, prior.height]))
    return center, float(z), log_size


def orientation_target(theta: float, num_bins: int):
    """(bin index, residual from that bin center) for a heading target."""
    idx = int(orientation_bin_index(theta, num_bins))
    centers = orientation_bin_centers(num_bins)
    return idx, float(wrap_angle(theta - centers[idx]))


@dataclass
class PeakSelection:
    """Fixed-size proposal locations picked from the objectness map."""

    locations: np.ndarray  # (num_out, 2) int (row, col); -1 rows are sentinels
    scores: np.ndarray  # (num_out,) objectness at each location, -inf sentinels
    is_peak: np.ndarray  # (num_out,) bool, False for fill-ins past the peak list
    valid: np.ndarray  # (num_out,) bool


def maxpool_nms(scores, kernel=(7, 7), num_out: int = 128) -> PeakSelection:
    """Local-peak proposal selection on an (H, W) objectness map.

    A location is a peak iff it attains its window maximum and no
    earlier location (row-major) in that window ties it. Peaks are
    returned by descending score; if fewer than num_out exist, the
    highest-scoring non-peak locations fill the remaining slots.
    """
    smap = torch.as_tensor(scores).detach()
    if smap.ndim != 2:
        raise ValueError("score map must be 2-D")
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel dims must be odd")
    h, w = smap.shape
    if kh > h or kw > w:
        raise ValueError("kernel larger than the score map")
    padded = F.pad(smap[None, None], (kw // 2, kw // 2, kh // 2, kh // 2), value=float("-inf"))[
        0, 0
    ]
    windows = padded.unfold(0, kh, 1).unfold(1, kw, 1).reshape(h, w, kh * kw)
    center = (kh // 2) * kw + (kw // 2)
    first_argmax = windows.argmax(dim=-1)  # first occurrence wins ties
    peak_mask = (first_argmax == center).numpy()

    flat_scores = smap.reshape(-1).numpy().astype(np.float64)
    order = np.lexsort((np.arange(flat_scores.size), -flat_scores))
    peak_flat = peak_mask.reshape(-1)
    ranked_peaks = order[peak_flat[order]]
    ranked_rest = order[~peak_flat[order]]
    chosen = np.concatenate([ranked_peaks, ranked_rest])[:num_out]

    n = chosen.size
    locations = np.full((num_out, 2), -1, dtype=np.int64)
    out_scores = np.full(num_out, -np.inf)
    is_peak = np.zeros(num_out, dtype=bool)
    valid = np.zeros(num_out, dtype=bool)
    locations[:n, 0] = chosen // w
    locations[:n, 1] = chosen % w
    out_scores[:n] = flat_scores[chosen]
    is_peak[:n] = peak_flat[chosen]
    valid[:n] = True
    return PeakSelection(locations=locations, scores=out_scores, is_peak=is_peak, valid=valid)


@dataclass
class ProposalSet:
    """Fixed-size proposals for one frame.

    Sentinel slots carry score -inf and valid=False; their boxes are a
    benign unit box so downstream geometry stays finite.
    """

    boxes: np.ndarray  # (N, 7) float64, frame ego coordinates
    scores: np.ndarray  # (N,) float64 objectness logits
    features: torch.Tensor  # (N, C)
    cells: np.ndarray  # (N, 2) feature-map locations
    valid: np.ndarray  # (N,) bool
    is_peak: np.ndarray  # (N,) bool
    frame_index: int = 0

    SENTINEL_BOX = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0])

    def __post_init__(self):
        n = self.boxes.shape[0]
        if not (
            self.scores.shape == (n,)
            and self.features.shape[0] == n
            and self.cells.shape == (n, 2)
            and self.valid.shape == (n,)
        ):
            raise ValueError("inconsistent proposal set field shapes")

    @property
    def size(self) -> int:
        return self.boxes.shape[0]

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])


def select_proposals(
    dense_boxes: torch.Tensor,
    objectness: torch.Tensor,
    features: torch.Tensor,
    kernel,
    num_out: int,
    frame_index: int = 0,
) -> tuple:
    """Build a ProposalSet (boxes/scores/cells, features filled later).

    Returns (proposals, selection); proposal features stay empty here
    because they come from rotated ROI extraction over the backbone map.
    """
    sel = maxpool_nms(objectness, kernel=kernel, num_out=num_out)
    boxes = np.tile(ProposalSet.SENTINEL_BOX, (num_out, 1))
    dense_np = dense_boxes.detach().numpy().astype(np.float64)
    rows, cols = sel.locations[:, 0], sel.locations[:, 1]
    ok = sel.valid
    boxes[ok] = dense_np[rows[ok], cols[ok]]
    props = ProposalSet(
        boxes=boxes,
        scores=sel.scores.copy(),
        features=features,
        cells=sel.locations.copy(),
        valid=sel.valid.copy(),
        is_peak=sel.is_peak.copy(),
        frame_index=frame_index,
    )
    return props, sel


def greedy_nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5, max_out=None):
    """Sequential greedy suppression; the classical comparator for the bench.

    Returns indices of kept boxes in descending score order.
    """
    from .geometry import iou_bev

    order = np.lexsort((np.arange(scores.size), -scores))
    radius = 0.5 * np.hypot(boxes[:, 3], boxes[:, 4])
    alive = np.ones(boxes.shape[0], dtype=bool)
    kept = []
    for idx in order:
        if not alive[idx]:
            continue
        kept.append(int(idx))
        if max_out is not None and len(kept) >= max_out:
            break
        alive[idx] = False
        cand = np.nonzero(alive)[0]
        if cand.size == 0:
            break
        d = np.hypot(boxes[cand, 0] - boxes[idx, 0], boxes[cand, 1] - boxes[idx, 1])
        near = cand[d <= radius[cand] + radius[idx]]
        for j in near:
            if iou_bev(boxes[idx], boxes[j]) >= iou_threshold:
                alive[j] = False
    return np.array(kept, dtype=np.int64)
