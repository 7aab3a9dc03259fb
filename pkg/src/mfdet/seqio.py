"""Binary sequence files.

Layout (little-endian):
  header: magic "M3DS", version u32, frame_count u32
  per frame:
    timestamp f64
    pose 16 x f64 (row-major 4x4)
    point_count u32, points point_count x 3 x f32
    box_count u32, boxes box_count x (7 x f32, 2 x f32 velocity, u32 track_id)
"""

from __future__ import annotations

import struct

import numpy as np

from .geometry import Box7, Pose
from .scene import FrameRecord, GroundTruth

MAGIC = b"M3DS"
VERSION = 1


class SequenceFormatError(Exception):
    """Raised when a sequence file is malformed or truncated."""


def write_sequence(path, frames) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(frames)))
        for frame in frames:
            fh.write(struct.pack("<d", frame.timestamp))
            fh.write(np.ascontiguousarray(frame.ego_pose.matrix, dtype="<f8").tobytes())
            pts = np.ascontiguousarray(frame.points, dtype="<f4").reshape(-1, 3)
            fh.write(struct.pack("<I", pts.shape[0]))
            fh.write(pts.tobytes())
            fh.write(struct.pack("<I", len(frame.gt_boxes)))
            for gt in frame.gt_boxes:
                fh.write(np.asarray(gt.box.as_array(), dtype="<f4").tobytes())
                fh.write(struct.pack("<ff", gt.velocity[0], gt.velocity[1]))
                fh.write(struct.pack("<I", gt.track_id))


def _take(buf: memoryview, offset: int, size: int):
    if offset + size > len(buf):
        raise SequenceFormatError("truncated sequence file")
    return buf[offset : offset + size], offset + size


def read_sequence(path):
    with open(path, "rb") as fh:
        buf = memoryview(fh.read())
    chunk, off = _take(buf, 0, 4)
    if bytes(chunk) != MAGIC:
        raise SequenceFormatError("bad magic; not a sequence file")
    chunk, off = _take(buf, off, 8)
    version, frame_count = struct.unpack("<II", chunk)
    if version != VERSION:
        raise SequenceFormatError(f"unsupported sequence version {version}")
    frames = []
    for _ in range(frame_count):
        chunk, off = _take(buf, off, 8)
        (timestamp,) = struct.unpack("<d", chunk)
        chunk, off = _take(buf, off, 16 * 8)
        pose_mat = np.frombuffer(chunk, dtype="<f8").reshape(4, 4)
        try:
            pose = Pose(pose_mat)
        except ValueError as exc:
            raise SequenceFormatError(f"invalid pose in sequence file: {exc}") from exc
        chunk, off = _take(buf, off, 4)
        (n_pts,) = struct.unpack("<I", chunk)
        chunk, off = _take(buf, off, n_pts * 12)
        points = np.frombuffer(chunk, dtype="<f4").reshape(n_pts, 3).copy()
        chunk, off = _take(buf, off, 4)
        (n_boxes,) = struct.unpack("<I", chunk)
        gts = []
        for _ in range(n_boxes):
            chunk, off = _take(buf, off, 7 * 4)
            box = np.frombuffer(chunk, dtype="<f4").astype(np.float64)
            chunk, off = _take(buf, off, 8)
            vx, vy = struct.unpack("<ff", chunk)
            chunk, off = _take(buf, off, 4)
            (track_id,) = struct.unpack("<I", chunk)
            gts.append(
                GroundTruth(box=Box7.from_array(box), velocity=(vx, vy), track_id=track_id)
            )
        frames.append(
            FrameRecord(timestamp=timestamp, ego_pose=pose, points=points, gt_boxes=tuple(gts))
        )
    if off != len(buf):
        raise SequenceFormatError("trailing bytes after last frame")
    return frames


def read_frame_count(path) -> int:
    """Read only the header's frame count (used for manifest cross-checks)."""
    with open(path, "rb") as fh:
        head = fh.read(12)
    if len(head) < 12 or head[:4] != MAGIC:
        raise SequenceFormatError("bad magic; not a sequence file")
    version, frame_count = struct.unpack("<II", head[4:])
    if version != VERSION:
        raise SequenceFormatError(f"unsupported sequence version {version}")
    return frame_count
