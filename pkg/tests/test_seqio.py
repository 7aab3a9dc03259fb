import numpy as np
import pytest

from mfdet.scene import SceneConfig, generate_sequence
from mfdet.seqio import SequenceFormatError, read_frame_count, read_sequence, write_sequence


@pytest.fixture
def frames():
    return generate_sequence(SceneConfig(num_objects=3, num_frames=4, seed=7, ego_speed=2.0))


def test_roundtrip(tmp_path, frames):
    path = tmp_path / "seq.m3ds"
    write_sequence(path, frames)
    back = read_sequence(path)
    assert len(back) == len(frames)
    for a, b in zip(frames, back):
        assert a.timestamp == b.timestamp
        assert np.array_equal(a.ego_pose.matrix, b.ego_pose.matrix)
        assert np.array_equal(a.points, b.points)
        assert len(a.gt_boxes) == len(b.gt_boxes)
        for ga, gb in zip(a.gt_boxes, b.gt_boxes):
            assert ga.track_id == gb.track_id
            assert np.allclose(ga.box.as_array(), gb.box.as_array(), atol=1e-6)
            assert np.allclose(ga.velocity, gb.velocity, atol=1e-6)


def test_write_deterministic(tmp_path, frames):
    p1, p2 = tmp_path / "a.m3ds", tmp_path / "b.m3ds"
    write_sequence(p1, frames)
    write_sequence(p2, frames)
    assert p1.read_bytes() == p2.read_bytes()


def test_frame_count_header(tmp_path, frames):
    path = tmp_path / "seq.m3ds"
    write_sequence(path, frames)
    assert read_frame_count(path) == 4


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.m3ds"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(SequenceFormatError):
        read_sequence(path)
    with pytest.raises(SequenceFormatError):
        read_frame_count(path)


def test_truncation_detected(tmp_path, frames):
    path = tmp_path / "seq.m3ds"
    write_sequence(path, frames)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 5])
    with pytest.raises(SequenceFormatError):
        read_sequence(path)


def test_trailing_bytes_detected(tmp_path, frames):
    path = tmp_path / "seq.m3ds"
    write_sequence(path, frames)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(SequenceFormatError):
        read_sequence(path)


def test_bad_version(tmp_path, frames):
    path = tmp_path / "seq.m3ds"
    write_sequence(path, frames)
    data = bytearray(path.read_bytes())
    data[4] = 99
    path.write_bytes(bytes(data))
    with pytest.raises(SequenceFormatError):
        read_sequence(path)


def test_empty_sequence(tmp_path):
    path = tmp_path / "empty.m3ds"
    write_sequence(path, [])
    assert read_sequence(path) == []
