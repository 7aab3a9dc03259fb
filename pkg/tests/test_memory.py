import math

import numpy as np
import pytest
import torch

from mfdet.geometry import Pose, iou_bev, transform_box_array
from mfdet.memory import (
    MemoryBank,
    bilinear_sample,
    extract_roi_features,
    roi_key_points,
    union_proposals,
)
from mfdet.pillars import BEVFeatureMap, PillarGrid
from mfdet.single_frame import ProposalSet

GRID = PillarGrid(x_min=-8.0, x_max=8.0, y_min=-8.0, y_max=8.0, nx=32, ny=32)


def make_props(n=4, frame_index=0, seed=0, valid_all=True):
    rng = np.random.default_rng(seed)
    boxes = np.column_stack(
        [
            rng.uniform(-6, 6, n),
            rng.uniform(-6, 6, n),
            rng.uniform(0, 1, n),
            rng.uniform(2, 5, n),
            rng.uniform(1, 3, n),
            rng.uniform(1, 2, n),
            rng.uniform(-math.pi, math.pi, n),
        ]
    )
    valid = np.ones(n, dtype=bool)
    if not valid_all:
        valid[-1] = False
    return ProposalSet(
        boxes=boxes,
        scores=rng.normal(size=n),
        features=torch.tensor(rng.normal(size=(n, 6)), dtype=torch.float32),
        cells=rng.integers(0, 32, size=(n, 2)),
        valid=valid,
        is_peak=np.ones(n, dtype=bool),
        frame_index=frame_index,
    )


def make_fmap(seed=0, channels=6):
    rng = np.random.default_rng(seed)
    return BEVFeatureMap(
        tensor=torch.tensor(rng.normal(size=(channels, 32, 32)), dtype=torch.float64),
        grid=GRID,
    )


class TestMemoryBank:
    def test_fifo_eviction(self):
        bank = MemoryBank(capacity=4)
        for f in range(1, 6):
            bank.push(make_props(frame_index=f), make_fmap(), Pose.identity(), f)
        assert [e.frame_index for e in bank.entries] == [2, 3, 4, 5]

    def test_push_into_empty(self):
        bank = MemoryBank(capacity=2)
        bank.push(make_props(), make_fmap(), Pose.identity(), 0)
        assert len(bank) == 1

    def test_eviction_matches_queue_model(self):
        rng = np.random.default_rng(1)
        for cap in (1, 2, 3, 5):
            bank = MemoryBank(capacity=cap)
            model = []
            for f in range(int(rng.integers(3, 12))):
                bank.push(make_props(frame_index=f), make_fmap(), Pose.identity(), f)
                model.append(f)
                if len(model) > cap:
                    model.pop(0)
                assert [e.frame_index for e in bank.entries] == model

    def test_shape_mismatch_rejected(self):
        bank = MemoryBank(capacity=2)
        bank.push(make_props(n=4), make_fmap(), Pose.identity(), 0)
        with pytest.raises(ValueError):
            bank.push(make_props(n=5), make_fmap(), Pose.identity(), 1)

    def test_nonincreasing_frame_rejected(self):
        bank = MemoryBank(capacity=2)
        bank.push(make_props(), make_fmap(), Pose.identity(), 3)
        with pytest.raises(ValueError):
            bank.push(make_props(), make_fmap(), Pose.identity(), 3)

    def test_capacity_validation(self):
        with pytest.raises(ValueError):
            MemoryBank(capacity=0)


class TestUnionProposals:
    def test_single_frame_identity_poses(self):
        bank = MemoryBank(capacity=2)
        stored = make_props(frame_index=0, seed=2)
        bank.push(stored, make_fmap(), Pose.identity(), 0)
        target = make_props(frame_index=1, seed=3)
        views = union_proposals(bank, target, Pose.identity())
        assert len(views) == 1
        keys = views[0]
        assert keys.boxes_view.shape == (8, 7)
        assert np.allclose(keys.boxes_view[:4], stored.boxes)
        assert np.allclose(keys.boxes_view[4:], target.boxes)
        assert np.array_equal(keys.valid, np.concatenate([stored.valid, target.valid]))

    def test_target_already_in_bank_not_duplicated(self):
        bank = MemoryBank(capacity=2)
        target = make_props(frame_index=5, seed=4)
        bank.push(make_props(frame_index=4, seed=5), make_fmap(), Pose.identity(), 4)
        bank.push(target, make_fmap(), Pose.identity(), 5)
        views = union_proposals(bank, target, Pose.identity())
        assert all(v.boxes_view.shape[0] == 8 for v in views)

    def test_static_ego_pose_invariant(self):
        pose = Pose.from_xyz_yaw(3, -1, 0, 0.4)  # same pose every frame
        bank = MemoryBank(capacity=2)
        stored = make_props(frame_index=0, seed=6)
        bank.push(stored, make_fmap(), pose, 0)
        views = union_proposals(bank, make_props(frame_index=1, seed=7), pose)
        assert np.allclose(views[0].boxes_view[:4], stored.boxes, atol=1e-9)

    def test_moving_ego_transform_consistency(self):
        # every transformed key, re-expressed in a common frame, matches its source
        pose_a = Pose.from_xyz_yaw(0, 0, 0, 0)
        pose_b = Pose.from_xyz_yaw(2.0, 1.0, 0, 0.6)
        bank = MemoryBank(capacity=2)
        stored = make_props(frame_index=0, seed=8)
        bank.push(stored, make_fmap(), pose_a, 0)
        target = make_props(frame_index=1, seed=9)
        views = union_proposals(bank, target, pose_b)
        keys = views[0]
        back = transform_box_array(keys.boxes_view[4:], pose_a, pose_b)
        for orig, b in zip(target.boxes, back):
            assert iou_bev(orig, b) == pytest.approx(1.0, abs=1e-9)
        assert np.allclose(keys.boxes_target[:4], transform_box_array(stored.boxes, pose_a, pose_b))

    def test_empty_bank_rejected(self):
        with pytest.raises(ValueError):
            union_proposals(MemoryBank(), make_props(), Pose.identity())


class TestBilinear:
    def test_affine_field_exact(self):
        # f(x, y) = 3x - 2y + 1 reproduced exactly at arbitrary sample points
        centers = GRID.cell_centers()
        values = 3.0 * centers[..., 0] - 2.0 * centers[..., 1] + 1.0
        fmap = BEVFeatureMap(tensor=torch.tensor(values)[None], grid=GRID)
        rng = np.random.default_rng(10)
        pts = rng.uniform(-7.2, 7.2, size=(200, 2))
        out = bilinear_sample(fmap, torch.tensor(pts))
        expected = 3.0 * pts[:, 0] - 2.0 * pts[:, 1] + 1.0
        assert np.allclose(out[:, 0].numpy(), expected, atol=1e-9)

    def test_zero_outside_map(self):
        fmap = make_fmap(seed=11)
        out = bilinear_sample(fmap, torch.tensor([[100.0, 100.0], [-100.0, 0.0]]))
        assert torch.all(out == 0)

    def test_cell_center_returns_cell_value(self):
        fmap = make_fmap(seed=12)
        centers = GRID.cell_centers()
        out = bilinear_sample(fmap, torch.tensor(centers[5, 9][None]))
        assert torch.allclose(out[0], fmap.tensor[:, 5, 9])


class TestRoiFeatures:
    def test_key_point_layout(self):
        box = np.array([[2.0, -1.0, 0.0, 4.0, 2.0, 1.5, 0.0]])
        pts = roi_key_points(box, 2)
        # centers of the 2x2 split of a 4x2 footprint at (2, -1)
        expected = {(1.0, -1.5), (1.0, -0.5), (3.0, -1.5), (3.0, -0.5)}
        got = {(round(float(x), 6), round(float(y), 6)) for x, y in pts[0]}
        assert got == expected

    def test_constant_map(self):
        fmap = BEVFeatureMap(tensor=torch.full((3, 32, 32), 2.5, dtype=torch.float64), grid=GRID)
        boxes = np.array([[0, 0, 0, 4, 2, 1.5, 0.7], [3, 3, 0, 2, 1, 1, -1.1]])
        feats = extract_roi_features(fmap, boxes, k=7)
        assert torch.allclose(feats, torch.full((2, 3), 2.5, dtype=torch.float64))

    def test_linear_ramp_gives_center_x(self):
        centers = GRID.cell_centers()
        fmap = BEVFeatureMap(tensor=torch.tensor(centers[..., 0])[None], grid=GRID)
        rng = np.random.default_rng(13)
        boxes = np.column_stack(
            [
                rng.uniform(-4, 4, 5),
                rng.uniform(-4, 4, 5),
                np.zeros(5),
                rng.uniform(1, 4, 5),
                rng.uniform(1, 2, 5),
                np.ones(5),
                rng.uniform(-math.pi, math.pi, 5),
            ]
        )
        feats = extract_roi_features(fmap, boxes, k=7)
        # symmetric key-point grid + linear field -> exact center coordinate
        assert np.allclose(feats[:, 0].numpy(), boxes[:, 0], atol=1e-9)

    def test_matches_supersampling_oracle(self):
        # smooth random field: the oracle's nearest lookup quantizes position
        # to 1/100 cell, so its error scales with the field's cell-to-cell
        # variation; coarse noise upsampled 4x keeps that error below 1e-4
        rng = np.random.default_rng(14)
        coarse = torch.tensor(rng.normal(size=(4, 8, 8)), dtype=torch.float64)
        smooth = torch.nn.functional.interpolate(
            coarse[None], scale_factor=4, mode="bilinear", align_corners=False
        )[0] * 0.3
        fmap = BEVFeatureMap(tensor=smooth, grid=GRID)
        up = 100
        dense = (
            torch.nn.functional.interpolate(
                fmap.tensor[None], scale_factor=up, mode="bilinear", align_corners=False
            )[0]
            .permute(1, 2, 0)
            .numpy()
        )
        rng = np.random.default_rng(15)
        boxes = np.column_stack(
            [
                rng.uniform(-3, 3, 6),
                rng.uniform(-3, 3, 6),
                np.zeros(6),
                rng.uniform(1, 3, 6),
                rng.uniform(1, 2, 6),
                np.ones(6),
                rng.uniform(-math.pi, math.pi, 6),
            ]
        )
        k = 5
        feats = extract_roi_features(fmap, boxes, k=k).numpy()
        pts = roi_key_points(boxes, k)
        sx, sy = fmap.cell_size
        for i in range(len(boxes)):
            acc = np.zeros(4)
            for x, y in pts[i]:
                fx = (x - GRID.x_min) / sx * up - 0.5
                fy = (y - GRID.y_min) / sy * up - 0.5
                acc += dense[int(round(fx)), int(round(fy))]
            assert np.allclose(feats[i], acc / (k * k), atol=1e-3)

    def test_key_point_order_irrelevant(self):
        fmap = make_fmap(seed=16)
        box = np.array([[1.0, 2.0, 0.0, 3.0, 2.0, 1.0, 0.4]])
        pts = roi_key_points(box, 3).reshape(-1, 2)
        direct = bilinear_sample(fmap, torch.tensor(pts)).mean(dim=0)
        perm = np.random.default_rng(17).permutation(9)
        shuffled = bilinear_sample(fmap, torch.tensor(pts[perm])).mean(dim=0)
        assert torch.allclose(direct, shuffled, atol=1e-12)

    def test_rotate_map_and_box_together(self):
        # 90-degree grid rotation of both map and box leaves the feature unchanged
        fmap = make_fmap(seed=18)
        box = np.array([[2.0, 1.0, 0.0, 3.0, 1.5, 1.0, 0.3]])
        feats = extract_roi_features(fmap, box, k=7)
        rot_tensor = torch.rot90(fmap.tensor, 1, dims=(1, 2))  # +90 deg about +z
        rot_fmap = BEVFeatureMap(tensor=rot_tensor, grid=GRID)
        rot_box = box.copy()
        rot_box[0, 0], rot_box[0, 1] = -box[0, 1], box[0, 0]
        rot_box[0, 6] = box[0, 6] + math.pi / 2
        rot_feats = extract_roi_features(rot_fmap, rot_box, k=7)
        assert torch.allclose(feats, rot_feats, atol=1e-6)

    def test_k_validation(self):
        with pytest.raises(ValueError):
            extract_roi_features(make_fmap(), np.zeros((1, 7)) + [0, 0, 0, 1, 1, 1, 0], k=0)

    def test_empty_boxes(self):
        out = extract_roi_features(make_fmap(), np.zeros((0, 7)), k=7)
        assert out.shape == (0, 6)
