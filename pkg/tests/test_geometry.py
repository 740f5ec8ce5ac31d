import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevcollab.autodiff import Tensor, bilinear_sample
from bevcollab.errors import ConfigError, ParameterError
from bevcollab.geometry import (
    FeatureMap,
    GridSpec,
    OrientedBox,
    Pose2D,
    RelativePose,
    build_affine_grid,
    footprint_mask,
    normalize_angle,
    oriented_iou,
    relative_pose,
    transform_box,
    warp_feature,
)

pose_st = st.builds(
    Pose2D,
    st.floats(-20, 20), st.floats(-20, 20),
    st.floats(-math.pi + 1e-6, math.pi),
)


def iou_raster_oracle(a: OrientedBox, b: OrientedBox, n: int = 400) -> float:
    """Fine-raster IoU reference: count cells inside each rectangle."""
    xs = np.linspace(-12, 12, n)
    gx, gy = np.meshgrid(xs, xs)

    def inside(box):
        dx, dy = gx - box.cx, gy - box.cy
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        lx, ly = c * dx + s * dy, -s * dx + c * dy
        return (np.abs(lx) <= box.length / 2) & (np.abs(ly) <= box.width / 2)

    ia, ib = inside(a), inside(b)
    union = (ia | ib).sum()
    return (ia & ib).sum() / union if union else 0.0


class TestRelativePose:
    def test_identity(self):
        p = Pose2D(1.0, -2.0, 0.7)
        rel = relative_pose(p, p)
        assert np.abs(rel.rotation - np.eye(2)).max() < 1e-12
        assert np.abs(rel.translation).max() < 1e-12

    def test_pure_translation(self):
        rel = relative_pose(Pose2D(0, 0, 0), Pose2D(1, 0, 0))
        assert np.allclose(rel.translation, [1, 0])
        assert abs(rel.angle) < 1e-12

    def test_rotated_ego(self):
        rel = relative_pose(Pose2D(0, 0, math.pi / 2), Pose2D(1, 0, 0))
        assert abs(rel.angle + math.pi / 2) < 1e-12
        assert np.allclose(rel.translation, [0, -1], atol=1e-12)
        # matches composing homogeneous matrices numerically
        t_ego = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
        t_other = np.array([[1, 0, 1], [0, 1, 0], [0, 0, 1]], dtype=float)
        want = np.linalg.inv(t_ego) @ t_other
        assert np.allclose(rel.rotation, want[:2, :2])
        assert np.allclose(rel.translation, want[:2, 2])

    @given(pose_st, pose_st)
    @settings(max_examples=50, deadline=None)
    def test_compose_with_inverse_is_identity(self, a, b):
        fwd = relative_pose(a, b)
        back = relative_pose(b, a)
        comp = fwd.compose(back)
        assert np.abs(comp.rotation - np.eye(2)).max() < 1e-9
        assert np.abs(comp.translation).max() < 1e-9

    @given(pose_st, pose_st)
    @settings(max_examples=30, deadline=None)
    def test_rotation_block_orthonormal(self, a, b):
        rel = relative_pose(a, b)
        assert np.abs(rel.rotation @ rel.rotation.T - np.eye(2)).max() < 1e-9


class TestNormalizeAngle:
    @pytest.mark.parametrize("raw,want", [
        (0.0, 0.0), (math.pi, math.pi), (-math.pi, math.pi),
        (3 * math.pi, math.pi), (math.pi + 0.1, -math.pi + 0.1),
    ])
    def test_range(self, raw, want):
        got = normalize_angle(raw)
        assert -math.pi < got <= math.pi
        assert abs(got - want) < 1e-12


class TestAffineGrid:
    def test_identity_pose_gives_identity_grid(self):
        grid = GridSpec(6, 8, 4.0, 3.0)
        got = build_affine_grid(RelativePose.identity(), grid)
        u = (2.0 * np.arange(8) + 1.0) / 8 - 1.0
        v = (2.0 * np.arange(6) + 1.0) / 6 - 1.0
        assert np.allclose(got[..., 0], u[None, :], atol=1e-15)
        assert np.allclose(got[..., 1], v[:, None], atol=1e-15)

    def test_one_cell_translation_offsets_by_2_over_w(self):
        grid = GridSpec(8, 8, 4.0, 4.0)
        rel = RelativePose.from_angle(0.0, (grid.cell_x, 0.0))
        base = build_affine_grid(RelativePose.identity(), grid)
        got = build_affine_grid(rel, grid)
        assert np.allclose(got[..., 0] - base[..., 0], -2.0 / 8, atol=1e-12)
        assert np.allclose(got[..., 1], base[..., 1], atol=1e-12)

    def test_rotation_pi_is_point_reflection(self):
        grid = GridSpec(6, 6, 4.0, 4.0)
        base = build_affine_grid(RelativePose.identity(), grid)
        got = build_affine_grid(RelativePose.from_angle(math.pi), grid)
        assert np.allclose(got, -base, atol=1e-12)


class TestWarpFeature:
    def test_identity_bitwise(self):
        rng = np.random.default_rng(0)
        grid = GridSpec(8, 8, 4.0, 4.0)
        fm = FeatureMap(Tensor(rng.normal(size=(3, 8, 8)).astype(np.float32)), grid)
        out = warp_feature(fm, RelativePose.identity())
        assert out.data.data is fm.data.data

    def test_zero_map_stays_zero(self):
        grid = GridSpec(8, 8, 4.0, 4.0)
        fm = FeatureMap(Tensor(np.zeros((2, 8, 8), dtype=np.float32)), grid)
        rel = RelativePose.from_angle(0.4, (1.0, -0.5))
        assert np.all(warp_feature(fm, rel).data.data == 0)

    def test_translation_round_trip_recovers_interior(self):
        rng = np.random.default_rng(1)
        grid = GridSpec(16, 16, 8.0, 8.0)
        fm = FeatureMap(Tensor(rng.normal(size=(2, 16, 16)).astype(np.float32)), grid)
        shift = grid.extent_x / 4.0
        fwd = warp_feature(fm, RelativePose.from_angle(0.0, (-shift, 0.0)))
        back = warp_feature(fwd, RelativePose.from_angle(0.0, (shift, 0.0)))
        cells = int(shift / grid.cell_x)
        inner = (slice(None), slice(None), slice(cells, 16 - cells))
        assert np.abs(back.data.data[inner] - fm.data.data[inner]).max() < 1e-5

    def test_mass_approximately_preserved_for_interior_support(self):
        rng = np.random.default_rng(2)
        grid = GridSpec(16, 16, 8.0, 8.0)
        data = np.zeros((1, 16, 16), dtype=np.float32)
        data[:, 6:10, 6:10] = rng.uniform(0.5, 1.0, size=(1, 4, 4))
        fm = FeatureMap(Tensor(data), grid)
        rel = RelativePose.from_angle(0.0, (0.7, -0.3))
        warped = warp_feature(fm, rel)
        before, after = float(data.sum()), float(warped.data.data.sum())
        assert abs(after - before) / before < 1e-3

    def test_cell_size_mismatch_rejected(self):
        grid = GridSpec(8, 8, 4.0, 4.0)
        other = GridSpec(8, 8, 6.0, 6.0)
        fm = FeatureMap(Tensor(np.zeros((1, 8, 8), dtype=np.float32)), grid)
        with pytest.raises(ConfigError, match="cell size"):
            warp_feature(fm, RelativePose.identity(), receiver_grid=other)


class TestTransformBox:
    def test_identity(self):
        b = OrientedBox(1, 2, 4, 2, 0.3, 0.8)
        out = transform_box(b, RelativePose.identity())
        assert (out.cx, out.cy, out.yaw, out.confidence) == (b.cx, b.cy, b.yaw, b.confidence)

    def test_quarter_turn(self):
        out = transform_box(OrientedBox(1, 0, 2, 1, 0), RelativePose.from_angle(math.pi / 2))
        assert abs(out.cx) < 1e-12 and abs(out.cy - 1) < 1e-12
        assert abs(out.yaw - math.pi / 2) < 1e-12

    def test_pure_translation_keeps_yaw(self):
        out = transform_box(OrientedBox(1, 1, 2, 1, 0.5), RelativePose.from_angle(0.0, (3, -2)))
        assert (out.cx, out.cy) == (4, -1)
        assert out.yaw == 0.5


class TestOrientedIou:
    def test_identical(self):
        b = OrientedBox(0, 0, 4, 2, 0.7)
        assert oriented_iou(b, b) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint(self):
        assert oriented_iou(OrientedBox(0, 0, 2, 1, 0), OrientedBox(10, 10, 2, 1, 1)) == 0.0

    def test_half_overlap_squares(self):
        v = oriented_iou(OrientedBox(0, 0, 1, 1, 0), OrientedBox(0.5, 0, 1, 1, 0))
        assert v == pytest.approx(1.0 / 3.0, abs=1e-3)
        assert v == pytest.approx(iou_raster_oracle(OrientedBox(0, 0, 1, 1, 0),
                                                    OrientedBox(0.5, 0, 1, 1, 0)), abs=2e-2)

    def test_degenerate_rejected(self):
        with pytest.raises(ParameterError):
            oriented_iou(OrientedBox(0, 0, 0, 1, 0), OrientedBox(0, 0, 1, 1, 0))

    @pytest.mark.parametrize("seed", range(15))
    def test_matches_raster_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a = OrientedBox(*rng.uniform(-2, 2, 2), *rng.uniform(1, 5, 2), rng.uniform(-3, 3))
        b = OrientedBox(*rng.uniform(-2, 2, 2), *rng.uniform(1, 5, 2), rng.uniform(-3, 3))
        assert oriented_iou(a, b) == pytest.approx(iou_raster_oracle(a, b), abs=2e-2)

    @pytest.mark.parametrize("seed", range(10))
    def test_symmetry_rigid_and_flip_invariance(self, seed):
        rng = np.random.default_rng(100 + seed)
        a = OrientedBox(*rng.uniform(-2, 2, 2), *rng.uniform(1, 4, 2), rng.uniform(-3, 3))
        b = OrientedBox(*rng.uniform(-2, 2, 2), *rng.uniform(1, 4, 2), rng.uniform(-3, 3))
        v = oriented_iou(a, b)
        assert v == pytest.approx(oriented_iou(b, a), abs=1e-12)
        rel = RelativePose.from_angle(rng.uniform(-3, 3), rng.uniform(-5, 5, 2))
        v_moved = oriented_iou(transform_box(a, rel), transform_box(b, rel))
        assert v_moved == pytest.approx(v, abs=1e-6)
        flipped = OrientedBox(a.cx, a.cy, a.length, a.width, a.yaw + math.pi)
        assert oriented_iou(flipped, b) == pytest.approx(v, abs=1e-9)


class TestFootprintMask:
    def test_matches_per_cell_oracle(self):
        rng = np.random.default_rng(0)
        grid = GridSpec(20, 20, 10.0, 10.0)
        boxes = [OrientedBox(*rng.uniform(-4, 4, 2), *rng.uniform(1, 4, 2), rng.uniform(-3, 3))
                 for _ in range(4)]
        mask = footprint_mask(grid, boxes)
        xs, ys = grid.cell_centers()
        for r in range(20):
            for c in range(20):
                inside = False
                for b in boxes:
                    dx, dy = xs[r, c] - b.cx, ys[r, c] - b.cy
                    co, si = math.cos(b.yaw), math.sin(b.yaw)
                    lx, ly = co * dx + si * dy, -si * dx + co * dy
                    inside |= abs(lx) <= b.length / 2 and abs(ly) <= b.width / 2
                assert mask[r, c] == inside
