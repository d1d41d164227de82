import math

import numpy as np
import pytest

from conftest import mc_iou_3d, mc_iou_bev, overlapping_pair, random_box, rigid_move_box
from fusedet.geometry import (
    Box3D,
    CameraModel,
    Detection,
    backproject_pixel,
    backproject_pixels,
    bev_corners,
    box_corners,
    convex_hull,
    giou_bev,
    giou_3d,
    iou_bev,
    iou_3d,
    nms,
    point_in_box,
    project_lidar_to_image,
    project_points,
    wrap_angle,
)


def random_camera(rng, w=640, h=480):
    # random small rotation about a random axis, built from a quaternion
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w0, x, y, z = q
    rot = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w0 * z), 2 * (x * z + w0 * y)],
            [2 * (x * y + w0 * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w0 * x)],
            [2 * (x * z - w0 * y), 2 * (y * z + w0 * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    return CameraModel(
        fx=rng.uniform(200, 800), fy=rng.uniform(200, 800),
        cx=w / 2 + rng.uniform(-5, 5), cy=h / 2 + rng.uniform(-5, 5),
        rotation=rot, translation=rng.uniform(-2, 2, size=3),
        image_w=w, image_h=h,
    )


class TestWrapAngle:
    def test_identity_range(self):
        for theta in (-3.0, -0.5, 0.0, 0.5, 3.0):
            assert wrap_angle(theta) == pytest.approx(theta)

    def test_wraps(self):
        assert wrap_angle(math.pi + 0.1) == pytest.approx(-math.pi + 0.1)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)
        assert wrap_angle(5 * math.pi) == pytest.approx(math.pi)


class TestProjection:
    def test_principal_ray(self):
        cam = CameraModel(1, 1, 0, 0, np.eye(3), np.zeros(3), 100, 100)
        u, v, depth = project_lidar_to_image([0, 0, 5], cam)
        assert (u, v, depth) == (0.0, 0.0, 5.0)

    def test_formula_substitution(self):
        cam = CameraModel(2, 2, 0, 0, np.eye(3), np.zeros(3), 100, 100)
        u, v, depth = project_lidar_to_image([4, 2, 4], cam)
        assert (u, v, depth) == (2.0, 1.0, 4.0)

    def test_behind_camera_flag(self):
        cam = CameraModel(1, 1, 0, 0, np.eye(3), np.zeros(3), 100, 100)
        assert project_lidar_to_image([0, 0, -1], cam) is None

    def test_backproject_trivials(self):
        cam = CameraModel(1, 1, 0, 0, np.eye(3), np.zeros(3), 100, 100)
        assert np.allclose(backproject_pixel(0, 0, 5, cam), [0, 0, 5])
        cam2 = CameraModel(2, 2, 0, 0, np.eye(3), np.zeros(3), 100, 100)
        assert np.allclose(backproject_pixel(2, 1, 4, cam2), [4, 2, 4])

    def test_backproject_rejects_bad_depth(self):
        cam = CameraModel(1, 1, 0, 0, np.eye(3), np.zeros(3), 100, 100)
        with pytest.raises(ValueError):
            backproject_pixel(0, 0, 0.0, cam)
        with pytest.raises(ValueError):
            backproject_pixel(0, 0, float("nan"), cam)

    def test_round_trip_project_backproject(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            cam = random_camera(rng)
            for _ in range(50):
                p_cam = np.array(
                    [rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0.5, 60)]
                )
                p = cam.cam_to_lidar(p_cam)
                u, v, depth = project_lidar_to_image(p, cam)
                back = backproject_pixel(u, v, depth, cam)
                assert np.abs(back - p).max() < 1e-6

    def test_round_trip_backproject_project(self):
        rng = np.random.default_rng(8)
        cam = random_camera(rng)
        uv = rng.uniform([0, 0], [cam.image_w, cam.image_h], size=(1000, 2))
        depth = rng.uniform(0.5, 70, size=1000)
        pts = backproject_pixels(uv, depth, cam)
        uv2, depth2, valid = project_points(pts, cam)
        assert valid.all()
        assert np.abs(uv2 - uv).max() < 1e-6
        assert np.abs(depth2 - depth).max() < 1e-6

    def test_camera_validation(self):
        bad = np.eye(3)
        bad[0, 0] = 1.5
        with pytest.raises(ValueError):
            CameraModel(1, 1, 0, 0, bad, np.zeros(3), 10, 10)
        with pytest.raises(ValueError):
            CameraModel(-1, 1, 0, 0, np.eye(3), np.zeros(3), 10, 10)


class TestBoxCorners:
    def test_unit_cube(self):
        corners = box_corners(Box3D(center=[0, 0, 0], dims=[1, 1, 1], yaw=0))
        expected = {(sx / 2, sy / 2, sz / 2) for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)}
        assert {tuple(np.round(c, 12)) for c in corners} == expected

    def test_first_corner_and_order(self):
        corners = box_corners(Box3D(center=[0, 0, 0], dims=[2, 1, 1], yaw=0))
        assert np.allclose(corners[0], [1.0, 0.5, -0.5])
        assert np.allclose(corners[4], [1.0, 0.5, 0.5])
        # bottom face is counterclockwise
        area = 0.0
        for i in range(4):
            a, b = corners[i, :2], corners[(i + 1) % 4, :2]
            area += a[0] * b[1] - b[0] * a[1]
        assert area > 0

    def test_quarter_turn_swaps_axes(self):
        a = Box3D(center=[0, 0, 0], dims=[2, 1, 1], yaw=math.pi / 2)
        b = Box3D(center=[0, 0, 0], dims=[1, 2, 1], yaw=0.0)
        assert iou_bev(a, b) == pytest.approx(1.0, abs=1e-12)

    def test_yaw_pi_equals_minus_pi(self):
        a = Box3D(center=[1, 2, 0], dims=[2, 1, 1], yaw=math.pi)
        b = Box3D(center=[1, 2, 0], dims=[2, 1, 1], yaw=-math.pi)
        assert np.allclose(box_corners(a), box_corners(b))


class TestIouBev:
    def test_identical(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            b = random_box(rng)
            assert iou_bev(b, b) == pytest.approx(1.0, abs=1e-12)

    def test_rotated_square_analytic(self):
        a = Box3D(center=[0, 0, 0], dims=[2, 2, 1], yaw=0)
        b = Box3D(center=[0, 0, 0], dims=[2, 2, 1], yaw=math.pi / 4)
        assert abs(iou_bev(a, b) - math.sqrt(2) / 2) < 1e-6

    def test_disjoint(self):
        a = Box3D(center=[0, 0, 0], dims=[2, 2, 1], yaw=0.3)
        b = Box3D(center=[100, 0, 0], dims=[2, 2, 1], yaw=-0.2)
        assert iou_bev(a, b) == 0.0

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            a, b = overlapping_pair(rng)
            assert iou_bev(a, b) == pytest.approx(mc_iou_bev(a, b, 200_000, rng), abs=0.005)

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a, b = overlapping_pair(rng)
            assert iou_bev(a, b) == pytest.approx(iou_bev(b, a), abs=1e-12)
            assert 0.0 <= iou_bev(a, b) <= 1.0


class TestIou3d:
    def test_identical(self):
        b = Box3D(center=[1, 2, 3], dims=[2, 1, 1.5], yaw=0.7)
        assert iou_3d(b, b) == pytest.approx(1.0, abs=1e-12)

    def test_z_shift_hand_case(self):
        a = Box3D(center=[0, 0, 0.5], dims=[1, 1, 1], yaw=0)
        b = Box3D(center=[0, 0, 1.0], dims=[1, 1, 1], yaw=0)
        assert iou_3d(a, b) == pytest.approx(1 / 3, abs=1e-12)

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            a, b = overlapping_pair(rng)
            assert iou_3d(a, b) == pytest.approx(mc_iou_3d(a, b, 200_000, rng), abs=0.01)


class TestGiou:
    def test_identical(self):
        b = Box3D(center=[0, 0, 0], dims=[2, 1, 1], yaw=0.4)
        assert giou_bev(b, b) == pytest.approx(1.0, abs=1e-12)
        assert giou_3d(b, b) == pytest.approx(1.0, abs=1e-12)

    def test_separated_hand_case(self):
        a = Box3D(center=[0, 0, 0], dims=[1, 1, 1], yaw=0)
        b = Box3D(center=[2, 0, 0], dims=[1, 1, 1], yaw=0)
        assert giou_bev(a, b) == pytest.approx(-1 / 3, abs=1e-12)

    def test_touching_squares(self):
        a = Box3D(center=[0, 0, 0], dims=[1, 1, 1], yaw=0)
        b = Box3D(center=[1, 0, 0], dims=[1, 1, 1], yaw=0)
        assert giou_bev(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_giou_le_iou(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            a, b = overlapping_pair(rng)
            assert giou_bev(a, b) <= iou_bev(a, b) + 1e-12
            assert giou_3d(a, b) <= iou_3d(a, b) + 1e-12
            assert giou_bev(a, b) > -1.0

    def test_giou_equals_iou_when_hull_is_union(self):
        a = Box3D(center=[0, 0, 0], dims=[2, 2, 2], yaw=0)
        b = Box3D(center=[0, 0, 0], dims=[1, 1, 1], yaw=0)  # nested: hull = union
        assert giou_bev(a, b) == pytest.approx(iou_bev(a, b), abs=1e-12)


class TestRigidInvariance:
    def test_metrics_invariant(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            a, b = overlapping_pair(rng)
            angle = rng.uniform(-math.pi, math.pi)
            shift = rng.uniform(-20, 20, size=3)
            a2, b2 = rigid_move_box(a, angle, shift), rigid_move_box(b, angle, shift)
            assert iou_bev(a2, b2) == pytest.approx(iou_bev(a, b), abs=1e-9)
            assert iou_3d(a2, b2) == pytest.approx(iou_3d(a, b), abs=1e-9)
            assert giou_bev(a2, b2) == pytest.approx(giou_bev(a, b), abs=1e-9)


class TestConvexHull:
    def test_square_hull(self):
        pts = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5]])
        hull = convex_hull(pts)
        assert len(hull) == 4

    def test_collinear(self):
        pts = np.array([[0, 0], [1, 0], [2, 0]])
        hull = convex_hull(pts)
        assert len(hull) <= 2 or np.allclose(hull[:, 1], 0)


class TestPointInBox:
    def test_matches_corner_geometry(self):
        rng = np.random.default_rng(21)
        box = random_box(rng)
        corners = box_corners(box)
        inner = corners.mean(axis=0)
        assert point_in_box(inner[None, :], box)[0]
        outside = box.center + np.array([box.dims[0], box.dims[1], 0]) * 2
        assert not point_in_box(outside[None, :], box)[0]


class TestNms:
    def test_identical_boxes_keep_top(self):
        box = Box3D(center=[0, 0, 0], dims=[2, 1, 1], yaw=0)
        dets = [Detection(box, 0.9), Detection(box.copy(), 0.8)]
        kept = nms(dets, 0.5)
        assert len(kept) == 1 and kept[0].score == 0.9

    def test_disjoint_kept(self):
        a = Detection(Box3D(center=[0, 0, 0], dims=[1, 1, 1], yaw=0), 0.9)
        b = Detection(Box3D(center=[50, 0, 0], dims=[1, 1, 1], yaw=0), 0.3)
        assert len(nms([a, b], 0.5)) == 2

    def test_tie_break_by_index(self):
        box = Box3D(center=[0, 0, 0], dims=[2, 1, 1], yaw=0)
        d0 = Detection(box, 0.7, class_id=1)
        d1 = Detection(box.copy(), 0.7, class_id=2)
        kept = nms([d0, d1], 0.5)
        assert len(kept) == 1 and kept[0].class_id == 1

    def test_output_descending_and_no_overlap(self):
        rng = np.random.default_rng(13)
        dets = [
            Detection(random_box(rng, center_scale=6.0), rng.uniform(0, 1))
            for _ in range(30)
        ]
        kept = nms(dets, 0.4)
        scores = [d.score for d in kept]
        assert scores == sorted(scores, reverse=True)
        input_sorted = sorted((d.score for d in dets), reverse=True)
        # kept scores are a subsequence of the sorted input scores
        it = iter(input_sorted)
        assert all(any(s == t for t in it) for s in scores)
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                assert iou_bev(kept[i].box, kept[j].box) <= 0.4 + 1e-12


class TestValidation:
    def test_box_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            Box3D(center=[0, 0, 0], dims=[0, 1, 1], yaw=0)

    def test_detection_rejects_bad_score(self):
        box = Box3D(center=[0, 0, 0], dims=[1, 1, 1], yaw=0)
        with pytest.raises(ValueError):
            Detection(box, 1.5)

    def test_yaw_wrapped_on_construction(self):
        box = Box3D(center=[0, 0, 0], dims=[1, 1, 1], yaw=4 * math.pi + 0.3)
        assert box.yaw == pytest.approx(0.3)
