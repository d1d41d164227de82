import math

import numpy as np
import pytest

from fusedet import kitti_io
from fusedet.geometry import Box3D, CameraModel
from fusedet.kitti_io import FormatError, KittiLabel


class TestVelodyne:
    def test_two_known_points(self, tmp_path):
        pts = np.array([[1.0, 2.0, 3.0, 0.5], [-4.0, 0.25, 1.5, 1.0]], dtype="<f4")
        path = tmp_path / "scan.bin"
        path.write_bytes(pts.tobytes())
        out = kitti_io.read_velodyne(path)
        assert out.shape == (2, 4)
        assert np.array_equal(out, pts.astype(np.float64))

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.bin"
        path.write_bytes(b"")
        assert kitti_io.read_velodyne(path).shape == (0, 4)

    def test_bad_size(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * 17)
        with pytest.raises(FormatError, match="divisible by 16"):
            kitti_io.read_velodyne(path)

    def test_round_trip_byte_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(500, 4)).astype("<f4").astype(np.float64)
        p1 = tmp_path / "a.bin"
        p2 = tmp_path / "b.bin"
        kitti_io.write_velodyne(p1, pts)
        kitti_io.write_velodyne(p2, kitti_io.read_velodyne(p1))
        assert p1.read_bytes() == p2.read_bytes()


def write_calib_text(path, p2, r0, tr):
    with open(path, "w") as f:
        f.write("P2: " + " ".join(str(v) for v in np.asarray(p2).reshape(-1)) + "\n")
        f.write("R0_rect: " + " ".join(str(v) for v in np.asarray(r0).reshape(-1)) + "\n")
        f.write(
            "Tr_velo_to_cam: "
            + " ".join(str(v) for v in np.asarray(tr).reshape(-1))
            + "\n"
        )


class TestCalib:
    def test_identity_fixture(self, tmp_path):
        path = tmp_path / "calib.txt"
        p2 = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]], dtype=float)
        write_calib_text(path, p2, np.eye(3), np.eye(3, 4))
        cam = kitti_io.read_calib(path)
        assert cam.fx == 1 and cam.fy == 1 and cam.cx == 0 and cam.cy == 0
        assert np.allclose(cam.rotation, np.eye(3))
        assert np.allclose(cam.translation, 0)

    def test_pure_translation(self, tmp_path):
        path = tmp_path / "calib.txt"
        p2 = np.array([[2, 0, 5, 0], [0, 2, 5, 0], [0, 0, 1, 0]], dtype=float)
        tr = np.concatenate([np.eye(3), [[0.5], [-1.0], [2.0]]], axis=1)
        write_calib_text(path, p2, np.eye(3), tr)
        cam = kitti_io.read_calib(path)
        assert np.allclose(cam.lidar_to_cam([0, 0, 0]), [0.5, -1.0, 2.0])

    def test_missing_key(self, tmp_path):
        path = tmp_path / "calib.txt"
        path.write_text("P2: " + " ".join(["0"] * 12) + "\n")
        with pytest.raises(FormatError, match="R0_rect"):
            kitti_io.read_calib(path)

    def test_wrong_count(self, tmp_path):
        path = tmp_path / "calib.txt"
        write_calib_text(path, np.zeros(11), np.eye(3), np.eye(3, 4))
        with pytest.raises(FormatError, match="P2"):
            kitti_io.read_calib(path)

    def test_non_orthonormal_r0(self, tmp_path):
        path = tmp_path / "calib.txt"
        p2 = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]], dtype=float)
        write_calib_text(path, p2, np.eye(3) * 1.1, np.eye(3, 4))
        with pytest.raises(FormatError, match="orthonormal"):
            kitti_io.read_calib(path)

    def test_real_kitti_line_round_trip(self, tmp_path):
        # a genuine KITTI-style calibration (rounded); P2 carries a stereo
        # baseline in its fourth column
        path = tmp_path / "calib.txt"
        p2 = np.array(
            [
                [721.5377, 0.0, 609.5593, 44.85728],
                [0.0, 721.5377, 172.854, 0.2163791],
                [0.0, 0.0, 1.0, 0.002745884],
            ]
        )
        r0 = np.array(
            [
                [0.9999239, 0.00983776, -0.007445048],
                [-0.0098698, 0.9999421, -0.004278459],
                [0.007402527, 0.004351614, 0.9999631],
            ]
        )
        tr = np.array(
            [
                [7.533745e-03, -9.999714e-01, -6.166020e-04, -4.069766e-03],
                [1.480249e-02, 7.280733e-04, -9.998902e-01, -7.631618e-02],
                [9.998621e-01, 7.523790e-03, 1.480755e-02, -2.717806e-01],
            ]
        )
        write_calib_text(path, p2, r0, tr)
        cam = kitti_io.read_calib(path)
        from fusedet.geometry import backproject_pixel, project_lidar_to_image

        p = np.array([12.0, -2.5, -0.8])
        u, v, depth = project_lidar_to_image(p, cam)
        back = backproject_pixel(u, v, depth, cam)
        assert np.abs(back - p).max() < 1e-4

    def test_write_read_round_trip(self, tmp_path):
        rot = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        cam = CameraModel(100, 110, 64, 32, rot, [0.1, -0.2, 0.3], 128, 64)
        path = tmp_path / "calib.txt"
        kitti_io.write_calib(path, cam)
        cam2 = kitti_io.read_calib(path, image_w=128, image_h=64)
        assert np.allclose(cam2.rotation, cam.rotation, atol=1e-10)
        assert np.allclose(cam2.translation, cam.translation, atol=1e-10)
        assert (cam2.fx, cam2.fy, cam2.cx, cam2.cy) == (100, 110, 64, 32)


CANONICAL_CAR = (
    "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59"
)


class TestLabels:
    def test_canonical_car_line(self, tmp_path):
        path = tmp_path / "label.txt"
        path.write_text(CANONICAL_CAR + "\n")
        labels = kitti_io.read_labels(path)
        assert len(labels) == 1
        lab = labels[0]
        assert lab.class_name == "Car"
        assert lab.truncation == 0.0
        assert lab.occlusion == 0
        assert lab.alpha == pytest.approx(-1.58)
        assert lab.bbox == pytest.approx((587.01, 173.33, 614.12, 200.12))
        assert lab.dims == pytest.approx((1.65, 1.67, 3.64))
        assert lab.location == pytest.approx((-0.65, 1.71, 46.70))
        assert lab.rotation_y == pytest.approx(-1.59)
        assert lab.score is None

    def test_dontcare_accepted(self, tmp_path):
        path = tmp_path / "label.txt"
        path.write_text(
            "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n"
        )
        labels = kitti_io.read_labels(path)
        assert len(labels) == 1
        assert not labels[0].evaluable

    def test_field_count_error_has_line_number(self, tmp_path):
        path = tmp_path / "label.txt"
        path.write_text(CANONICAL_CAR + "\n" + "Car 1 2 3\n")
        with pytest.raises(FormatError, match=":2:"):
            kitti_io.read_labels(path)

    def test_random_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        labels = []
        for _ in range(100):
            h, w, l = rng.uniform(0.5, 4, size=3)
            labels.append(
                KittiLabel(
                    class_name=str(rng.choice(["Car", "Pedestrian", "Cyclist"])),
                    truncation=float(np.round(rng.uniform(0, 1), 2)),
                    occlusion=int(rng.integers(0, 4)),
                    alpha=float(rng.uniform(-math.pi, math.pi)),
                    bbox=tuple(np.sort(rng.uniform(0, 1000, size=4)).tolist()),
                    dims=(h, w, l),
                    location=tuple(rng.uniform(-50, 50, size=3).tolist()),
                    rotation_y=float(rng.uniform(-math.pi, math.pi)),
                    score=float(rng.uniform(0, 1)),
                )
            )
        path = tmp_path / "labels.txt"
        kitti_io.write_labels(path, labels)
        back = kitti_io.read_labels(path)
        assert len(back) == len(labels)
        for a, b in zip(labels, back):
            assert a.class_name == b.class_name
            assert b.truncation == pytest.approx(a.truncation, rel=1e-5)
            assert b.dims == pytest.approx(a.dims, rel=1e-5)
            assert b.location == pytest.approx(a.location, rel=1e-5, abs=1e-4)
            assert b.rotation_y == pytest.approx(a.rotation_y, rel=1e-5, abs=1e-5)
            assert b.score == pytest.approx(a.score, rel=1e-5)
        # a second write is textually identical (formatting is stable)
        path2 = tmp_path / "labels2.txt"
        kitti_io.write_labels(path2, back)
        assert path.read_text() == path2.read_text()

    def test_label_box_conversion_round_trip(self):
        rot = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        cam = CameraModel(100, 100, 64, 32, rot, [0.01, -0.05, 0.1], 128, 64)
        rng = np.random.default_rng(2)
        for _ in range(50):
            box = Box3D(
                center=[rng.uniform(5, 50), rng.uniform(-10, 10), rng.uniform(-2, 1)],
                dims=rng.uniform(0.5, 4, size=3),
                yaw=rng.uniform(-math.pi, math.pi),
            )
            label = kitti_io.lidar_box_to_label(box, cam, "Car")
            back = kitti_io.label_to_lidar_box(label, cam)
            assert np.abs(back.center - box.center).max() < 1e-9
            assert np.abs(back.dims - box.dims).max() < 1e-9
            d_yaw = (back.yaw - box.yaw + math.pi) % (2 * math.pi) - math.pi
            assert abs(d_yaw) < 1e-9


class TestDepth:
    def test_png_defining_convention(self, tmp_path):
        depth = np.zeros((4, 6))
        depth[1, 2] = 1.0  # stored as 256
        path = tmp_path / "d.png"
        kitti_io.write_depth_png(path, depth)
        back = kitti_io.read_depth_png(path)
        assert back[1, 2] == 1.0
        assert back[0, 0] == 0.0

    def test_value_zero_invalid(self, tmp_path):
        from fusedet.geometry import CameraModel
        from fusedet.pseudo_cloud import depth_to_pseudo_cloud

        depth = np.zeros((4, 6))
        cam = CameraModel(1, 1, 3, 2, np.eye(3), np.zeros(3), 6, 4)
        cloud = depth_to_pseudo_cloud(depth, np.zeros((4, 6, 3)), cam)
        assert len(cloud) == 0

    def test_png_round_trip_value_identical(self, tmp_path):
        rng = np.random.default_rng(3)
        depth = np.round(rng.uniform(0, 80, size=(32, 48)) * 256) / 256
        path = tmp_path / "d.png"
        kitti_io.write_depth_png(path, depth)
        assert np.array_equal(kitti_io.read_depth_png(path), depth)

    def test_png_rejects_8bit(self, tmp_path):
        from PIL import Image

        path = tmp_path / "bad.png"
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8), mode="L").save(path)
        with pytest.raises(FormatError):
            kitti_io.read_depth_png(path)

    def test_png_rejects_rgb(self, tmp_path):
        from PIL import Image

        path = tmp_path / "rgb.png"
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8), mode="RGB").save(path)
        with pytest.raises(FormatError):
            kitti_io.read_depth_png(path)

    def test_f32grid_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        grid = rng.uniform(0, 70, size=(20, 30)).astype("<f4").astype(np.float64)
        path = tmp_path / "d.f32grid"
        kitti_io.write_f32grid(path, grid)
        assert np.array_equal(kitti_io.read_f32grid(path), grid)

    def test_f32grid_multichannel(self, tmp_path):
        rng = np.random.default_rng(5)
        rgb = rng.random((8, 10, 3)).astype("<f4").astype(np.float64)
        path = tmp_path / "rgb.f32grid"
        kitti_io.write_f32grid(path, rgb)
        back = kitti_io.read_f32grid(path, expect_channels=3)
        assert np.array_equal(back, rgb)
        with pytest.raises(FormatError):
            kitti_io.read_f32grid(path, expect_channels=1)

    def test_f32grid_bad_magic(self, tmp_path):
        path = tmp_path / "x.f32grid"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FormatError, match="magic"):
            kitti_io.read_f32grid(path)

    def test_f32grid_truncated(self, tmp_path):
        import struct

        path = tmp_path / "t.f32grid"
        path.write_bytes(b"F32G" + struct.pack("<III", 4, 4, 1) + b"\x00" * 10)
        with pytest.raises(FormatError, match="size"):
            kitti_io.read_f32grid(path)
