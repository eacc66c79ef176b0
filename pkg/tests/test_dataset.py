import os

import numpy as np
import pytest
from PIL import Image

from dvio.dataset import (
    AlignmentTransform,
    DatasetError,
    TrajectoryEstimate,
    align_trajectories,
    associate,
    calibration_from_config,
    compute_ate,
    convert_euroc_yaml,
    imu_batch_between,
    load_dataset,
    read_config,
    read_pointcloud,
    read_trajectory,
    write_config,
    write_pointcloud,
    write_trajectory,
)
from dvio.so3 import exp_so3, rotation_to_quat


def _write_sequence(root, n_images=3, n_imu=30, with_gt=True,
                    shuffle_imu=False):
    cam = os.path.join(root, "mav0", "cam0")
    os.makedirs(os.path.join(cam, "data"))
    imu_dir = os.path.join(root, "mav0", "imu0")
    os.makedirs(imu_dir)

    t0 = 100_000_000_000  # ns
    cam_dt = 100_000_000  # 10 Hz
    with open(os.path.join(cam, "data.csv"), "w") as fh:
        fh.write("#timestamp [ns],filename\n")
        for i in range(n_images):
            ts = t0 + i * cam_dt
            name = f"{ts}.png"
            Image.fromarray(
                (np.full((24, 32), 100 + i)).astype(np.uint8)
            ).save(os.path.join(cam, "data", name))
            fh.write(f"{ts},{name}\n")

    imu_dt = cam_dt * n_images // n_imu
    rows = list(range(n_imu))
    if shuffle_imu:
        rows[5], rows[6] = rows[6], rows[5]
    with open(os.path.join(imu_dir, "data.csv"), "w") as fh:
        fh.write("#timestamp,wx,wy,wz,ax,ay,az\n")
        for i in rows:
            ts = t0 + i * imu_dt
            fh.write(f"{ts},0.01,{0.001 * i},0.0,0.1,0.0,-9.8\n")

    if with_gt:
        gt_dir = os.path.join(root, "mav0", "state_groundtruth_estimate0")
        os.makedirs(gt_dir)
        with open(os.path.join(gt_dir, "data.csv"), "w") as fh:
            fh.write("#ts,px,py,pz,qw,qx,qy,qz,vx,vy,vz,bwx,bwy,bwz,bax,bay,baz\n")
            for i in range(n_images):
                ts = t0 + i * cam_dt
                fh.write(f"{ts},{0.1 * i},0,0,1,0,0,0,1,0,0,0,0,0,0,0,0\n")
    return root


class TestLoadDataset:
    def test_counts_and_content(self, tmp_path):
        idx = load_dataset(_write_sequence(str(tmp_path)))
        assert len(idx.image_paths) == 3
        assert len(idx.imu) == 30
        assert len(idx.groundtruth) == 3
        assert idx.gt_velocities.shape == (3, 3)
        assert np.isclose(idx.image_timestamps[0], 100.0)
        assert np.allclose(idx.imu[0].accel, [0.1, 0.0, -9.8])
        assert np.allclose(idx.groundtruth.positions[2], [0.2, 0, 0])

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(str(tmp_path / "nope"))

    def test_empty_imu_csv(self, tmp_path):
        root = _write_sequence(str(tmp_path))
        with open(os.path.join(root, "mav0", "imu0", "data.csv"), "w") as fh:
            fh.write("#header only\n")
        with pytest.raises(DatasetError):
            load_dataset(root)

    def test_non_monotone_imu_names_line(self, tmp_path):
        root = _write_sequence(str(tmp_path), shuffle_imu=True)
        with pytest.raises(DatasetError, match=r"data\.csv:8"):
            load_dataset(root)

    def test_missing_image_file(self, tmp_path):
        root = _write_sequence(str(tmp_path))
        victims = os.listdir(os.path.join(root, "mav0", "cam0", "data"))
        os.remove(os.path.join(root, "mav0", "cam0", "data", sorted(victims)[0]))
        with pytest.raises(DatasetError, match="image not found"):
            load_dataset(root)

    def test_malformed_imu_row_names_line(self, tmp_path):
        root = _write_sequence(str(tmp_path))
        path = os.path.join(root, "mav0", "imu0", "data.csv")
        with open(path) as fh:
            lines = fh.readlines()
        lines[3] = "100,not-a-number,0,0,0,0,0\n"
        with open(path, "w") as fh:
            fh.writelines(lines)
        with pytest.raises(DatasetError, match=r"data\.csv:4"):
            load_dataset(root)

    def test_works_without_groundtruth(self, tmp_path):
        idx = load_dataset(_write_sequence(str(tmp_path), with_gt=False))
        assert idx.groundtruth is None


class TestImuBatches:
    def test_batches_tile_exactly(self, tmp_path):
        idx = load_dataset(_write_sequence(str(tmp_path)))
        t = idx.image_timestamps
        b01 = imu_batch_between(idx.imu, t[0], t[1])
        b12 = imu_batch_between(idx.imu, t[1], t[2])
        assert b01[0].timestamp == t[0]
        assert b01[-1].timestamp == t[1]
        assert b12[0].timestamp == t[1]
        assert np.allclose(b01[-1].gyro, b12[0].gyro)
        assert np.allclose(b01[-1].accel, b12[0].accel)
        inner_ts = [s.timestamp for s in b01[1:-1]] + [s.timestamp for s in b12[1:-1]]
        assert len(inner_ts) == len(set(inner_ts))

    def test_boundary_linear_interpolation(self, tmp_path):
        idx = load_dataset(_write_sequence(str(tmp_path)))
        times = [s.timestamp for s in idx.imu]
        mid = 0.5 * (times[3] + times[4])
        batch = imu_batch_between(idx.imu, times[0], mid)
        expect = 0.5 * (idx.imu[3].gyro + idx.imu[4].gyro)
        assert np.allclose(batch[-1].gyro, expect)

    def test_outside_stream_rejected(self, tmp_path):
        idx = load_dataset(_write_sequence(str(tmp_path)))
        with pytest.raises(ValueError):
            imu_batch_between(idx.imu, 0.0, 1.0)


class TestTrajectoryIO:
    def test_identity_line_format(self, tmp_path):
        traj = TrajectoryEstimate(np.array([1.0]), np.zeros((1, 3)),
                                  np.array([[1.0, 0, 0, 0]]))
        path = str(tmp_path / "traj.txt")
        write_trajectory(traj, path)
        with open(path) as fh:
            assert fh.read().strip() == "1.000000000 0 0 0 0 0 0 1"

    def test_round_trip(self, tmp_path, rng):
        n = 50
        q = rng.normal(size=(n, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        traj = TrajectoryEstimate(np.arange(n) * 0.1 + 5.0,
                                  rng.normal(0, 3, (n, 3)), q)
        path = str(tmp_path / "traj.txt")
        write_trajectory(traj, path)
        back = read_trajectory(path)
        assert np.allclose(back.timestamps, traj.timestamps, atol=1e-9)
        assert np.allclose(back.positions, traj.positions, atol=1e-7)
        assert np.allclose(back.quaternions, traj.quaternions, atol=1e-7)

    def test_line_count(self, tmp_path):
        n = 1000
        traj = TrajectoryEstimate(np.arange(n, dtype=float), np.zeros((n, 3)),
                                  np.tile([1.0, 0, 0, 0], (n, 1)))
        path = str(tmp_path / "traj.txt")
        write_trajectory(traj, path)
        with open(path) as fh:
            assert sum(1 for _ in fh) == n

    def test_rejects_non_monotone(self):
        with pytest.raises(ValueError):
            TrajectoryEstimate(np.array([1.0, 1.0]), np.zeros((2, 3)),
                               np.tile([1.0, 0, 0, 0], (2, 1)))

    def test_rejects_non_unit_quaternion(self):
        with pytest.raises(ValueError):
            TrajectoryEstimate(np.array([0.0]), np.zeros((1, 3)),
                               np.array([[1.1, 0, 0, 0]]))

    def test_read_malformed_line(self, tmp_path):
        path = str(tmp_path / "traj.txt")
        with open(path, "w") as fh:
            fh.write("1.0 0 0 0\n")
        with pytest.raises(DatasetError, match="8 fields"):
            read_trajectory(path)


class TestPointcloudIO:
    def test_round_trip(self, tmp_path, rng):
        pts = rng.normal(0, 2, (40, 3))
        inten = rng.uniform(0, 255, 40)
        path = str(tmp_path / "cloud.ply")
        write_pointcloud(pts, inten, path)
        back_pts, back_int = read_pointcloud(path)
        assert np.allclose(back_pts, pts, atol=1e-4)
        assert np.allclose(back_int, inten, atol=1e-3)

    def test_header_count(self, tmp_path):
        path = str(tmp_path / "cloud.ply")
        write_pointcloud(np.ones((7, 3)), np.ones(7), path)
        with open(path) as fh:
            assert "element vertex 7" in fh.read()

    def test_empty_cloud(self, tmp_path):
        path = str(tmp_path / "cloud.ply")
        write_pointcloud(np.zeros((0, 3)), np.zeros(0), path)
        pts, inten = read_pointcloud(path)
        assert pts.shape == (0, 3) and inten.shape == (0,)

    def test_truncated_body_rejected(self, tmp_path):
        path = str(tmp_path / "cloud.ply")
        write_pointcloud(np.ones((3, 3)), np.ones(3), path)
        with open(path) as fh:
            lines = fh.readlines()
        with open(path, "w") as fh:
            fh.writelines(lines[:-1])
        with pytest.raises(DatasetError):
            read_pointcloud(path)


def _traj(positions, t0=0.0, dt=0.1):
    n = len(positions)
    return TrajectoryEstimate(t0 + np.arange(n) * dt, np.asarray(positions),
                              np.tile([1.0, 0, 0, 0], (n, 1)))


class TestAlignment:
    def test_associate_within_window(self):
        pairs = associate(np.array([0.0, 1.0, 2.0]),
                          np.array([0.004, 1.2, 1.998]))
        assert pairs == [(0, 0), (2, 2)]

    def test_identity(self, rng):
        gt = _traj(rng.normal(0, 1, (20, 3)))
        aligned, tf, pairs = align_trajectories(gt, gt)
        assert len(pairs) == 20
        assert np.allclose(tf.R, np.eye(3), atol=1e-9)
        assert np.allclose(tf.t, 0, atol=1e-9)
        assert np.allclose(aligned.positions, gt.positions, atol=1e-9)

    def test_recovers_rigid_transform(self, rng):
        gt_pos = rng.normal(0, 1, (30, 3))
        R = exp_so3(np.array([0.0, 0.0, np.deg2rad(30.0)]))
        shift = np.array([1.0, -2.0, 0.5])
        est_pos = (gt_pos - shift) @ R  # est = R^T (gt - shift)
        aligned, tf, _ = align_trajectories(_traj(est_pos), _traj(gt_pos))
        assert np.allclose(tf.R, R, atol=1e-9)
        assert np.allclose(tf.t, shift, atol=1e-9)
        assert np.allclose(aligned.positions, gt_pos, atol=1e-9)

    def test_recovers_scale(self, rng):
        gt_pos = rng.normal(0, 1, (30, 3))
        aligned, tf, _ = align_trajectories(_traj(0.5 * gt_pos), _traj(gt_pos),
                                            with_scale=True)
        assert np.isclose(tf.scale, 2.0, atol=1e-9)
        assert np.allclose(aligned.positions, gt_pos, atol=1e-9)

    def test_too_few_pairs(self, rng):
        est = _traj(rng.normal(0, 1, (5, 3)), t0=100.0)
        gt = _traj(rng.normal(0, 1, (5, 3)), t0=0.0)
        with pytest.raises(ValueError):
            align_trajectories(est, gt)


class TestAte:
    def test_identical(self, rng):
        gt = _traj(rng.normal(0, 1, (20, 3)))
        rmse, errs = compute_ate(gt, gt)
        assert rmse == 0.0
        assert np.all(errs == 0)

    def test_constant_offset(self, rng):
        gt = _traj(rng.normal(0, 1, (20, 3)))
        est = _traj(gt.positions + np.array([0.1, 0, 0]))
        rmse, _ = compute_ate(est, gt)
        assert np.isclose(rmse, 0.1)

    def test_random_perturbation_statistics(self, rng):
        n = 1000
        gt = _traj(rng.normal(0, 1, (n, 3)))
        est = _traj(gt.positions + rng.normal(0, 0.05, (n, 3)))
        rmse, _ = compute_ate(est, gt)
        assert abs(rmse - 0.05 * np.sqrt(3)) < 0.1 * 0.05 * np.sqrt(3)

    def test_empty_association(self, rng):
        est = _traj(rng.normal(0, 1, (5, 3)), t0=100.0)
        gt = _traj(rng.normal(0, 1, (5, 3)), t0=0.0)
        with pytest.raises(ValueError):
            compute_ate(est, gt)


class TestConfig:
    def test_round_trip(self, tmp_path):
        vals = {"camera.fx": "250.0", "tracking.huber_k": "9.0",
                "extrinsic.t": "0.1 0.2 0.3"}
        path = str(tmp_path / "conf.txt")
        write_config(vals, path)
        assert read_config(path) == vals

    def test_comments_and_blanks(self, tmp_path):
        path = str(tmp_path / "conf.txt")
        with open(path, "w") as fh:
            fh.write("# comment\n\ncamera.fx = 250.0  # trailing\n")
        assert read_config(path) == {"camera.fx": "250.0"}

    def test_malformed_line(self, tmp_path):
        path = str(tmp_path / "conf.txt")
        with open(path, "w") as fh:
            fh.write("no equals sign here\n")
        with pytest.raises(DatasetError, match="conf.txt:1"):
            read_config(path)

    def test_calibration_from_config(self):
        vals = {
            "camera.fx": "250", "camera.fy": "251", "camera.cx": "160",
            "camera.cy": "120", "camera.width": "320", "camera.height": "240",
            "extrinsic.t": "0.01 0.02 0.03",
            "noise.sigma_a": "0.002", "gravity": "0 0 -9.81",
            "pipeline.max_frames": "100",
        }
        cal = calibration_from_config(vals)
        assert cal.intrinsics.fx == 250.0
        assert np.allclose(cal.t_imu_cam, [0.01, 0.02, 0.03])
        assert cal.noise.sigma_a == 0.002
        assert cal.noise.gravity[2] == -9.81
        assert cal.extras == {"pipeline.max_frames": "100"}

    def test_missing_camera_key(self):
        with pytest.raises(DatasetError, match="camera.fy"):
            calibration_from_config({"camera.fx": "250"})


EUROC_CAM_YAML = """%YAML:1.0
sensor_type: camera
T_BS:
  cols: 4
  rows: 4
  data: [0.0, 0.0, 1.0, 0.1,
         -1.0, 0.0, 0.0, 0.0,
         0.0, -1.0, 0.0, -0.05,
         0.0, 0.0, 0.0, 1.0]
rate_hz: 20
resolution: [752, 480]
camera_model: pinhole
intrinsics: [458.654, 457.296, 367.215, 248.375]
"""

EUROC_IMU_YAML = """%YAML:1.0
sensor_type: imu
gyroscope_noise_density: 1.6968e-04
gyroscope_random_walk: 1.9393e-05
accelerometer_noise_density: 2.0000e-3
accelerometer_random_walk: 3.0000e-3
"""


class TestEurocYamlConverter:
    def test_convert(self, tmp_path):
        cam_path = str(tmp_path / "cam.yaml")
        imu_path = str(tmp_path / "imu.yaml")
        with open(cam_path, "w") as fh:
            fh.write(EUROC_CAM_YAML)
        with open(imu_path, "w") as fh:
            fh.write(EUROC_IMU_YAML)
        vals = convert_euroc_yaml(cam_path, imu_path)
        cal = calibration_from_config(vals)
        assert cal.intrinsics.fx == 458.654
        assert cal.intrinsics.width == 752
        assert np.allclose(cal.R_imu_cam[0], [0, 0, 1])
        assert np.allclose(cal.t_imu_cam, [0.1, 0.0, -0.05])
        assert cal.noise.sigma_g == 1.6968e-04
