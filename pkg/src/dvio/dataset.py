"""Dataset ingestion (EuRoC ASL layout), trajectory/point-cloud files, config
parsing, and trajectory evaluation (rigid/similarity alignment + ATE).

Formats:
  * trajectories: TUM text, `timestamp tx ty tz qx qy qz qw` per line;
  * point clouds: ASCII PLY with x, y, z, intensity;
  * config: flat `key = value` text, '#' comments.
Quaternions are stored (w, x, y, z) internally and reordered on file I/O.
"""

import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .camera import CameraIntrinsics
from .imu import ImuSample, NoiseParams
from .so3 import is_rotation, quat_to_rotation, rotation_to_quat


class DatasetError(ValueError):
    """Malformed or missing dataset input; the message names file and line."""


@dataclass(frozen=True)
class TrajectoryEstimate:
    """Timestamped poses: positions (N, 3) and unit quaternions (N, 4) wxyz."""
    timestamps: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=float)
        p = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        q = np.asarray(self.quaternions, dtype=float).reshape(-1, 4)
        if not (len(t) == len(p) == len(q)):
            raise ValueError("trajectory stream lengths differ")
        if np.any(np.diff(t) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        norms = np.linalg.norm(q, axis=1)
        if len(q) and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("trajectory quaternions must be unit within 1e-6")
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "quaternions", q)

    def __len__(self):
        return len(self.timestamps)


@dataclass(frozen=True)
class DatasetIndex:
    """Parsed sensor streams of one sequence, timestamps in seconds."""
    image_timestamps: np.ndarray
    image_paths: list
    imu: list                      # ImuSample list
    groundtruth: object = None     # TrajectoryEstimate or None
    gt_velocities: np.ndarray = None


def _parse_csv(path, n_cols):
    """Numeric CSV rows (comments/header with '#' skipped), with the
    1-based line number attached to every parse failure."""
    if not os.path.isfile(path):
        raise DatasetError(f"{path}: file not found")
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p for p in line.replace(",", " ").split() if p]
            if len(parts) < n_cols:
                raise DatasetError(
                    f"{path}:{lineno}: expected {n_cols} columns, got {len(parts)}")
            try:
                rows.append((lineno, parts[0], [float(x) for x in parts[1:]]))
            except ValueError as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from None
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    return rows


def _check_monotone(path, rows, times):
    for i in range(1, len(times)):
        if times[i] <= times[i - 1]:
            raise DatasetError(
                f"{path}:{rows[i][0]}: timestamp not increasing")


def load_dataset(root):
    """Load an EuRoC ASL sequence directory.

    Expects mav0/cam0/data.csv (+ image files under mav0/cam0/data/),
    mav0/imu0/data.csv, and optionally
    mav0/state_groundtruth_estimate0/data.csv.
    """
    mav = os.path.join(root, "mav0")
    if not os.path.isdir(mav):
        raise DatasetError(f"{mav}: not a directory")

    cam_csv = os.path.join(mav, "cam0", "data.csv")
    if not os.path.isfile(cam_csv):
        raise DatasetError(f"{cam_csv}: file not found")
    img_times = []
    img_paths = []
    cam_lines = []
    with open(cam_csv) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p for p in line.split(",") if p.strip()]
            if len(parts) < 2:
                raise DatasetError(f"{cam_csv}:{lineno}: expected timestamp,filename")
            try:
                ts = int(parts[0]) * 1e-9
            except ValueError:
                raise DatasetError(f"{cam_csv}:{lineno}: bad timestamp {parts[0]!r}") from None
            path = os.path.join(mav, "cam0", "data", parts[1].strip())
            if not os.path.isfile(path):
                raise DatasetError(f"{cam_csv}:{lineno}: image not found: {path}")
            img_times.append(ts)
            img_paths.append(path)
            cam_lines.append((lineno,))
    if not img_times:
        raise DatasetError(f"{cam_csv}: no data rows")
    _check_monotone(cam_csv, cam_lines, img_times)

    imu_csv = os.path.join(mav, "imu0", "data.csv")
    imu_rows = _parse_csv(imu_csv, 7)
    imu = []
    times = []
    for lineno, ts_str, vals in imu_rows:
        try:
            ts = int(ts_str) * 1e-9
        except ValueError:
            raise DatasetError(f"{imu_csv}:{lineno}: bad timestamp {ts_str!r}") from None
        times.append(ts)
        imu.append(ImuSample(ts, np.array(vals[0:3]), np.array(vals[3:6])))
    _check_monotone(imu_csv, imu_rows, times)

    gt = None
    gt_vel = None
    gt_csv = os.path.join(mav, "state_groundtruth_estimate0", "data.csv")
    if os.path.isfile(gt_csv):
        gt_rows = _parse_csv(gt_csv, 8)
        t, p, q, v = [], [], [], []
        for lineno, ts_str, vals in gt_rows:
            try:
                t.append(int(ts_str) * 1e-9)
            except ValueError:
                raise DatasetError(f"{gt_csv}:{lineno}: bad timestamp {ts_str!r}") from None
            p.append(vals[0:3])
            quat = np.array(vals[3:7])
            n = np.linalg.norm(quat)
            if abs(n - 1.0) > 1e-3:
                raise DatasetError(f"{gt_csv}:{lineno}: non-unit quaternion")
            q.append(quat / n)
        _check_monotone(gt_csv, gt_rows, t)
        # velocities present in the full 17-column state files
        if len(gt_rows[0][2]) >= 10:
            gt_vel = np.array([r[2][7:10] for r in gt_rows])
        gt = TrajectoryEstimate(np.array(t), np.array(p), np.array(q))

    return DatasetIndex(np.array(img_times), img_paths, imu, gt, gt_vel)


def imu_batch_between(imu, t0, t1):
    """IMU samples covering [t0, t1] exactly, boundaries linearly interpolated.

    Consecutive image intervals therefore tile: the last sample of one batch
    equals the first sample of the next.
    """
    if t1 <= t0:
        raise ValueError("interval must have positive duration")
    times = np.array([s.timestamp for s in imu])
    if t0 < times[0] or t1 > times[-1]:
        raise ValueError("interval not covered by the IMU stream")

    def interp(t):
        i = int(np.searchsorted(times, t, side="right")) - 1
        if times[i] == t:
            return ImuSample(t, imu[i].gyro.copy(), imu[i].accel.copy())
        a, b = imu[i], imu[i + 1]
        w = (t - a.timestamp) / (b.timestamp - a.timestamp)
        return ImuSample(t, (1 - w) * a.gyro + w * b.gyro,
                         (1 - w) * a.accel + w * b.accel)

    inner = [s for s in imu if t0 < s.timestamp < t1]
    return [interp(t0)] + inner + [interp(t1)]


def write_trajectory(traj, path):
    """TUM format: `timestamp tx ty tz qx qy qz qw`, timestamp with 9
    decimal places, other values with 9 significant digits."""
    with open(path, "w") as fh:
        for t, p, q in zip(traj.timestamps, traj.positions, traj.quaternions):
            vals = " ".join("%.9g" % v for v in (p[0], p[1], p[2],
                                                 q[1], q[2], q[3], q[0]))
            fh.write("%.9f %s\n" % (t, vals))


def read_trajectory(path):
    ts, ps, qs = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DatasetError(f"{path}:{lineno}: expected 8 fields")
            try:
                vals = [float(x) for x in parts]
            except ValueError as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from None
            ts.append(vals[0])
            ps.append(vals[1:4])
            qs.append([vals[7], vals[4], vals[5], vals[6]])
    return TrajectoryEstimate(np.array(ts), np.array(ps), np.array(qs))


def write_pointcloud(points, intensities, path):
    """ASCII PLY with per-vertex x, y, z, intensity."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    intensities = np.asarray(intensities, dtype=float).reshape(-1)
    if len(points) != len(intensities):
        raise ValueError("point/intensity count mismatch")
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property float intensity\nend_header\n")
        for p, i in zip(points, intensities):
            fh.write("%.7g %.7g %.7g %.7g\n" % (p[0], p[1], p[2], i))


def read_pointcloud(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]
    if not lines or lines[0] != "ply":
        raise DatasetError(f"{path}: not a PLY file")
    try:
        end = lines.index("end_header")
    except ValueError:
        raise DatasetError(f"{path}: missing end_header") from None
    count = 0
    for ln in lines[:end]:
        if ln.startswith("element vertex"):
            count = int(ln.split()[-1])
    body = [ln for ln in lines[end + 1:] if ln]
    if len(body) != count:
        raise DatasetError(f"{path}: header promises {count} vertices, "
                           f"found {len(body)}")
    if count == 0:
        return np.zeros((0, 3)), np.zeros(0)
    data = np.array([[float(x) for x in ln.split()] for ln in body])
    return data[:, 0:3], data[:, 3]


def associate(times_a, times_b, max_dt=0.01):
    """Nearest-neighbor index pairs (i, j) with |ta[i] - tb[j]| <= max_dt;
    each b index is used at most once."""
    pairs = []
    used = set()
    for i, ta in enumerate(times_a):
        j = int(np.searchsorted(times_b, ta))
        best, best_dt = None, max_dt
        for jj in (j - 1, j):
            if 0 <= jj < len(times_b) and jj not in used:
                dt = abs(times_b[jj] - ta)
                if dt <= best_dt:
                    best, best_dt = jj, dt
        if best is not None:
            used.add(best)
            pairs.append((i, best))
    return pairs


@dataclass(frozen=True)
class AlignmentTransform:
    scale: float
    R: np.ndarray
    t: np.ndarray

    def apply(self, points):
        return self.scale * points @ self.R.T + self.t


def _umeyama(src, dst, with_scale):
    """Closed-form least-squares similarity/rigid transform src -> dst."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    C = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = (xs ** 2).sum() / len(src)
        s = float(np.trace(np.diag(D) @ S) / var_s)
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return AlignmentTransform(s, R, t)


def align_trajectories(est, gt, with_scale=False, max_dt=0.01):
    """Align est onto gt with the closed-form least-squares rigid (optionally
    similarity) transform over temporally associated pose pairs.

    Returns (aligned estimate, transform, association pairs).
    """
    pairs = associate(est.timestamps, gt.timestamps, max_dt)
    if len(pairs) < 3:
        raise ValueError(f"only {len(pairs)} associated pose pairs, need >= 3")
    ei = np.array([i for i, _ in pairs])
    gi = np.array([j for _, j in pairs])
    tf = _umeyama(est.positions[ei], gt.positions[gi], with_scale)
    new_q = np.array([
        rotation_to_quat(tf.R @ quat_to_rotation(q)) for q in est.quaternions
    ])
    aligned = TrajectoryEstimate(est.timestamps, tf.apply(est.positions), new_q)
    return aligned, tf, pairs


def compute_ate(est, gt, max_dt=0.01):
    """Absolute trajectory error of an (already aligned) estimate: RMSE of
    translational residuals over associated pairs. Returns (rmse, errors)."""
    pairs = associate(est.timestamps, gt.timestamps, max_dt)
    if not pairs:
        raise ValueError("no associated pose pairs")
    errs = np.array([
        np.linalg.norm(est.positions[i] - gt.positions[j]) for i, j in pairs
    ])
    return float(np.sqrt(np.mean(errs ** 2))), errs


# --- configuration -----------------------------------------------------------

def read_config(path):
    """Flat `key = value` text config. Values stay strings; lists are
    whitespace-separated."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DatasetError(f"{path}:{lineno}: expected key = value")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def write_config(values, path):
    with open(path, "w") as fh:
        for k in sorted(values):
            fh.write(f"{k} = {values[k]}\n")


def _floats(s):
    return np.array([float(x) for x in s.split()])


@dataclass(frozen=True)
class CalibrationConfig:
    """Camera intrinsics, camera-IMU extrinsic, and noise densities."""
    intrinsics: CameraIntrinsics
    R_imu_cam: np.ndarray          # x_imu = R_imu_cam x_cam + t_imu_cam
    t_imu_cam: np.ndarray
    noise: NoiseParams = field(default_factory=NoiseParams)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not is_rotation(self.R_imu_cam):
            raise ValueError("camera-IMU extrinsic rotation is not a rotation")


def calibration_from_config(values):
    """Build a CalibrationConfig from a flat key-value dict (see read_config).

    Required keys: camera.fx/fy/cx/cy/width/height. Optional: extrinsic.R
    (9 values, row-major), extrinsic.t (3), noise.* densities, gravity.
    Unrecognized keys land in extras for the pipeline's thresholds.
    """
    try:
        intr = CameraIntrinsics(
            fx=float(values["camera.fx"]), fy=float(values["camera.fy"]),
            cx=float(values["camera.cx"]), cy=float(values["camera.cy"]),
            width=int(values["camera.width"]), height=int(values["camera.height"]),
        )
    except KeyError as e:
        raise DatasetError(f"config missing required key {e.args[0]!r}") from None
    R = (_floats(values["extrinsic.R"]).reshape(3, 3)
         if "extrinsic.R" in values else np.eye(3))
    t = _floats(values.get("extrinsic.t", "0 0 0"))
    defaults = NoiseParams()
    noise = NoiseParams(
        sigma_a=float(values.get("noise.sigma_a", defaults.sigma_a)),
        sigma_g=float(values.get("noise.sigma_g", defaults.sigma_g)),
        walk_a=float(values.get("noise.walk_a", defaults.walk_a)),
        walk_g=float(values.get("noise.walk_g", defaults.walk_g)),
        gravity=tuple(_floats(values.get("gravity", "0 0 -9.80665"))),
    )
    known = {"camera.fx", "camera.fy", "camera.cx", "camera.cy",
             "camera.width", "camera.height", "extrinsic.R", "extrinsic.t",
             "noise.sigma_a", "noise.sigma_g", "noise.walk_a", "noise.walk_g",
             "gravity"}
    extras = {k: v for k, v in values.items() if k not in known}
    return CalibrationConfig(intr, R, t, noise, extras)


def load_calibration(path):
    return calibration_from_config(read_config(path))


def convert_euroc_yaml(cam_yaml, imu_yaml=None):
    """One-shot converter from EuRoC sensor.yaml files (OpenCV-flavored YAML)
    to the flat key-value config dict."""
    def load(path):
        with open(path) as fh:
            text = fh.read()
        text = text.replace("%YAML:1.0", "").replace("!!opencv-matrix", "")
        return yaml.safe_load(text)

    cam = load(cam_yaml)
    fu, fv, cu, cv = cam["intrinsics"]
    w, h = cam["resolution"]
    T = np.array(cam["T_BS"]["data"], dtype=float).reshape(4, 4)
    out = {
        "camera.fx": repr(float(fu)), "camera.fy": repr(float(fv)),
        "camera.cx": repr(float(cu)), "camera.cy": repr(float(cv)),
        "camera.width": str(int(w)), "camera.height": str(int(h)),
        "extrinsic.R": " ".join("%.17g" % v for v in T[0:3, 0:3].ravel()),
        "extrinsic.t": " ".join("%.17g" % v for v in T[0:3, 3]),
    }
    if imu_yaml is not None:
        imu = load(imu_yaml)
        out["noise.sigma_g"] = repr(float(imu["gyroscope_noise_density"]))
        out["noise.walk_g"] = repr(float(imu["gyroscope_random_walk"]))
        out["noise.sigma_a"] = repr(float(imu["accelerometer_noise_density"]))
        out["noise.walk_a"] = repr(float(imu["accelerometer_random_walk"]))
    return out
