"""Ground-truth generators for tests: analytic trajectories, IMU streams,
and rendered views of a textured plane with exact per-pixel depth.

The IMU measurement model mirrors the estimator's convention
(measured = true - bias): a resting accelerometer with zero bias reads
-R^T gravity.
"""

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.ndimage import gaussian_filter

from .camera import CameraIntrinsics, PyramidImage
from .imu import Bias, ImuSample, NoiseParams
from .so3 import exp_so3


@dataclass(frozen=True)
class AnalyticTrajectory:
    """Closed-form rigid trajectory; all derivatives analytic."""
    position: Callable
    velocity: Callable
    acceleration: Callable
    rotation: Callable       # body-to-world R(t)
    omega_body: Callable     # body-frame angular velocity


def circle_trajectory(radius=1.0, period=5.0, center=(0.0, 0.0, 0.0),
                      z_amp=0.1, rot_axis=(0.0, 0.0, 1.0), rot_amp=0.15,
                      rot_period=3.0, R0=None):
    """Horizontal circle with a vertical bob and fixed-axis attitude wobble."""
    w = 2.0 * math.pi / period
    wz = 2.0 * w
    wr = 2.0 * math.pi / rot_period
    c = np.asarray(center, dtype=float)
    u = np.asarray(rot_axis, dtype=float)
    u = u / np.linalg.norm(u)
    R0 = np.eye(3) if R0 is None else np.asarray(R0, dtype=float)

    def pos(t):
        return c + np.array([radius * math.cos(w * t), radius * math.sin(w * t),
                             z_amp * math.sin(wz * t)])

    def vel(t):
        return np.array([-radius * w * math.sin(w * t), radius * w * math.cos(w * t),
                         z_amp * wz * math.cos(wz * t)])

    def acc(t):
        return np.array([-radius * w * w * math.cos(w * t),
                         -radius * w * w * math.sin(w * t),
                         -z_amp * wz * wz * math.sin(wz * t)])

    def rot(t):
        return R0 @ exp_so3(u * (rot_amp * math.sin(wr * t)))

    def omega(t):
        return u * (rot_amp * wr * math.cos(wr * t))

    return AnalyticTrajectory(pos, vel, acc, rot, omega)


def sine_trajectory(amp=(0.4, 0.3, 0.15), period=(3.0, 4.0, 5.0),
                    origin=(0.0, 0.0, 0.0), rot_axis=(0.0, 0.0, 1.0),
                    rot_amp=0.2, rot_period=2.5, R0=None):
    """Independent sinusoids on each translation axis, fixed-axis rotation."""
    a = np.asarray(amp, dtype=float)
    w = 2.0 * math.pi / np.asarray(period, dtype=float)
    o = np.asarray(origin, dtype=float)
    u = np.asarray(rot_axis, dtype=float)
    u = u / np.linalg.norm(u)
    wr = 2.0 * math.pi / rot_period
    R0 = np.eye(3) if R0 is None else np.asarray(R0, dtype=float)

    def pos(t):
        return o + a * np.sin(w * t)

    def vel(t):
        return a * w * np.cos(w * t)

    def acc(t):
        return -a * w * w * np.sin(w * t)

    def rot(t):
        return R0 @ exp_so3(u * (rot_amp * math.sin(wr * t)))

    def omega(t):
        return u * (rot_amp * wr * math.cos(wr * t))

    return AnalyticTrajectory(pos, vel, acc, rot, omega)


def imu_truth(traj, t, noise):
    """Noise-free, bias-free specific force and angular rate at time t."""
    R = traj.rotation(t)
    f = R.T @ (traj.acceleration(t) - noise.gravity)
    return f, traj.omega_body(t)


def sample_imu(traj, t0, t1, rate, noise, bias=None, seed=None):
    """IMU samples on [t0, t1] at `rate` Hz (both endpoints included).

    With a seed, white noise with standard deviation sigma/sqrt(dt) is added;
    seed=None gives exact measurements. The bias is constant and subtracted
    (measured = true - bias).
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    bias = bias or Bias()
    dt = 1.0 / rate
    n = int(round((t1 - t0) * rate))
    ts = t0 + np.arange(n + 1) * dt
    rng = np.random.default_rng(seed) if seed is not None else None
    samples = []
    for t in ts:
        f, w = imu_truth(traj, t, noise)
        a_meas = f - bias.ba
        w_meas = w - bias.bg
        if rng is not None:
            a_meas = a_meas + rng.normal(0.0, noise.sigma_a / math.sqrt(dt), 3)
            w_meas = w_meas + rng.normal(0.0, noise.sigma_g / math.sqrt(dt), 3)
        samples.append(ImuSample(float(t), w_meas, a_meas))
    return samples


@dataclass(frozen=True)
class SyntheticScene:
    """Textured plane with analytic depth. The texture repeats periodically,
    so the plane is effectively unbounded."""
    origin: np.ndarray            # a point on the plane
    normal: np.ndarray            # unit normal, pointing toward the cameras
    e1: np.ndarray                # in-plane texture axes (unit, orthogonal)
    e2: np.ndarray
    texture: np.ndarray           # periodic intensity grid, 0..255
    texel_size: float             # meters per texel

    def point_depth(self, cam_center, ray_world):
        """Ray-plane intersection distances (z-depth for unit-z rays)."""
        denom = ray_world @ self.normal
        return ((self.origin - cam_center) @ self.normal) / denom


def make_scene(distance=3.0, seed=7, texture_size=1024, texel_size=0.01):
    """Plane z = distance facing the origin, with a smooth random texture."""
    rng = np.random.default_rng(seed)
    coarse = gaussian_filter(rng.normal(size=(texture_size, texture_size)), 18, mode="wrap")
    fine = gaussian_filter(rng.normal(size=(texture_size, texture_size)), 4, mode="wrap")
    tex = 2.2 * coarse / coarse.std() + 1.1 * fine / fine.std()
    tex = 128.0 + 45.0 * np.tanh(tex * 0.6) * 2.0
    tex = np.clip(tex, 3.0, 252.0)
    return SyntheticScene(
        origin=np.array([0.0, 0.0, distance]),
        normal=np.array([0.0, 0.0, -1.0]),
        e1=np.array([1.0, 0.0, 0.0]),
        e2=np.array([0.0, 1.0, 0.0]),
        texture=np.ascontiguousarray(tex),
        texel_size=texel_size,
    )


def _wrap_bilinear(tex, s, t):
    """Bilinear sample of a periodic grid at continuous texel coordinates."""
    h, w = tex.shape
    s0 = np.floor(s).astype(np.intp)
    t0 = np.floor(t).astype(np.intp)
    a = s - s0
    b = t - t0
    s0 %= w
    t0 %= h
    s1 = (s0 + 1) % w
    t1 = (t0 + 1) % h
    return ((1 - a) * (1 - b) * tex[t0, s0] + a * (1 - b) * tex[t0, s1]
            + (1 - a) * b * tex[t1, s0] + a * b * tex[t1, s1])


def render_view(scene, R_wc, p_wc, intr, levels=4):
    """Render the plane from camera pose (R_wc, p_wc).

    Returns (PyramidImage, inverse-depth map) where the inverse depth is the
    exact analytic 1/z of every pixel. Raises for degenerate (edge-on) poses.
    """
    R_wc = np.asarray(R_wc, dtype=float)
    p_wc = np.asarray(p_wc, dtype=float)
    us, vs = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    dirs_cam = np.stack([
        (us - intr.cx) / intr.fx,
        (vs - intr.cy) / intr.fy,
        np.ones_like(us, dtype=float),
    ], axis=-1)
    dirs_world = dirs_cam @ R_wc.T
    denom = dirs_world @ scene.normal
    if np.mean(denom < -1e-6) < 0.8:
        raise ValueError("plane is edge-on or behind the camera for most pixels")
    depth = ((scene.origin - p_wc) @ scene.normal) / denom
    if np.any(depth <= 0):
        raise ValueError("plane intersections behind the camera")
    pts = p_wc + depth[..., None] * dirs_world
    rel = pts - scene.origin
    s = (rel @ scene.e1) / scene.texel_size
    t = (rel @ scene.e2) / scene.texel_size
    img = _wrap_bilinear(scene.texture, s, t)
    return PyramidImage(img, levels=levels), 1.0 / depth


def export_euroc(out_dir, traj=None, duration=10.0, imu_rate=200.0,
                 cam_rate=10.0, noise=None, bias=None, seed=0,
                 scene=None, intr=None):
    """Write a synthetic sequence in the EuRoC ASL layout.

    The body frame coincides with the camera frame (identity extrinsic); the
    camera looks down the world z-axis at the textured plane. Produces
    mav0/cam0 images + csv, mav0/imu0/data.csv (noisy when seeded),
    ground-truth states, and a flat config file, all deterministic per seed.
    """
    import os

    from PIL import Image

    from .so3 import rotation_to_quat

    noise = noise or NoiseParams()
    bias = bias or Bias()
    traj = traj or circle_trajectory()
    scene = scene or make_scene(distance=2.5, seed=911)
    intr = intr or CameraIntrinsics(fx=250.0, fy=250.0, cx=159.5, cy=119.5,
                                    width=320, height=240)

    cam_dir = os.path.join(out_dir, "mav0", "cam0")
    imu_dir = os.path.join(out_dir, "mav0", "imu0")
    gt_dir = os.path.join(out_dir, "mav0", "state_groundtruth_estimate0")
    for d in (os.path.join(cam_dir, "data"), imu_dir, gt_dir):
        os.makedirs(d, exist_ok=True)

    n_frames = int(round(duration * cam_rate)) + 1
    cam_times = np.arange(n_frames) / cam_rate

    with open(os.path.join(cam_dir, "data.csv"), "w") as fh:
        fh.write("#timestamp [ns],filename\n")
        for t in cam_times:
            ts_ns = int(round(t * 1e9))
            name = f"{ts_ns}.png"
            pyr, _ = render_view(scene, traj.rotation(t), traj.position(t),
                                 intr, levels=1)
            img = np.clip(np.round(pyr.intensity[0]), 0, 255).astype(np.uint8)
            Image.fromarray(img).save(os.path.join(cam_dir, "data", name))
            fh.write(f"{ts_ns},{name}\n")

    samples = sample_imu(traj, 0.0, duration, imu_rate, noise, bias=bias,
                         seed=seed)
    with open(os.path.join(imu_dir, "data.csv"), "w") as fh:
        fh.write("#timestamp [ns],w_x,w_y,w_z,a_x,a_y,a_z\n")
        for s in samples:
            ts_ns = int(round(s.timestamp * 1e9))
            vals = list(s.gyro) + list(s.accel)
            fh.write(f"{ts_ns}," + ",".join("%.17g" % v for v in vals) + "\n")

    with open(os.path.join(gt_dir, "data.csv"), "w") as fh:
        fh.write("#timestamp,px,py,pz,qw,qx,qy,qz,vx,vy,vz,"
                 "bwx,bwy,bwz,bax,bay,baz\n")
        for t in cam_times:
            ts_ns = int(round(t * 1e9))
            p = traj.position(t)
            q = rotation_to_quat(traj.rotation(t))
            v = traj.velocity(t)
            vals = (list(p) + list(q) + list(v) + list(bias.bg) + list(bias.ba))
            fh.write(f"{ts_ns}," + ",".join("%.17g" % x for x in vals) + "\n")

    config = {
        "camera.fx": "%.17g" % intr.fx, "camera.fy": "%.17g" % intr.fy,
        "camera.cx": "%.17g" % intr.cx, "camera.cy": "%.17g" % intr.cy,
        "camera.width": str(intr.width), "camera.height": str(intr.height),
        "noise.sigma_a": "%.17g" % noise.sigma_a,
        "noise.sigma_g": "%.17g" % noise.sigma_g,
        "noise.walk_a": "%.17g" % noise.walk_a,
        "noise.walk_g": "%.17g" % noise.walk_g,
        "gravity": " ".join("%.17g" % g for g in noise.gravity),
    }
    from .dataset import TrajectoryEstimate, write_config, write_trajectory
    write_config(config, os.path.join(out_dir, "config.txt"))
    gt = TrajectoryEstimate(
        cam_times,
        np.array([traj.position(t) for t in cam_times]),
        np.array([rotation_to_quat(traj.rotation(t)) for t in cam_times]),
    )
    write_trajectory(gt, os.path.join(out_dir, "groundtruth.tum"))
    return out_dir
