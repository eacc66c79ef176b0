"""End-to-end odometry pipeline: a loading front-end and a processing
back-end joined by a bounded frame buffer.

Per frame: pre-integrate the IMU batch, track against the reference keyframe
with the IMU-predicted pose as prior, update the keyframe depth filter, decide
keyframe promotion, then run the windowed solve and two-way marginalization.
States in the window are IMU-body states; the camera-IMU extrinsic maps
tracking measurements into the body frame.
"""

import queue
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .camera import PyramidImage, ray
from .dataset import TrajectoryEstimate, imu_batch_between
from .fusion import (
    GaussNewtonConfig,
    ImuFactor,
    MarginalizationSide,
    SolveStatus,
    TwoWayPolicy,
    VisualFactor,
    WindowFrame,
    WindowState,
    anchor_prior,
    compose_imu_factors,
    gauss_newton_solve,
    marginalize,
    two_way_decision,
)
from .imu import Bias, State, integrate, predict_state
from .kernels import bilinear
from .mapping import (
    EpipolarSearchConfig,
    KeyframePolicy,
    epipolar_search,
    make_keyframe,
    propagate_to_new_keyframe,
    select_candidates,
    should_create_keyframe,
    update_depth_filter,
)
from .so3 import exp_so3, hat, quat_to_rotation, rotation_to_quat
from .tracking import (
    RelativePoseMeasurement,
    TrackingConfig,
    TrackingStatus,
    track_frame,
)


@dataclass(frozen=True)
class FramePacket:
    """Immutable front-end output: one image with its IMU interval."""
    frame_id: int
    timestamp: float
    pyramid: object
    imu_batch: tuple


class FrameBuffer:
    """Bounded FIFO between the loading and processing stages; the producer
    blocks when the buffer is full (back-pressure, no frame drops)."""

    _DONE = object()

    def __init__(self, capacity=8):
        if capacity < 1:
            raise ValueError("buffer capacity must be at least 1")
        self._q = queue.Queue(maxsize=capacity)

    def put(self, packet):
        self._q.put(packet)

    def close(self):
        self._q.put(self._DONE)

    def __iter__(self):
        while True:
            item = self._q.get()
            if item is self._DONE:
                return
            yield item


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    timestamp: float
    tracking: str
    solve_status: str
    solve_iterations: int
    is_keyframe: bool
    marginalized: str      # "", "front", "back"
    elapsed_s: float


@dataclass
class PipelineReport:
    records: list = field(default_factory=list)
    aborted: bool = False
    abort_reason: str = ""
    trajectory: object = None
    points: np.ndarray = None
    intensities: np.ndarray = None


@dataclass(frozen=True)
class PipelineOptions:
    max_frames: int = None
    deterministic: bool = False
    seed: int = 0
    buffer_capacity: int = 8
    point_budget: int = 800
    bootstrap_frames: int = 2
    recovery_hold_s: float = 0.5
    window_capacity: int = 3
    track_rel_sigma: float = 0.45
    kf_distance: float = 0.8
    kf_min_overlap: float = 0.6
    propagation_sigma: float = 0.03


def _options_from_extras(extras, base):
    def get(key, cast, default):
        return cast(extras[key]) if key in extras else default

    return replace(
        base,
        point_budget=get("pipeline.point_budget", int, base.point_budget),
        bootstrap_frames=get("pipeline.bootstrap_frames", int,
                             base.bootstrap_frames),
        recovery_hold_s=get("pipeline.recovery_hold_s", float,
                            base.recovery_hold_s),
        track_rel_sigma=get("pipeline.track_rel_sigma", float,
                            base.track_rel_sigma),
        kf_distance=get("pipeline.kf_distance", float, base.kf_distance),
        kf_min_overlap=get("pipeline.kf_min_overlap", float,
                           base.kf_min_overlap),
        propagation_sigma=get("pipeline.propagation_sigma", float,
                              base.propagation_sigma),
    )


def load_image(path):
    img = Image.open(path).convert("L")
    return np.asarray(img, dtype=float)


def frame_packets(index, max_frames=None, levels=4):
    """Generate FramePackets from a dataset index (the front-end stage)."""
    n = len(index.image_paths)
    if max_frames is not None:
        n = min(n, max_frames)
    for k in range(n):
        t = index.image_timestamps[k]
        pyr = PyramidImage(load_image(index.image_paths[k]), levels=levels)
        if k == 0:
            batch = ()
        else:
            batch = tuple(imu_batch_between(index.imu,
                                            index.image_timestamps[k - 1], t))
        yield FramePacket(k, t, pyr, batch)


def _camera_pose(state, calib):
    R_wc = state.R @ calib.R_imu_cam
    p_wc = state.p + state.R @ calib.t_imu_cam
    return R_wc, p_wc


def _camera_relative(state_ref, state_cur, calib):
    """(R_cr, t_cr) between the camera frames of two body states."""
    R_r, p_r = _camera_pose(state_ref, calib)
    R_c, p_c = _camera_pose(state_cur, calib)
    return R_c.T @ R_r, R_c.T @ (p_r - p_c)


def _measurement_to_body(meas, calib):
    """Re-express a camera-frame relative-pose measurement between the
    corresponding body frames (covariance rotated, lever arm kept in the
    mean)."""
    R_bc = calib.R_imu_cam
    t_bc = calib.t_imu_cam
    R_cr_c, t_cr_c = meas.transform_cr()
    R_cr_b = R_bc @ R_cr_c @ R_bc.T
    t_cr_b = R_bc @ t_cr_c + t_bc - R_cr_b @ t_bc
    A = np.zeros((6, 6))
    A[0:3, 0:3] = R_bc
    A[3:6, 3:6] = R_bc
    cov = A @ meas.cov @ A.T
    cov = 0.5 * (cov + cov.T) + 1e-12 * np.eye(6)
    return RelativePoseMeasurement.from_transform(
        R_cr_b, t_cr_b, cov, rmse=meas.rmse,
        inlier_fraction=meas.inlier_fraction)


def _gravity_aligned_rotation(accel_mean, gravity):
    """Rotation making the mean resting accelerometer reading consistent with
    gravity: R @ normalize(accel) = -normalize(gravity)."""
    a = accel_mean / np.linalg.norm(accel_mean)
    g = -np.asarray(gravity) / np.linalg.norm(gravity)
    c = float(np.dot(a, g))
    axis = np.cross(a, g)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        return np.eye(3) if c > 0 else exp_so3(np.array([np.pi, 0.0, 0.0]))
    angle = np.arctan2(s, c)
    return exp_so3(axis / s * angle)


def _initial_state(index, t0):
    """Ground-truth pose/velocity at the first image when available,
    else a gravity-aligned identity at the origin."""
    gt = index.groundtruth
    if gt is not None and len(gt):
        i = int(np.argmin(np.abs(gt.timestamps - t0)))
        if abs(gt.timestamps[i] - t0) < 0.05:
            v = (index.gt_velocities[i]
                 if index.gt_velocities is not None else np.zeros(3))
            return State(gt.positions[i].copy(), np.asarray(v, dtype=float),
                         quat_to_rotation(gt.quaternions[i]), Bias())
    return None


class _Backend:
    """Processing stage; consumes FramePackets in order."""

    def __init__(self, calib, options):
        self.calib = calib
        self.opts = options
        self.intr = calib.intrinsics
        self.noise = calib.noise
        self.track_cfg = TrackingConfig()
        self.epi_cfg = EpipolarSearchConfig(
            point_budget=options.point_budget,
            propagation_sigma=options.propagation_sigma)
        self.kf_policy = KeyframePolicy(
            min_overlap=options.kf_min_overlap,
            distance_threshold=options.kf_distance)
        self.gn_cfg = GaussNewtonConfig()
        self.two_way = TwoWayPolicy()
        self.rng = np.random.default_rng(options.seed)

        self.window = None
        self.factors = []
        self.prior = None
        self.kf = None
        self.kf_frame_id = None
        self.report = PipelineReport()
        self.poses = {}            # frame_id -> (timestamp, State)
        self.cloud_pts = []
        self.cloud_int = []
        self.fail_time = 0.0
        self.index = None          # set by run() for initialization

    # -- helpers ------------------------------------------------------------

    def _kf_state(self):
        return self.window.get(self.kf_frame_id).state

    def _record_poses(self):
        for f in self.window.frames:
            self.poses[f.frame_id] = (f.timestamp, f.state)

    def _harvest_keyframe(self, kf, state):
        R_wc, p_wc = _camera_pose(state, self.calib)
        img = kf.pyramid.intensity[0]
        for pt in kf.active_points():
            X = R_wc @ (ray(pt.pixel, self.intr) / pt.inv_depth) + p_wc
            self.cloud_pts.append(X)
            self.cloud_int.append(
                float(bilinear(img, np.array([pt.pixel[0]]),
                               np.array([pt.pixel[1]]))[0]))

    def _overlap_and_depth(self, R_cr, t_cr):
        pixels, invd = self.kf.tracking_arrays()
        if len(pixels) == 0:
            return 0.0, self.two_way.mean_scene_depth
        rays = np.stack([
            (pixels[:, 0] - self.intr.cx) / self.intr.fx,
            (pixels[:, 1] - self.intr.cy) / self.intr.fy,
            np.ones(len(pixels)),
        ], axis=1) / invd[:, None]
        Xc = rays @ R_cr.T + t_cr
        z = Xc[:, 2]
        ok = z > 1e-6
        u = self.intr.fx * Xc[ok, 0] / z[ok] + self.intr.cx
        v = self.intr.fy * Xc[ok, 1] / z[ok] + self.intr.cy
        inside = ((u >= 0) & (u <= self.intr.width - 1)
                  & (v >= 0) & (v <= self.intr.height - 1))
        overlap = float(np.count_nonzero(inside)) / len(pixels)
        return overlap, float(np.mean(1.0 / invd))

    def _update_depth(self, cur_pyramid, cur_state):
        R_cr, t_cr = _camera_relative(self._kf_state(), cur_state, self.calib)
        new_points = []
        for p in self.kf.points:
            if p.status.value in ("outlier", "marginalized"):
                new_points.append(p)
                continue
            res = epipolar_search(p, self.kf, cur_pyramid, R_cr, t_cr,
                                  self.intr, self.epi_cfg)
            new_points.append(update_depth_filter(p, res, self.epi_cfg))
        self.kf.points = new_points

    def _reseed_depth(self):
        """Recovery: refresh the keyframe's candidate set from scratch while
        keeping already-converged active points."""
        active = self.kf.active_points()
        fresh = select_candidates(self.kf, self.opts.point_budget,
                                  self.epi_cfg)
        self.kf.points = (active + fresh)[: self.epi_cfg.point_budget]

    def _marginalize(self, side, victim_id):
        if side == MarginalizationSide.FRONT:
            into = [f for f in self.factors
                    if isinstance(f, ImuFactor) and f.id_k1 == victim_id]
            outof = [f for f in self.factors
                     if isinstance(f, ImuFactor) and f.id_k == victim_id]
            if len(into) == 1 and len(outof) == 1:
                self.factors = [f for f in self.factors
                                if f not in (into[0], outof[0])]
                self.factors.append(
                    compose_imu_factors(into[0], outof[0], self.noise))
        self.window, self.factors, self.prior = marginalize(
            self.window, self.factors, self.prior, victim_id)

    # -- per-frame processing ----------------------------------------------

    def _bootstrap(self, packet):
        state = _initial_state(self.index, packet.timestamp)
        if state is None:
            accel = np.mean([s.accel for s in self.index.imu[:40]], axis=0)
            state = State(np.zeros(3), np.zeros(3),
                          _gravity_aligned_rotation(accel, self.noise.gravity),
                          Bias())
        frame = WindowFrame(packet.frame_id, packet.timestamp, state,
                            is_keyframe=True)
        self.window = WindowState([frame], capacity=self.opts.window_capacity)
        self.prior = anchor_prior(frame)
        self.kf = make_keyframe(packet.pyramid, state, packet.frame_id,
                                packet.timestamp, self.opts.point_budget,
                                self.epi_cfg, bootstrap_rng=self.rng)
        self.kf_frame_id = packet.frame_id
        self._record_poses()
        return FrameRecord(packet.frame_id, packet.timestamp, "bootstrap",
                           "none", 0, True, "", 0.0)

    def process(self, packet):
        t_start = time.perf_counter()
        if self.window is None:
            return self._bootstrap(packet)

        last = self.window.frames[-1]
        preint = integrate(list(packet.imu_batch), last.state.bias,
                           last.state.R, self.noise)
        pred = predict_state(preint, last.state)

        bootstrapping = packet.frame_id <= self.opts.bootstrap_frames
        meas = None
        status_str = "imu-only"
        if not bootstrapping:
            pixels, invd = self.kf.tracking_arrays(
                max_rel_sigma=self.opts.track_rel_sigma)
            if len(pixels) >= self.track_cfg.min_points:
                prior_R, prior_t = _camera_relative(self._kf_state(), pred,
                                                    self.calib)
                cam_meas, status = track_frame(
                    self.kf.pyramid, pixels, invd, packet.pyramid,
                    prior_R, prior_t, self.intr, self.track_cfg)
                status_str = status.value
                if status == TrackingStatus.CONVERGED:
                    meas = _measurement_to_body(cam_meas, self.calib)
                    self.fail_time = 0.0
                else:
                    self.fail_time += packet.timestamp - last.timestamp
                    self._reseed_depth()
            else:
                status_str = "too-few-points"
                self.fail_time += packet.timestamp - last.timestamp
                self._reseed_depth()
            if meas is None and self.fail_time > self.opts.recovery_hold_s:
                self.report.aborted = True
                self.report.abort_reason = (
                    f"tracking failure persisted {self.fail_time:.2f} s "
                    f"at frame {packet.frame_id}")
                return None

        frame = WindowFrame(packet.frame_id, packet.timestamp, pred)
        self.window = self.window.add(frame)
        self.factors.append(ImuFactor(last.frame_id, packet.frame_id, preint))
        if meas is not None:
            self.factors.append(
                VisualFactor(self.kf_frame_id, packet.frame_id, meas))

        self.window, solve_rep = gauss_newton_solve(
            self.window, self.factors, self.prior, self.gn_cfg)
        self._record_poses()

        cur_state = self.window.get(packet.frame_id).state
        self._update_depth(packet.pyramid, cur_state)

        new_kf = False
        if not bootstrapping and meas is not None:
            R_cr, t_cr = _camera_relative(self._kf_state(), cur_state,
                                          self.calib)
            overlap, mean_depth = self._overlap_and_depth(R_cr, t_cr)
            cam_rel = RelativePoseMeasurement.from_transform(R_cr, t_cr)
            if should_create_keyframe(cam_rel, overlap, mean_depth,
                                      self.kf_policy):
                old_kf, old_state = self.kf, self._kf_state()
                self.kf = propagate_to_new_keyframe(
                    old_kf, packet.pyramid, R_cr, t_cr, packet.frame_id,
                    packet.timestamp, cur_state, self.intr, self.epi_cfg,
                    refill_target=self.opts.point_budget)
                self._harvest_keyframe(old_kf, old_state)
                i = self.window.index(packet.frame_id)
                self.window.frames[i] = replace(self.window.frames[i],
                                                is_keyframe=True)
                self.kf_frame_id = packet.frame_id
                new_kf = True

        marg = ""
        if len(self.window.frames) > self.opts.window_capacity:
            if new_kf:
                side = MarginalizationSide.BACK
                victim = self.window.keyframes()[0].frame_id
            else:
                side, victim = two_way_decision(
                    self.window,
                    meas if meas is not None
                    else RelativePoseMeasurement.identity(),
                    TrackingStatus.CONVERGED if meas is not None
                    else TrackingStatus.DIVERGED,
                    self.two_way)
                only_kf = (len(self.window.keyframes()) == 1
                           and self.window.get(victim).is_keyframe)
                if only_kf:
                    side = MarginalizationSide.FRONT
                    regs = [f for f in self.window.frames if not f.is_keyframe]
                    victim = regs[-2].frame_id
            self._marginalize(side, victim)
            marg = side.value
            self._record_poses()

        return FrameRecord(packet.frame_id, packet.timestamp, status_str,
                           solve_rep.status.value, solve_rep.iterations,
                           new_kf, marg, time.perf_counter() - t_start)

    def finish(self):
        if self.kf is not None:
            self._harvest_keyframe(self.kf, self._kf_state())
        ids = sorted(self.poses)
        ts = np.array([self.poses[i][0] for i in ids])
        ps = np.array([self.poses[i][1].p for i in ids]).reshape(-1, 3)
        qs = np.array([rotation_to_quat(self.poses[i][1].R)
                       for i in ids]).reshape(-1, 4)
        if len(ids):
            self.report.trajectory = TrajectoryEstimate(ts, ps, qs)
        self.report.points = (np.array(self.cloud_pts).reshape(-1, 3))
        self.report.intensities = np.array(self.cloud_int)
        return self.report


def run_pipeline(index, calib, options=None):
    """Run odometry over a loaded dataset index. Returns a PipelineReport
    with the trajectory, the semi-dense point cloud, and per-frame records."""
    options = options or PipelineOptions()
    options = _options_from_extras(calib.extras, options)
    backend = _Backend(calib, options)
    backend.index = index

    if options.deterministic:
        source = frame_packets(index, options.max_frames)
    else:
        buf = FrameBuffer(options.buffer_capacity)

        def produce():
            try:
                for pkt in frame_packets(index, options.max_frames):
                    buf.put(pkt)
            finally:
                buf.close()

        thread = threading.Thread(target=produce, daemon=True)
        thread.start()
        source = iter(buf)

    for packet in source:
        rec = backend.process(packet)
        if rec is None:
            break
        backend.report.records.append(rec)
    if not options.deterministic:
        for _ in source:   # drain so the producer can exit
            pass
        thread.join()
    return backend.finish()
