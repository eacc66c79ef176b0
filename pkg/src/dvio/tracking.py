"""Direct image alignment against a keyframe depth map, and the fusion-side
relative-pose residual.

Pose conventions:
  * the alignment estimates T_cr (reference -> current): x_cur = R_cr x_ref + t_cr
  * the exported measurement stores R_ref_c = R_cr^T and
    p_ref_c = R_cr^T t_cr, chosen so that the fusion residual

        r_pos = R_ref^T (p_ref - p_c) - p_ref_c
        r_rot = log(R_ref_c^T R_ref^T R_c)

    vanishes at consistent states.
"""

import enum
from dataclasses import dataclass

import numpy as np

from . import kernels
from .so3 import exp_so3, hat, log_so3, right_jacobian_inv


class TrackingStatus(enum.Enum):
    CONVERGED = "converged"
    DIVERGED = "diverged"
    INSUFFICIENT_OVERLAP = "insufficient-overlap"


@dataclass(frozen=True)
class TrackingConfig:
    levels: int = 4
    huber_k: float = 9.0           # intensity units
    max_iterations: int = 20
    step_tol: float = 1e-6
    min_points: int = 200
    min_overlap_fraction: float = 0.10
    failure_rmse: float = 40.0     # intensity units
    damping: float = 1e-6
    max_step_halvings: int = 5


@dataclass(frozen=True)
class RelativePoseMeasurement:
    """Dense-tracking result with covariance, in residual-space convention."""
    p_ref_c: np.ndarray
    R_ref_c: np.ndarray
    cov: np.ndarray
    rmse: float = 0.0
    inlier_fraction: float = 1.0

    @staticmethod
    def identity(cov_scale=1e-6):
        return RelativePoseMeasurement(np.zeros(3), np.eye(3), np.eye(6) * cov_scale)

    @staticmethod
    def from_transform(R_cr, t_cr, cov=None, rmse=0.0, inlier_fraction=1.0):
        """Build from the reference->current transform estimated by tracking."""
        R_cr = np.asarray(R_cr, dtype=float)
        t_cr = np.asarray(t_cr, dtype=float)
        return RelativePoseMeasurement(
            p_ref_c=R_cr.T @ t_cr,
            R_ref_c=R_cr.T,
            cov=np.eye(6) * 1e-6 if cov is None else cov,
            rmse=rmse, inlier_fraction=inlier_fraction,
        )

    def transform_cr(self):
        """Back to (R_cr, t_cr)."""
        R_cr = self.R_ref_c.T
        return R_cr, R_cr @ self.p_ref_c


def relative_transform(state_ref, state_c):
    """(R_cr, t_cr) predicted by two camera states: x_c = R_cr x_ref + t_cr."""
    R_cr = state_c.R.T @ state_ref.R
    t_cr = state_c.R.T @ (state_ref.p - state_c.p)
    return R_cr, t_cr


def huber_weight(x, k):
    """IRLS weight of the Huber norm: 1 for |x| <= k, else k/|x|."""
    if k <= 0:
        raise ValueError("huber threshold must be positive")
    ax = np.abs(x)
    return np.where(ax <= k, 1.0, k / np.maximum(ax, 1e-300))


def _huber_cost(r, k):
    ax = np.abs(r)
    return np.where(ax <= k, r * r, k * (2.0 * ax - k))


def _level_terms(pyr_ref, pixels, inv_depths, intr, level):
    """Reference 3D points and per-level reference intensities."""
    rays = np.stack([
        (pixels[:, 0] - intr.cx) / intr.fx,
        (pixels[:, 1] - intr.cy) / intr.fy,
        np.ones(len(pixels)),
    ], axis=1)
    pts = rays / inv_depths[:, None]
    s = 2.0 ** level
    px_l = (pixels[:, 0] + 0.5) / s - 0.5
    py_l = (pixels[:, 1] + 0.5) / s - 0.5
    ref_int = kernels.bilinear(pyr_ref.intensity[level], px_l, py_l)
    return pts, ref_int


def track_frame(ref_pyramid, ref_pixels, ref_inv_depths, cur_pyramid,
                prior_R_cr, prior_t_cr, intr, config=None):
    """Coarse-to-fine Gauss-Newton alignment of the current frame.

    ref_pixels (N, 2) and ref_inv_depths (N,) define the semi-dense depth map
    of the reference keyframe; the prior (usually the IMU prediction)
    initializes the pose at the coarsest level.
    Returns (RelativePoseMeasurement, TrackingStatus).
    """
    config = config or TrackingConfig()
    ref_pixels = np.asarray(ref_pixels, dtype=float)
    ref_inv_depths = np.asarray(ref_inv_depths, dtype=float)
    if ref_pixels.shape[0] < config.min_points:
        raise ValueError(
            f"reference has {ref_pixels.shape[0]} points, need {config.min_points}")
    if not (np.all(np.isfinite(prior_R_cr)) and np.all(np.isfinite(prior_t_cr))):
        raise ValueError("non-finite tracking prior")

    R = np.asarray(prior_R_cr, dtype=float).copy()
    t = np.asarray(prior_t_cr, dtype=float).copy()
    k = config.huber_k

    H = np.eye(6)
    rmse = 0.0
    n_valid = 0
    inlier_fraction = 0.0
    r = J = valid = None

    for level in range(config.levels - 1, -1, -1):
        intr_l = intr.at_level(level)
        img = cur_pyramid.intensity[level]
        gx = cur_pyramid.grad_x[level]
        gy = cur_pyramid.grad_y[level]
        pts, ref_int = _level_terms(ref_pyramid, ref_pixels, ref_inv_depths, intr, level)
        pts = np.ascontiguousarray(pts)
        ref_int = np.ascontiguousarray(ref_int)

        def evaluate(Rx, tx):
            rr, JJ, vv = kernels.tracking_terms(
                img, gx, gy, pts, ref_int, Rx, tx,
                intr_l.fx, intr_l.fy, intr_l.cx, intr_l.cy)
            nv = int(np.count_nonzero(vv))
            cost = float(np.sum(_huber_cost(rr[vv], k))) / max(nv, 1)
            return rr, JJ, vv, nv, cost

        r, J, valid, n_valid, cost = evaluate(R, t)
        if n_valid < config.min_overlap_fraction * len(pts):
            meas = RelativePoseMeasurement.from_transform(
                R, t, np.eye(6), rmse=float("inf"), inlier_fraction=0.0)
            return meas, TrackingStatus.INSUFFICIENT_OVERLAP

        for _ in range(config.max_iterations):
            w = huber_weight(r, k) * valid
            Jw = J * w[:, None]
            H = J.T @ Jw
            b = Jw.T @ r
            try:
                step = np.linalg.solve(H + config.damping * np.eye(6), -b)
            except np.linalg.LinAlgError:
                break
            # accept only non-increasing cost; halve on increase
            accepted = False
            s = step
            for _ in range(config.max_step_halvings + 1):
                R_new = R @ exp_so3(s[3:6])
                t_new = t + s[0:3]
                r_new, J_new, valid_new, nv_new, cost_new = evaluate(R_new, t_new)
                if nv_new > 0 and cost_new <= cost * (1.0 + 1e-12):
                    R, t = R_new, t_new
                    r, J, valid, n_valid, cost = r_new, J_new, valid_new, nv_new, cost_new
                    accepted = True
                    break
                s = 0.5 * s
            if not accepted or np.linalg.norm(step) < config.step_tol:
                break

        rmse = float(np.sqrt(np.mean(r[valid] ** 2))) if n_valid else float("inf")
        inlier_fraction = (
            float(np.count_nonzero(valid & (np.abs(r) <= 3.0 * k))) / len(pts))

    status = TrackingStatus.CONVERGED
    if not np.isfinite(rmse) or rmse > config.failure_rmse:
        status = TrackingStatus.DIVERGED

    # Laplace approximation of the pose covariance at the final estimate,
    # scaled by the weighted residual variance
    w = huber_weight(r, k) * valid
    Jw = J * w[:, None]
    H = J.T @ Jw
    dof = max(n_valid - 6, 1)
    s2 = float(np.sum(w * r * r)) / dof
    cov_est = s2 * np.linalg.pinv(H + config.damping * np.eye(6))

    # map covariance from (dt_cr, dtheta_cr) to the measurement parameters
    p_hat = R.T @ t
    T = np.zeros((6, 6))
    T[0:3, 0:3] = R.T
    T[0:3, 3:6] = hat(p_hat)
    T[3:6, 3:6] = -R
    cov = T @ cov_est @ T.T
    cov = 0.5 * (cov + cov.T) + 1e-12 * np.eye(6)

    meas = RelativePoseMeasurement.from_transform(
        R, t, cov, rmse=rmse, inlier_fraction=inlier_fraction)
    return meas, status


def visual_residual(meas, state_ref, state_c):
    """6-vector [r_pos, r_rot] between the states and the tracking result."""
    Rr_t = state_ref.R.T
    r_pos = Rr_t @ (state_ref.p - state_c.p) - meas.p_ref_c
    r_rot = log_so3(meas.R_ref_c.T @ Rr_t @ state_c.R)
    return np.concatenate([r_pos, r_rot])


def visual_residual_jacobian(meas, state_ref, state_c):
    """6x30 Jacobian of visual_residual w.r.t. [dstate_ref, dstate_c].

    Velocity and bias columns are identically zero; the 6-row residual is the
    nonzero part of the zero-padded 15-row form.
    """
    Rr_t = state_ref.R.T
    r_rot = log_so3(meas.R_ref_c.T @ Rr_t @ state_c.R)
    Jr_inv = right_jacobian_inv(r_rot)

    J = np.zeros((6, 30))
    J[0:3, 0:3] = Rr_t
    J[0:3, 6:9] = hat(Rr_t @ (state_ref.p - state_c.p))
    J[0:3, 15:18] = -Rr_t
    J[3:6, 6:9] = -Jr_inv @ state_c.R.T @ state_ref.R
    J[3:6, 21:24] = Jr_inv
    return J
