"""Sliding-window MAP back-end: joint Gauss-Newton over inertial and
relative-pose factors, with an information-form prior maintained by two-way
marginalization (front: second-newest frame, back: oldest keyframe).

States are 15-dimensional [p, v, theta, ba, bg] blocks, retracted with
state_retract (rotations right-multiplicative). The normal equations use the
convention H dx = -b with b = sum J^T W r plus the prior gradient.
"""

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .imu import imu_residual, imu_residual_jacobian, integrate, state_local, state_retract
from .so3 import log_so3
from .tracking import TrackingStatus, visual_residual, visual_residual_jacobian

BLOCK = 15


@dataclass(frozen=True)
class WindowFrame:
    frame_id: int
    timestamp: float
    state: object
    is_keyframe: bool = False


@dataclass
class WindowState:
    """Ordered window of frames: the reference keyframe plus the latest
    regular frames, capacity-bounded (oldest first)."""
    frames: list = field(default_factory=list)
    capacity: int = 3

    def __post_init__(self):
        self._check()

    def _check(self):
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("window timestamps must be strictly increasing")
        ids = [f.frame_id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate frame id in window")

    @property
    def ids(self):
        return [f.frame_id for f in self.frames]

    def index(self, frame_id):
        for i, f in enumerate(self.frames):
            if f.frame_id == frame_id:
                return i
        raise KeyError(f"frame {frame_id} not in window")

    def get(self, frame_id):
        return self.frames[self.index(frame_id)]

    def keyframes(self):
        return [f for f in self.frames if f.is_keyframe]

    def add(self, frame):
        out = WindowState(self.frames + [frame], self.capacity)
        return out

    def without(self, frame_id):
        i = self.index(frame_id)
        return WindowState(self.frames[:i] + self.frames[i + 1:], self.capacity)

    def retract(self, dx):
        frames = [
            replace(f, state=state_retract(f.state, dx[i * BLOCK:(i + 1) * BLOCK]))
            for i, f in enumerate(self.frames)
        ]
        return WindowState(frames, self.capacity)


def _weight(cov):
    cov = 0.5 * (cov + cov.T)
    W = np.linalg.inv(cov)
    return 0.5 * (W + W.T)


@dataclass(frozen=True)
class ImuFactor:
    """Inertial constraint between two consecutive window frames."""
    id_k: int
    id_k1: int
    preint: object

    def endpoints(self):
        return (self.id_k, self.id_k1)

    def weight(self):
        return _weight(self.preint.cov)

    def residual(self, state_k, state_k1):
        return imu_residual(self.preint, state_k, state_k1)

    def jacobian(self, state_k, state_k1):
        return imu_residual_jacobian(self.preint, state_k, state_k1)


@dataclass(frozen=True)
class VisualFactor:
    """Relative-pose constraint from dense tracking against a keyframe."""
    id_ref: int
    id_cur: int
    meas: object

    def endpoints(self):
        return (self.id_ref, self.id_cur)

    def weight(self):
        return _weight(self.meas.cov)

    def residual(self, state_ref, state_cur):
        return visual_residual(self.meas, state_ref, state_cur)

    def jacobian(self, state_ref, state_cur):
        return visual_residual_jacobian(self.meas, state_ref, state_cur)


@dataclass(frozen=True)
class PriorInfo:
    """Information-form prior over a subset of window frames.

    Contributes Lambda and b_p + Lambda * delta to the normal equations,
    where delta is the retraction from the stored linearization point to the
    current estimate.
    """
    ids: tuple = ()
    Lambda: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    b: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lin_states: tuple = ()

    def __post_init__(self):
        n = len(self.ids) * BLOCK
        if self.Lambda.shape != (n, n) or self.b.shape != (n,):
            raise ValueError("prior dimensions do not match its frame ids")
        if len(self.lin_states) != len(self.ids):
            raise ValueError("prior needs one linearization state per frame")
        scale = max(1.0, float(np.linalg.norm(self.Lambda)))
        if np.linalg.norm(self.Lambda - self.Lambda.T) > 1e-10 * scale:
            raise ValueError("prior information matrix must be symmetric")

    def delta(self, window):
        """Stacked retraction from the linearization point to the window."""
        parts = [
            state_local(window.get(fid).state, lin)
            for fid, lin in zip(self.ids, self.lin_states)
        ]
        return np.concatenate(parts) if parts else np.zeros(0)

    def cost(self, window):
        """Quadratic prior energy up to an additive constant."""
        if not self.ids:
            return 0.0
        d = self.delta(window)
        return float(d @ self.Lambda @ d + 2.0 * self.b @ d)


def empty_prior():
    return PriorInfo()


def anchor_prior(frame, pos_sigma=1e-3, rot_sigma=1e-3, vel_sigma=0.1,
                 ba_sigma=0.1, bg_sigma=0.01):
    """Large-information prior pinning the first state: position and yaw are
    unobservable, roll/pitch only through gravity, so the first pose is fixed
    essentially exactly while velocity and biases stay weakly constrained."""
    info = np.concatenate([
        np.full(3, pos_sigma ** -2),
        np.full(3, vel_sigma ** -2),
        np.full(3, rot_sigma ** -2),
        np.full(3, ba_sigma ** -2),
        np.full(3, bg_sigma ** -2),
    ])
    return PriorInfo(ids=(frame.frame_id,), Lambda=np.diag(info),
                     b=np.zeros(BLOCK), lin_states=(frame.state,))


def _scatter_indices(window, ids):
    idx = []
    for fid in ids:
        i = window.index(fid)
        idx.extend(range(i * BLOCK, (i + 1) * BLOCK))
    return np.array(idx, dtype=np.intp)


def build_normal_equations(window, factors, prior):
    """Assemble H = sum J^T W J + Lambda_p and b = sum J^T W r + prior
    gradient over the window's stacked 15-dim blocks. Returns (H, b, cost)
    with cost the total weighted squared residual plus the prior energy."""
    n = len(window.frames) * BLOCK
    H = np.zeros((n, n))
    b = np.zeros(n)
    cost = 0.0
    for f in factors:
        ia, ib = (window.index(e) for e in f.endpoints())
        sa, sb = window.frames[ia].state, window.frames[ib].state
        r = f.residual(sa, sb)
        J = f.jacobian(sa, sb)
        W = f.weight()
        JW = J.T @ W
        Hf = JW @ J
        bf = JW @ r
        cost += float(r @ W @ r)
        sl = np.concatenate([np.arange(ia * BLOCK, (ia + 1) * BLOCK),
                             np.arange(ib * BLOCK, (ib + 1) * BLOCK)])
        H[np.ix_(sl, sl)] += Hf
        b[sl] += bf
    if prior is not None and prior.ids:
        sl = _scatter_indices(window, prior.ids)
        H[np.ix_(sl, sl)] += prior.Lambda
        b[sl] += prior.b + prior.Lambda @ prior.delta(window)
        cost += prior.cost(window)
    H = 0.5 * (H + H.T)
    return H, b, cost


class SolveStatus(enum.Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max-iterations"
    FAILED = "failed"


@dataclass(frozen=True)
class GaussNewtonConfig:
    max_iterations: int = 10
    step_tol: float = 1e-6
    damping: float = 1e-6
    max_step_halvings: int = 5


@dataclass(frozen=True)
class SolveReport:
    status: SolveStatus
    iterations: int
    initial_cost: float
    final_cost: float


def _total_cost(window, factors, prior):
    cost = 0.0
    for f in factors:
        ia, ib = (window.index(e) for e in f.endpoints())
        r = f.residual(window.frames[ia].state, window.frames[ib].state)
        W = f.weight()
        cost += float(r @ W @ r)
    if prior is not None and prior.ids:
        cost += prior.cost(window)
    return cost


def gauss_newton_solve(window, factors, prior, config=None):
    """Damped Gauss-Newton on the window, with step halving so accepted
    iterations never increase the total cost. On divergence (no acceptable
    step before any progress) the window is returned unchanged."""
    config = config or GaussNewtonConfig()
    cur = window
    initial_cost = cost = _total_cost(cur, factors, prior)
    n = len(cur.frames) * BLOCK
    accepted = 0
    for it in range(config.max_iterations):
        H, b, _ = build_normal_equations(cur, factors, prior)
        try:
            step = np.linalg.solve(H + config.damping * np.eye(n), -b)
        except np.linalg.LinAlgError:
            break
        ok = False
        s = step
        for _ in range(config.max_step_halvings + 1):
            trial = cur.retract(s)
            trial_cost = _total_cost(trial, factors, prior)
            if np.isfinite(trial_cost) and trial_cost <= cost * (1.0 + 1e-12) + 1e-15:
                cur, cost = trial, trial_cost
                ok = True
                break
            s = 0.5 * s
        if not ok:
            if accepted == 0:
                return window, SolveReport(SolveStatus.FAILED, it, initial_cost,
                                           initial_cost)
            break
        accepted += 1
        if np.linalg.norm(step) < config.step_tol:
            return cur, SolveReport(SolveStatus.CONVERGED, accepted,
                                    initial_cost, cost)
    status = (SolveStatus.CONVERGED if accepted < config.max_iterations
              else SolveStatus.MAX_ITERATIONS)
    return cur, SolveReport(status, accepted, initial_cost, cost)


def _psd_project(M):
    M = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(M)
    w = np.maximum(w, 0.0)
    M = V @ np.diag(w) @ V.T
    return 0.5 * (M + M.T)


def marginalize(window, factors, prior, victim_id):
    """Fold every factor touching the victim (and the prior) into a dense
    joint information form at the current estimates, then eliminate the
    victim's 15 rows/columns by Schur complement.

    Returns (window without victim, remaining factors, new PriorInfo whose
    linearization point is the current estimate of the retained frames).
    """
    window.index(victim_id)  # raises if absent
    victim = window.get(victim_id)
    if victim.is_keyframe and len(window.keyframes()) == 1:
        raise ValueError("refusing to marginalize the only keyframe")

    removed = [f for f in factors if victim_id in f.endpoints()]
    kept = [f for f in factors if victim_id not in f.endpoints()]

    n = len(window.frames) * BLOCK
    H = np.zeros((n, n))
    b = np.zeros(n)
    for f in removed:
        ia, ib = (window.index(e) for e in f.endpoints())
        sa, sb = window.frames[ia].state, window.frames[ib].state
        r = f.residual(sa, sb)
        J = f.jacobian(sa, sb)
        W = f.weight()
        JW = J.T @ W
        sl = np.concatenate([np.arange(ia * BLOCK, (ia + 1) * BLOCK),
                             np.arange(ib * BLOCK, (ib + 1) * BLOCK)])
        H[np.ix_(sl, sl)] += JW @ J
        b[sl] += JW @ r
    if prior is not None and prior.ids:
        sl = _scatter_indices(window, prior.ids)
        H[np.ix_(sl, sl)] += prior.Lambda
        # re-root the prior at the current estimate
        b[sl] += prior.b + prior.Lambda @ prior.delta(window)

    vi = window.index(victim_id)
    v_sl = np.arange(vi * BLOCK, (vi + 1) * BLOCK)
    r_sl = np.array([i for i in range(n) if i not in set(v_sl)], dtype=np.intp)

    H_vv = H[np.ix_(v_sl, v_sl)]
    H_rv = H[np.ix_(r_sl, v_sl)]
    H_rr = H[np.ix_(r_sl, r_sl)]
    b_v = b[v_sl]
    b_r = b[r_sl]

    H_vv_inv = np.linalg.pinv(0.5 * (H_vv + H_vv.T), hermitian=True)
    Lam = _psd_project(H_rr - H_rv @ H_vv_inv @ H_rv.T)
    b_new = b_r - H_rv @ H_vv_inv @ b_v

    new_window = window.without(victim_id)
    new_prior = PriorInfo(
        ids=tuple(new_window.ids),
        Lambda=Lam,
        b=b_new,
        lin_states=tuple(f.state for f in new_window.frames),
    )
    return new_window, kept, new_prior


def compose_imu_factors(first, second, noise):
    """Replace two chained pre-integrations by one over the union of their
    samples (the shared boundary sample appears once), re-integrated at the
    first factor's linearization bias and start orientation."""
    if first.id_k1 != second.id_k:
        raise ValueError("factors are not chained")
    a, b = first.preint, second.preint
    if abs(a.samples[-1].timestamp - b.samples[0].timestamp) > 1e-9:
        raise ValueError("factors do not share a boundary sample")
    merged = list(a.samples) + list(b.samples[1:])
    preint = integrate(merged, a.bias, a.R_wb_start, noise)
    return ImuFactor(first.id_k, second.id_k1, preint)


@dataclass(frozen=True)
class TwoWayPolicy:
    near_threshold: float = 0.12       # meters, weighted
    rotation_weight: float = 0.5
    mean_scene_depth: float = 2.0
    min_inlier_fraction: float = 0.5


class MarginalizationSide(enum.Enum):
    FRONT = "front"    # drop the second-newest regular frame
    BACK = "back"      # drop the oldest keyframe


def two_way_decision(window, tracking, status, policy=None):
    """Choose the marginalization victim for a window at capacity.

    Front marginalization (second-newest regular frame) when the latest dense
    tracking is good and that frame sits near the reference keyframe, judged
    by the weighted translation + rotation distance; otherwise back
    marginalization of the oldest keyframe.
    """
    policy = policy or TwoWayPolicy()
    keyframes = window.keyframes()
    regular = [f for f in window.frames if not f.is_keyframe]
    if not keyframes or len(window.frames) < 2:
        raise ValueError("two-way decision needs a keyframe and a full window")

    oldest_kf = keyframes[0]
    if not regular:
        return MarginalizationSide.BACK, oldest_kf.frame_id
    second_newest = (regular[-2] if len(regular) >= 2 else regular[-1])

    good = (status == TrackingStatus.CONVERGED
            and tracking.inlier_fraction >= policy.min_inlier_fraction)
    if good:
        kf = keyframes[-1]
        d = state_local(second_newest.state, kf.state)
        dist = (np.linalg.norm(d[0:3])
                + policy.rotation_weight * np.linalg.norm(
                    log_so3(kf.state.R.T @ second_newest.state.R))
                * policy.mean_scene_depth)
        if dist < policy.near_threshold:
            return MarginalizationSide.FRONT, second_newest.frame_id
    return MarginalizationSide.BACK, oldest_kf.frame_id
