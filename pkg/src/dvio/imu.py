"""IMU pre-integration with covariance propagation and bias Jacobians.

Measurement convention: measured = true - bias, i.e. the bias-corrected
specific force is (accel_measured + b_a). Gravity is compensated inside the
pre-integration using the global orientation at the interval start, so the
pre-integrated quantities predict

    dp = R_k^T (p_{k+1} - p_k - v_k * dt)
    dv = R_k^T (v_{k+1} - v_k)
    dR = R_k^T R_{k+1}

`gravity` in NoiseParams is the world-frame gravity acceleration (pointing
down, e.g. (0, 0, -9.81)); a resting accelerometer reads -R^T gravity.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .so3 import exp_so3, hat, log_so3, right_jacobian, right_jacobian_inv

# first-order bias correction limits; beyond these a full re-integration runs
MAX_DELTA_BG = 0.01   # rad/s
MAX_DELTA_BA = 0.1    # m/s^2


@dataclass(frozen=True)
class ImuSample:
    """One gyro/accel reading. Angular rate in rad/s, specific force in m/s^2."""
    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float))
        if not (np.all(np.isfinite(self.gyro)) and np.all(np.isfinite(self.accel))):
            raise ValueError("non-finite IMU sample")


@dataclass(frozen=True)
class NoiseParams:
    """Continuous-time noise densities and the world gravity vector."""
    sigma_a: float = 2.0e-3       # accel white noise, m/s^2/sqrt(Hz)
    sigma_g: float = 1.7e-4       # gyro white noise, rad/s/sqrt(Hz)
    walk_a: float = 3.0e-3        # accel bias random walk, m/s^3/sqrt(Hz)
    walk_g: float = 2.0e-5        # gyro bias random walk, rad/s^2/sqrt(Hz)
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.80665]))

    def __post_init__(self):
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float))
        if min(self.sigma_a, self.sigma_g, self.walk_a, self.walk_g) <= 0:
            raise ValueError("noise densities must be positive")
        if not 9.0 <= np.linalg.norm(self.gravity) <= 10.0:
            raise ValueError("|gravity| must be in [9, 10] m/s^2")


@dataclass(frozen=True)
class Bias:
    """Accelerometer and gyroscope biases; defaults to zero."""
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "ba", np.asarray(self.ba, dtype=float))
        object.__setattr__(self, "bg", np.asarray(self.bg, dtype=float))


@dataclass(frozen=True)
class State:
    """15-DoF navigation state in the global frame. R is body-to-world."""
    p: np.ndarray
    v: np.ndarray
    R: np.ndarray
    bias: Bias = field(default_factory=Bias)

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))


def state_retract(state, dx):
    """Apply a 15-dim increment [dp, dv, dtheta, dba, dbg]; R is updated on the right."""
    dx = np.asarray(dx, dtype=float)
    return State(
        p=state.p + dx[0:3],
        v=state.v + dx[3:6],
        R=state.R @ exp_so3(dx[6:9]),
        bias=Bias(state.bias.ba + dx[9:12], state.bias.bg + dx[12:15]),
    )


def state_local(state, ref):
    """Inverse of state_retract: the increment taking ref to state."""
    return np.concatenate([
        state.p - ref.p,
        state.v - ref.v,
        log_so3(ref.R.T @ state.R),
        state.bias.ba - ref.bias.ba,
        state.bias.bg - ref.bias.bg,
    ])


@dataclass(frozen=True)
class PreintegratedImu:
    """Relative-motion summary of an IMU batch, with covariance and bias Jacobians.

    dp/dv/dR are expressed in the body frame at the interval start. The
    J_* caches are derivatives of dp/dv with respect to the linearization
    biases; A_rot is the right-perturbation of dR per unit gyro-bias change.
    Raw samples and the start orientation are retained so the linearization
    bias can be moved exactly.
    """
    dp: np.ndarray
    dv: np.ndarray
    dR: np.ndarray
    bias: Bias
    cov: np.ndarray
    dt: float
    n: int
    J_p_ba: np.ndarray
    J_p_bg: np.ndarray
    J_v_ba: np.ndarray
    J_v_bg: np.ndarray
    A_rot: np.ndarray
    samples: tuple
    R_wb_start: np.ndarray
    noise: NoiseParams


def _noise_Q(noise, dt):
    """Discrete noise covariance for channels [n_a, n_g, n_ba, n_bg]."""
    d = np.concatenate([
        np.full(3, noise.sigma_a**2),
        np.full(3, noise.sigma_g**2),
        np.full(3, noise.walk_a**2),
        np.full(3, noise.walk_g**2),
    ])
    return np.diag(d / dt)


def propagate_covariance(cov_prev, R_ki, accel_corr, gyro_corr, dt, noise):
    """One discrete step of the 15x15 error-state covariance.

    Error-state order: [dp, dv, dtheta, dba, dbg], with dtheta the
    right-multiplicative rotation error of dR. Returns the symmetrized
    F P F^T + G Q G^T update.
    """
    if dt == 0.0:
        return cov_prev
    S_u = hat(accel_corr)
    E = exp_so3(gyro_corr * dt)
    Jr = right_jacobian(gyro_corr * dt)

    F = np.eye(15)
    F[0:3, 3:6] = np.eye(3) * dt
    F[0:3, 6:9] = -0.5 * (R_ki @ S_u) * dt * dt
    F[0:3, 9:12] = 0.5 * R_ki * dt * dt
    F[3:6, 6:9] = -(R_ki @ S_u) * dt
    F[3:6, 9:12] = R_ki * dt
    F[6:9, 6:9] = E.T
    F[6:9, 12:15] = Jr * dt

    G = np.zeros((15, 12))
    G[0:3, 0:3] = 0.5 * R_ki * dt * dt
    G[3:6, 0:3] = R_ki * dt
    G[6:9, 3:6] = Jr * dt
    G[9:12, 6:9] = np.eye(3) * dt
    G[12:15, 9:12] = np.eye(3) * dt

    cov = F @ cov_prev @ F.T + G @ _noise_Q(noise, dt) @ G.T
    return 0.5 * (cov + cov.T)


def integrate(samples, bias, R_wb_k, noise):
    """Pre-integrate an IMU batch between two frames.

    samples: ImuSample list with strictly increasing timestamps; the average
    of samples i and i+1 is held over [t_i, t_{i+1}] (trapezoidal rule, second
    order in dt). R_wb_k is the body-to-world rotation at the interval start,
    needed because gravity compensation lives inside the pre-integration.
    bias is the linearization bias.
    """
    if len(samples) == 0:
        raise ValueError("empty IMU sample batch")
    if len(samples) < 2:
        raise ValueError("need at least two samples to span a time interval")
    ts = np.array([s.timestamp for s in samples])
    if np.any(np.diff(ts) <= 0):
        raise ValueError("IMU timestamps must be strictly increasing")

    R_wb_k = np.asarray(R_wb_k, dtype=float)
    g_k = R_wb_k.T @ noise.gravity  # gravity in the start body frame, constant

    dp = np.zeros(3)
    dv = np.zeros(3)
    dR = np.eye(3)
    cov = np.zeros((15, 15))
    J_p_ba = np.zeros((3, 3))
    J_p_bg = np.zeros((3, 3))
    J_v_ba = np.zeros((3, 3))
    J_v_bg = np.zeros((3, 3))
    A = np.zeros((3, 3))

    for i in range(len(samples) - 1):
        dt = ts[i + 1] - ts[i]
        u = 0.5 * (samples[i].accel + samples[i + 1].accel) + bias.ba
        w = 0.5 * (samples[i].gyro + samples[i + 1].gyro) + bias.bg
        a_k = dR @ u + g_k                      # acceleration in frame k

        cov = propagate_covariance(cov, dR, u, w, dt, noise)

        # position first (uses the pre-step velocity), then velocity/rotation
        dp = dp + dv * dt + 0.5 * a_k * dt * dt
        J_p_ba = J_p_ba + J_v_ba * dt + 0.5 * dR * dt * dt
        dAu = -dR @ hat(u) @ A                  # d(dR u)/d(bg)
        J_p_bg = J_p_bg + J_v_bg * dt + 0.5 * dAu * dt * dt
        dv = dv + a_k * dt
        J_v_ba = J_v_ba + dR * dt
        J_v_bg = J_v_bg + dAu * dt

        E = exp_so3(w * dt)
        A = E.T @ A + right_jacobian(w * dt) * dt
        dR = dR @ E

    return PreintegratedImu(
        dp=dp, dv=dv, dR=dR, bias=bias, cov=cov,
        dt=float(ts[-1] - ts[0]), n=len(samples) - 1,
        J_p_ba=J_p_ba, J_p_bg=J_p_bg, J_v_ba=J_v_ba, J_v_bg=J_v_bg, A_rot=A,
        samples=tuple(samples), R_wb_start=R_wb_k, noise=noise,
    )


def update_linearization_bias(m, new_bias):
    """Move the pre-integration to a new linearization bias.

    Small changes use the cached first-order bias Jacobians; large ones fall
    back to exact re-integration of the retained samples.
    """
    dba = new_bias.ba - m.bias.ba
    dbg = new_bias.bg - m.bias.bg
    if np.linalg.norm(dba) == 0.0 and np.linalg.norm(dbg) == 0.0:
        return m
    if np.linalg.norm(dbg) > MAX_DELTA_BG or np.linalg.norm(dba) > MAX_DELTA_BA:
        return integrate(list(m.samples), new_bias, m.R_wb_start, m.noise)
    return replace(
        m,
        dp=m.dp + m.J_p_ba @ dba + m.J_p_bg @ dbg,
        dv=m.dv + m.J_v_ba @ dba + m.J_v_bg @ dbg,
        dR=m.dR @ exp_so3(m.A_rot @ dbg),
        bias=new_bias,
    )


def _corrected_deltas(m, bias_k):
    """dp/dv/dR corrected to the state's bias via the cached Jacobians."""
    dba = bias_k.ba - m.bias.ba
    dbg = bias_k.bg - m.bias.bg
    dp = m.dp + m.J_p_ba @ dba + m.J_p_bg @ dbg
    dv = m.dv + m.J_v_ba @ dba + m.J_v_bg @ dbg
    dR = m.dR @ exp_so3(m.A_rot @ dbg)
    return dp, dv, dR


def imu_residual(m, state_k, state_k1):
    """15-vector residual [r_p, r_v, r_theta, r_ba, r_bg] between states and m."""
    dp, dv, dR = _corrected_deltas(m, state_k.bias)
    Rk_t = state_k.R.T
    r_p = Rk_t @ (state_k1.p - state_k.p - state_k.v * m.dt) - dp
    r_v = Rk_t @ (state_k1.v - state_k.v) - dv
    r_th = log_so3(dR.T @ Rk_t @ state_k1.R)
    r_ba = state_k1.bias.ba - state_k.bias.ba
    r_bg = state_k1.bias.bg - state_k.bias.bg
    return np.concatenate([r_p, r_v, r_th, r_ba, r_bg])


def imu_residual_jacobian(m, state_k, state_k1):
    """15x30 Jacobian of imu_residual w.r.t. [dstate_k, dstate_k1].

    Uses the right-multiplicative retraction of state_retract. Bias blocks
    come from the Jacobians accumulated during integration.
    """
    dp, dv, dR = _corrected_deltas(m, state_k.bias)
    Rk_t = state_k.R.T
    r_th = log_so3(dR.T @ Rk_t @ state_k1.R)
    Jr_inv = right_jacobian_inv(r_th)
    E_r = exp_so3(r_th)
    # the stored A_rot perturbs dR at the linearization bias; chain it
    # through the already-applied correction exp(A_rot (bg_k - bg_lin))
    corr = m.A_rot @ (state_k.bias.bg - m.bias.bg)
    A_eff = right_jacobian(corr) @ m.A_rot

    J = np.zeros((15, 30))
    # position row
    J[0:3, 0:3] = -Rk_t
    J[0:3, 3:6] = -Rk_t * m.dt
    J[0:3, 6:9] = hat(Rk_t @ (state_k1.p - state_k.p - state_k.v * m.dt))
    J[0:3, 9:12] = -m.J_p_ba
    J[0:3, 12:15] = -m.J_p_bg
    J[0:3, 15:18] = Rk_t
    # velocity row
    J[3:6, 3:6] = -Rk_t
    J[3:6, 6:9] = hat(Rk_t @ (state_k1.v - state_k.v))
    J[3:6, 9:12] = -m.J_v_ba
    J[3:6, 12:15] = -m.J_v_bg
    J[3:6, 18:21] = Rk_t
    # rotation row
    J[6:9, 6:9] = -Jr_inv @ state_k1.R.T @ state_k.R
    J[6:9, 12:15] = -Jr_inv @ E_r.T @ A_eff
    J[6:9, 21:24] = Jr_inv
    # bias rows
    J[9:12, 9:12] = -np.eye(3)
    J[9:12, 24:27] = np.eye(3)
    J[12:15, 12:15] = -np.eye(3)
    J[12:15, 27:30] = np.eye(3)
    return J


def predict_state(m, state_k):
    """Propagate state_k through the pre-integration (zero-residual state)."""
    dp, dv, dR = _corrected_deltas(m, state_k.bias)
    return State(
        p=state_k.p + state_k.v * m.dt + state_k.R @ dp,
        v=state_k.v + state_k.R @ dv,
        R=state_k.R @ dR,
        bias=state_k.bias,
    )
