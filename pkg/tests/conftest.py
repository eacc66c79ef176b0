import numpy as np
import pytest

from dvio.imu import state_retract


def fd_jacobian_two_states(res_fn, state_a, state_b, eps=1e-6):
    """Central-difference Jacobian of res_fn(state_a, state_b) w.r.t. the
    30-dim stacked increment, using the same retraction as the estimator."""
    r0 = res_fn(state_a, state_b)
    J = np.zeros((r0.shape[0], 30))
    for i in range(30):
        dx = np.zeros(15)
        dx[i % 15] = eps
        if i < 15:
            rp = res_fn(state_retract(state_a, dx), state_b)
            rm = res_fn(state_retract(state_a, -dx), state_b)
        else:
            rp = res_fn(state_a, state_retract(state_b, dx))
            rm = res_fn(state_a, state_retract(state_b, -dx))
        J[:, i] = (rp - rm) / (2.0 * eps)
    return J


def assert_jacobian_close(J_analytic, J_numeric, rtol=1e-5, atol=1e-7):
    err = np.abs(J_analytic - J_numeric)
    tol = atol + rtol * np.abs(J_numeric)
    bad = err > tol
    assert not np.any(bad), (
        f"jacobian mismatch at {np.argwhere(bad)[:5]}: "
        f"max err {err.max():.3e}"
    )


@pytest.fixture
def rng():
    return np.random.default_rng(42)
