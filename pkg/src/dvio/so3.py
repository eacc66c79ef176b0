"""Rotation-group primitives: hat/vee, exponential/log maps, right Jacobian.

Conventions used throughout the package:
  * rotation matrices are body-to-world unless a name says otherwise
  * tangent increments act on the right: R <- R @ exp_so3(dtheta)
  * axis-angle vectors returned by log_so3 have norm <= pi
"""

import numpy as np

# below this angle exp/log/right_jacobian switch to their Taylor expansions
SMALL_ANGLE = 1e-6


def hat(v):
    """Skew-symmetric matrix such that hat(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def vee(M, tol=1e-9):
    """Inverse of hat. Raises ValueError if M is not skew within tol."""
    M = np.asarray(M, dtype=float)
    sym = M + M.T
    if np.linalg.norm(sym) >= tol:
        raise ValueError(f"matrix is not skew-symmetric: |M + M^T| = {np.linalg.norm(sym):.3e}")
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


def exp_so3(theta):
    """Rodrigues formula mapping an axis-angle vector to a rotation matrix."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    S = hat(theta)
    if angle < SMALL_ANGLE:
        # second-order Taylor, error O(angle^3) ~ 1e-18
        return np.eye(3) + S + 0.5 * (S @ S)
    c1 = np.sin(angle) / angle
    c2 = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + c1 * S + c2 * (S @ S)


def log_so3(R):
    """Axis-angle vector of R with norm <= pi; inverse of exp_so3."""
    R = np.asarray(R, dtype=float)
    cos_angle = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    if angle < SMALL_ANGLE:
        return vee(0.5 * (R - R.T), tol=np.inf)
    if np.pi - angle < 1e-6:
        # near pi the antisymmetric part vanishes; extract the axis from
        # the largest diagonal entry of R + I
        A = R + np.eye(3)
        k = int(np.argmax(np.diag(A)))
        axis = A[:, k] / np.sqrt(2.0 * A[k, k])
        # fix the sign using the (noisy but nonzero away from exactly pi)
        # antisymmetric part, falling back to a canonical choice at pi
        w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(w, axis) < 0:
            axis = -axis
        return angle * axis
    return angle / (2.0 * np.sin(angle)) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
    )


def right_jacobian(theta):
    """Right Jacobian J_r of SO(3).

    Relates additive tangent increments to right-multiplicative group
    increments: exp(hat(theta + d)) ~= exp(hat(theta)) @ exp(hat(J_r(theta) @ d)).
    """
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    S = hat(theta)
    if angle < SMALL_ANGLE:
        return np.eye(3) - 0.5 * S + (1.0 / 6.0) * (S @ S)
    a2 = angle * angle
    c1 = (1.0 - np.cos(angle)) / a2
    c2 = (angle - np.sin(angle)) / (a2 * angle)
    return np.eye(3) - c1 * S + c2 * (S @ S)


def right_jacobian_inv(theta):
    """Inverse of the right Jacobian."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    S = hat(theta)
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * S + (1.0 / 12.0) * (S @ S)
    c = 1.0 / (angle * angle) - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return np.eye(3) + 0.5 * S + c * (S @ S)


def adjoint_swap(theta, R):
    """Return R^T theta, so that exp(hat(theta)) @ R == R @ exp(hat(R^T theta))."""
    theta = np.asarray(theta, dtype=float)
    R = np.asarray(R, dtype=float)
    return R.T @ theta


def is_rotation(R, tol=1e-9):
    """Check orthonormality and det(R) = +1 within tol."""
    R = np.asarray(R, dtype=float)
    return (
        np.linalg.norm(R.T @ R - np.eye(3)) < tol
        and abs(np.linalg.det(R) - 1.0) < tol
    )


def project_to_rotation(R):
    """Nearest rotation matrix (Frobenius) via SVD; guards drift from products."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


def quat_to_rotation(q):
    """Unit quaternion (w, x, y, z) to rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_quat(R):
    """Rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        k = int(np.argmax(np.diag(R)))
        i, j = (k + 1) % 3, (k + 2) % 3
        s = np.sqrt(R[k, k] - R[i, i] - R[j, j] + 1.0) * 2.0
        q = np.empty(4)
        q[0] = (R[j, i] - R[i, j]) / s
        q[1 + k] = 0.25 * s
        q[1 + i] = (R[i, k] + R[k, i]) / s
        q[1 + j] = (R[j, k] + R[k, j]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)
