"""Vectorized numpy implementations of the hot per-pixel kernels.

This is the pure-Python fallback twin of the compiled extension in _ext.pyx;
both expose the same three functions with identical semantics.
"""

import numpy as np

NAME = "numpy"


def bilinear(img, x, y):
    """Bilinearly interpolate img at float coordinates (x, y).

    Coordinates must satisfy 0 <= x <= W-1 and 0 <= y <= H-1; out-of-range
    coordinates return 0.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    h, w = img.shape
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1.000001)
    yc = np.clip(y, 0, h - 1.000001)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    ax = xc - x0
    ay = yc - y0
    v = ((1 - ax) * (1 - ay) * img[y0, x0]
         + ax * (1 - ay) * img[y0, x0 + 1]
         + (1 - ax) * ay * img[y0 + 1, x0]
         + ax * ay * img[y0 + 1, x0 + 1])
    return np.where(valid, v, 0.0)


def tracking_terms(image, gx, gy, pts, ref_int, R, t, fx, fy, cx, cy):
    """Photometric residuals and pose Jacobians for one alignment iteration.

    pts are 3D points in the reference frame (N, 3) with intensities ref_int;
    the warp is x_cur = R @ x_ref + t. Returns (residual (N,), J (N, 6),
    valid (N,) bool) where J columns are [d t_cur (3), d theta_cur (3)] under
    a right-multiplicative rotation increment. Invalid points (behind the
    camera or projecting outside the interpolation domain) get zero rows.
    """
    h, w = image.shape
    Xc = pts @ R.T + t
    z = Xc[:, 2]
    valid = z > 1e-6
    zs = np.where(valid, z, 1.0)
    u = fx * Xc[:, 0] / zs + cx
    v = fy * Xc[:, 1] / zs + cy
    valid &= (u >= 1.0) & (u <= w - 2.0) & (v >= 1.0) & (v <= h - 2.0)

    ic = bilinear(image, u, v)
    gxi = bilinear(gx, u, v)
    gyi = bilinear(gy, u, v)
    r = np.where(valid, ref_int - ic, 0.0)

    iz = 1.0 / zs
    # image-gradient chain through the projection
    d_x = gxi * fx * iz
    d_y = gyi * fy * iz
    d_z = -(gxi * fx * Xc[:, 0] + gyi * fy * Xc[:, 1]) * iz * iz
    dI = np.stack([d_x, d_y, d_z], axis=1)          # dI/dXc, (N, 3)

    J = np.empty((pts.shape[0], 6))
    J[:, 0:3] = -dI                                  # dXc/dt = I
    # dXc/dtheta = -R [X]x  =>  dI/dtheta = -(dI R) [X]x = (dI R) x X ... per row
    dIR = dI @ R
    J[:, 3:6] = np.cross(dIR, pts)                   # -(-dIR x X) chain folded in
    J[~valid] = 0.0
    return r, J, valid


def ssd_scores(image, px, py, du, dv, ref_vals):
    """Sum-of-squared-differences of a small pattern at S candidate positions.

    px, py: (S,) pattern-center coordinates; du, dv: (P,) pattern offsets;
    ref_vals: (P,) reference intensities. Positions where any pattern pixel
    leaves the interpolation domain score +inf.
    """
    h, w = image.shape
    xs = px[:, None] + du[None, :]
    ys = py[:, None] + dv[None, :]
    ok = np.all((xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1), axis=1)
    vals = bilinear(image, xs.ravel(), ys.ravel()).reshape(xs.shape)
    d = vals - ref_vals[None, :]
    scores = np.einsum("sp,sp->s", d, d)
    return np.where(ok, scores, np.inf)
