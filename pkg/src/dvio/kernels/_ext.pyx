# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of kernels/_numpy.py. Same functions, typed inner loops."""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor, INFINITY

NAME = "cython"


cdef inline double _sample(double[:, ::1] img, double x, double y) nogil:
    cdef Py_ssize_t x0 = <Py_ssize_t>floor(x)
    cdef Py_ssize_t y0 = <Py_ssize_t>floor(y)
    cdef double ax = x - x0
    cdef double ay = y - y0
    return ((1.0 - ax) * (1.0 - ay) * img[y0, x0]
            + ax * (1.0 - ay) * img[y0, x0 + 1]
            + (1.0 - ax) * ay * img[y0 + 1, x0]
            + ax * ay * img[y0 + 1, x0 + 1])


def _bilinear_flat(double[:, ::1] img, double[::1] xa, double[::1] ya, double[::1] out):
    cdef Py_ssize_t n = xa.shape[0]
    cdef Py_ssize_t h = img.shape[0]
    cdef Py_ssize_t w = img.shape[1]
    cdef Py_ssize_t i
    cdef double xi, yi
    for i in range(n):
        xi = xa[i]
        yi = ya[i]
        if xi < 0 or xi > w - 1 or yi < 0 or yi > h - 1:
            out[i] = 0.0
            continue
        if xi > w - 1.000001:
            xi = w - 1.000001
        if yi > h - 1.000001:
            yi = h - 1.000001
        out[i] = _sample(img, xi, yi)


def bilinear(img, x, y):
    """Bilinear interpolation; out-of-range coordinates return 0."""
    xa = np.ascontiguousarray(x, dtype=np.float64).ravel()
    ya = np.ascontiguousarray(y, dtype=np.float64).ravel()
    img = np.ascontiguousarray(img, dtype=np.float64)
    out = np.zeros(xa.shape[0], dtype=np.float64)
    _bilinear_flat(img, xa, ya, out)
    shp = np.shape(x)
    return out.reshape(shp) if shp else float(out[0])


def tracking_terms(double[:, ::1] image, double[:, ::1] gx, double[:, ::1] gy,
                   double[:, ::1] pts, double[::1] ref_int,
                   R_in, t_in, double fx, double fy, double cx, double cy):
    """Photometric residuals and 6-DoF pose Jacobians (see numpy twin)."""
    cdef cnp.ndarray[double, ndim=2] Rm = np.ascontiguousarray(R_in, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] tv = np.ascontiguousarray(t_in, dtype=np.float64)
    cdef Py_ssize_t n = pts.shape[0]
    cdef cnp.ndarray[double, ndim=1] r = np.zeros(n, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] J = np.zeros((n, 6), dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] valid = np.zeros(n, dtype=np.uint8)
    cdef Py_ssize_t h = image.shape[0]
    cdef Py_ssize_t w = image.shape[1]
    cdef double[:, ::1] Rv = Rm
    cdef double[::1] tvv = tv
    cdef Py_ssize_t i, k
    cdef double X, Y, Z, xc, yc, zc, u, v, iz
    cdef double ic, gxi, gyi, dx, dy, dz
    cdef double dr0, dr1, dr2

    for i in range(n):
        X = pts[i, 0]
        Y = pts[i, 1]
        Z = pts[i, 2]
        xc = Rv[0, 0] * X + Rv[0, 1] * Y + Rv[0, 2] * Z + tvv[0]
        yc = Rv[1, 0] * X + Rv[1, 1] * Y + Rv[1, 2] * Z + tvv[1]
        zc = Rv[2, 0] * X + Rv[2, 1] * Y + Rv[2, 2] * Z + tvv[2]
        if zc <= 1e-6:
            continue
        iz = 1.0 / zc
        u = fx * xc * iz + cx
        v = fy * yc * iz + cy
        if u < 1.0 or u > w - 2.0 or v < 1.0 or v > h - 2.0:
            continue
        valid[i] = 1
        ic = _sample(image, u, v)
        gxi = _sample(gx, u, v)
        gyi = _sample(gy, u, v)
        r[i] = ref_int[i] - ic
        dx = gxi * fx * iz
        dy = gyi * fy * iz
        dz = -(gxi * fx * xc + gyi * fy * yc) * iz * iz
        J[i, 0] = -dx
        J[i, 1] = -dy
        J[i, 2] = -dz
        # row of (dI @ R) then cross with the reference point
        dr0 = dx * Rv[0, 0] + dy * Rv[1, 0] + dz * Rv[2, 0]
        dr1 = dx * Rv[0, 1] + dy * Rv[1, 1] + dz * Rv[2, 1]
        dr2 = dx * Rv[0, 2] + dy * Rv[1, 2] + dz * Rv[2, 2]
        J[i, 3] = dr1 * Z - dr2 * Y
        J[i, 4] = dr2 * X - dr0 * Z
        J[i, 5] = dr0 * Y - dr1 * X
    return r, J, valid.astype(bool)


def ssd_scores(double[:, ::1] image, double[::1] px, double[::1] py,
               double[::1] du, double[::1] dv, double[::1] ref_vals):
    """Pattern SSD at candidate positions; +inf when the pattern leaves the image."""
    cdef Py_ssize_t s = px.shape[0]
    cdef Py_ssize_t p = du.shape[0]
    cdef cnp.ndarray[double, ndim=1] out = np.empty(s, dtype=np.float64)
    cdef Py_ssize_t h = image.shape[0]
    cdef Py_ssize_t w = image.shape[1]
    cdef Py_ssize_t i, j
    cdef double acc, x, y, d
    cdef bint ok
    for i in range(s):
        acc = 0.0
        ok = True
        for j in range(p):
            x = px[i] + du[j]
            y = py[i] + dv[j]
            if x < 0 or x > w - 1 or y < 0 or y > h - 1:
                ok = False
                break
            if x > w - 1.000001:
                x = w - 1.000001
            if y > h - 1.000001:
                y = h - 1.000001
            d = _sample(image, x, y) - ref_vals[j]
            acc += d * d
        out[i] = acc if ok else INFINITY
    return out
