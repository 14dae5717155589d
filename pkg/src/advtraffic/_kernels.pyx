# Compiled simulation kernels. Semantics mirror _kernels_py exactly,
# including corner ordering and argmin tie-breaking; the pure-numpy module
# is the reference implementation.

import numpy as np

cimport numpy as cnp
from libc.math cimport atan, cos, fabs, floor, fmod, sin, sqrt, tan

cnp.import_array()

cdef double TWO_PI = 6.283185307179586476925287


def step_batch(const double[:, ::1] states, const double[:, ::1] actions,
               double lf, double lr, double max_steer,
               double max_accel, double max_brake, double dt,
               double[:, ::1] out_next,
               double[:, :, ::1] out_js=None,
               double[:, :, ::1] out_ja=None):
    cdef Py_ssize_t m, i, j, M = states.shape[0]
    cdef double x, y, psi, v, throttle, steer
    cdef double ratio = lr / (lf + lr)
    cdef double delta, tan_d, beta, course, cos_c, sin_c, sin_b
    cdef double gain, v_raw, psi_new, dbeta
    cdef bint jac_s = out_js is not None
    cdef bint jac_a = out_ja is not None

    for m in range(M):
        x = states[m, 0]
        y = states[m, 1]
        psi = states[m, 2]
        v = states[m, 3]
        throttle = actions[m, 0]
        steer = actions[m, 1]

        delta = steer * max_steer
        tan_d = tan(delta)
        beta = atan(ratio * tan_d)
        course = psi + beta
        cos_c = cos(course)
        sin_c = sin(course)
        sin_b = sin(beta)

        gain = max_accel if throttle >= 0.0 else max_brake
        v_raw = v + throttle * gain * dt

        out_next[m, 0] = x + v * cos_c * dt
        out_next[m, 1] = y + v * sin_c * dt
        psi_new = fmod(psi + (v / lr) * sin_b * dt, TWO_PI)
        if psi_new < 0.0:
            psi_new += TWO_PI
        out_next[m, 2] = psi_new
        out_next[m, 3] = v_raw if v_raw > 0.0 else 0.0

        if jac_s:
            for i in range(4):
                for j in range(4):
                    out_js[m, i, j] = 0.0
            out_js[m, 0, 0] = 1.0
            out_js[m, 1, 1] = 1.0
            out_js[m, 2, 2] = 1.0
            out_js[m, 0, 2] = -v * sin_c * dt
            out_js[m, 0, 3] = cos_c * dt
            out_js[m, 1, 2] = v * cos_c * dt
            out_js[m, 1, 3] = sin_c * dt
            out_js[m, 2, 3] = sin_b / lr * dt
            out_js[m, 3, 3] = 1.0 if v_raw > 0.0 else 0.0

        if jac_a:
            for i in range(4):
                for j in range(2):
                    out_ja[m, i, j] = 0.0
            dbeta = max_steer * ratio * (1.0 + tan_d * tan_d) \
                / (1.0 + ratio * ratio * tan_d * tan_d)
            out_ja[m, 0, 1] = -v * sin_c * dt * dbeta
            out_ja[m, 1, 1] = v * cos_c * dt * dbeta
            out_ja[m, 2, 1] = (v / lr) * cos(beta) * dt * dbeta
            out_ja[m, 3, 0] = gain * dt if v_raw > 0.0 else 0.0


cdef inline void _box_corners(double px, double py, double psi,
                              double hl, double hw,
                              double* cx, double* cy) noexcept nogil:
    # Corner order FL, RL, RR, FR (matches _kernels_py._CORNER_SIGNS).
    cdef double c = cos(psi)
    cdef double s = sin(psi)
    cx[0] = px + hl * c - hw * s
    cy[0] = py + hl * s + hw * c
    cx[1] = px - hl * c - hw * s
    cy[1] = py - hl * s + hw * c
    cx[2] = px - hl * c + hw * s
    cy[2] = py - hl * s - hw * c
    cx[3] = px + hl * c + hw * s
    cy[3] = py + hl * s - hw * c


cdef inline bint _sat_overlap(double* ax_arr, double* ay_arr,
                              double* bx_arr, double* by_arr,
                              double psi_a, double psi_b) noexcept nogil:
    cdef double axes_x[4]
    cdef double axes_y[4]
    cdef double lo_a, hi_a, lo_b, hi_b, p
    cdef Py_ssize_t k, i
    axes_x[0] = cos(psi_a)
    axes_y[0] = sin(psi_a)
    axes_x[1] = -axes_y[0]
    axes_y[1] = axes_x[0]
    axes_x[2] = cos(psi_b)
    axes_y[2] = sin(psi_b)
    axes_x[3] = -axes_y[2]
    axes_y[3] = axes_x[2]
    for k in range(4):
        lo_a = hi_a = ax_arr[0] * axes_x[k] + ay_arr[0] * axes_y[k]
        lo_b = hi_b = bx_arr[0] * axes_x[k] + by_arr[0] * axes_y[k]
        for i in range(1, 4):
            p = ax_arr[i] * axes_x[k] + ay_arr[i] * axes_y[k]
            if p < lo_a:
                lo_a = p
            elif p > hi_a:
                hi_a = p
            p = bx_arr[i] * axes_x[k] + by_arr[i] * axes_y[k]
            if p < lo_b:
                lo_b = p
            elif p > hi_b:
                hi_b = p
        if hi_a < lo_b or hi_b < lo_a:
            return 0
    return 1


def overlap_batch(const double[:, ::1] poses_a, const double[:, ::1] dims_a,
                  const double[:, ::1] poses_b, const double[:, ::1] dims_b,
                  cnp.uint8_t[::1] out):
    cdef Py_ssize_t k, K = poses_a.shape[0]
    cdef double ax[4]
    cdef double ay[4]
    cdef double bx[4]
    cdef double by[4]
    for k in range(K):
        _box_corners(poses_a[k, 0], poses_a[k, 1], poses_a[k, 2],
                     dims_a[k, 0], dims_a[k, 1], ax, ay)
        _box_corners(poses_b[k, 0], poses_b[k, 1], poses_b[k, 2],
                     dims_b[k, 0], dims_b[k, 1], bx, by)
        out[k] = _sat_overlap(ax, ay, bx, by, poses_a[k, 2], poses_b[k, 2])


cdef inline double _pt_seg(double px, double py,
                           double ax, double ay, double bx, double by,
                           double* qx, double* qy) noexcept nogil:
    cdef double dx = bx - ax
    cdef double dy = by - ay
    cdef double len2 = dx * dx + dy * dy
    cdef double t
    if len2 < 1e-300:
        t = 0.0
    else:
        t = ((px - ax) * dx + (py - ay) * dy) / len2
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    qx[0] = ax + t * dx
    qy[0] = ay + t * dy
    dx = px - qx[0]
    dy = py - qy[0]
    return sqrt(dx * dx + dy * dy)


def box_distance_batch(const double[:, ::1] poses_a, const double[:, ::1] dims_a,
                       const double[:, ::1] poses_b, const double[:, ::1] dims_b,
                       double[::1] out_d, double[:, ::1] out_wa,
                       double[:, ::1] out_wb):
    cdef Py_ssize_t k, i, j, K = poses_a.shape[0]
    cdef double ax[4]
    cdef double ay[4]
    cdef double bx[4]
    cdef double by[4]
    cdef double best, d, qx, qy, bwa_x, bwa_y, bwb_x, bwb_y
    for k in range(K):
        _box_corners(poses_a[k, 0], poses_a[k, 1], poses_a[k, 2],
                     dims_a[k, 0], dims_a[k, 1], ax, ay)
        _box_corners(poses_b[k, 0], poses_b[k, 1], poses_b[k, 2],
                     dims_b[k, 0], dims_b[k, 1], bx, by)
        if _sat_overlap(ax, ay, bx, by, poses_a[k, 2], poses_b[k, 2]):
            out_d[k] = 0.0
            out_wa[k, 0] = out_wb[k, 0] = 0.5 * (poses_a[k, 0] + poses_b[k, 0])
            out_wa[k, 1] = out_wb[k, 1] = 0.5 * (poses_a[k, 1] + poses_b[k, 1])
            continue
        best = -1.0
        bwa_x = bwa_y = bwb_x = bwb_y = 0.0
        for i in range(4):          # corners of A vs edges of B
            for j in range(4):
                d = _pt_seg(ax[i], ay[i], bx[j], by[j],
                            bx[(j + 1) % 4], by[(j + 1) % 4], &qx, &qy)
                if best < 0.0 or d < best:
                    best = d
                    bwa_x = ax[i]
                    bwa_y = ay[i]
                    bwb_x = qx
                    bwb_y = qy
        for i in range(4):          # corners of B vs edges of A
            for j in range(4):
                d = _pt_seg(bx[i], by[i], ax[j], ay[j],
                            ax[(j + 1) % 4], ay[(j + 1) % 4], &qx, &qy)
                if d < best:
                    best = d
                    bwa_x = qx
                    bwa_y = qy
                    bwb_x = bx[i]
                    bwb_y = by[i]
        out_d[k] = best
        out_wa[k, 0] = bwa_x
        out_wa[k, 1] = bwa_y
        out_wb[k, 0] = bwb_x
        out_wb[k, 1] = bwb_y


def sdf_batch(const double[:, ::1] grid, double origin_x, double origin_y,
              double resolution, const double[:, ::1] points,
              double[::1] out_v, double[:, ::1] out_g=None):
    cdef Py_ssize_t k, K = points.shape[0]
    cdef Py_ssize_t ny = grid.shape[0], nx = grid.shape[1]
    cdef Py_ssize_t ix, iy
    cdef double gx, gy, fx, fy, g00, g01, g10, g11, top, bot
    cdef bint in_x, in_y
    cdef bint want_g = out_g is not None
    for k in range(K):
        gx = (points[k, 0] - origin_x) / resolution
        gy = (points[k, 1] - origin_y) / resolution
        in_x = 0.0 <= gx <= nx - 1.0
        in_y = 0.0 <= gy <= ny - 1.0
        if gx < 0.0:
            gx = 0.0
        elif gx > nx - 1.0:
            gx = nx - 1.0
        if gy < 0.0:
            gy = 0.0
        elif gy > ny - 1.0:
            gy = ny - 1.0
        ix = <Py_ssize_t>floor(gx)
        iy = <Py_ssize_t>floor(gy)
        if ix > nx - 2:
            ix = nx - 2
        if iy > ny - 2:
            iy = ny - 2
        fx = gx - ix
        fy = gy - iy
        g00 = grid[iy, ix]
        g01 = grid[iy, ix + 1]
        g10 = grid[iy + 1, ix]
        g11 = grid[iy + 1, ix + 1]
        top = g00 * (1.0 - fx) + g01 * fx
        bot = g10 * (1.0 - fx) + g11 * fx
        out_v[k] = top * (1.0 - fy) + bot * fy
        if want_g:
            out_g[k, 0] = ((g01 - g00) * (1.0 - fy) + (g11 - g10) * fy) \
                / resolution if in_x else 0.0
            out_g[k, 1] = (bot - top) / resolution if in_y else 0.0
