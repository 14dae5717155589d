"""Pure-numpy implementations of the hot simulation kernels.

Fallback backend used when the compiled extension is unavailable (or when
ADVTRAFFIC_PURE_PYTHON=1). Function signatures and numerical semantics match
advtraffic._kernels exactly, including argmin tie-breaking.
"""

import numpy as np

TWO_PI = 2.0 * np.pi

# Body-frame corner order shared by both backends: FL, RL, RR, FR.
_CORNER_SIGNS = np.array(
    [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]]
)


def step_batch(states, actions, lf, lr, max_steer, max_accel, max_brake, dt,
               out_next, out_js=None, out_ja=None):
    """Advance M agents one bicycle-model step.

    states: (M, 4) rows [x, y, heading, speed]; actions: (M, 2) rows
    [throttle, steer]. Writes the next state into out_next and, when the
    output buffers are given, the exact step Jacobians wrt state (M, 4, 4)
    and action (M, 4, 2). The speed clamp at zero uses subgradient 0.
    """
    x = states[:, 0]
    y = states[:, 1]
    psi = states[:, 2]
    v = states[:, 3]
    throttle = actions[:, 0]
    steer = actions[:, 1]

    ratio = lr / (lf + lr)
    delta = steer * max_steer
    tan_d = np.tan(delta)
    beta = np.arctan(ratio * tan_d)
    course = psi + beta
    cos_c = np.cos(course)
    sin_c = np.sin(course)
    sin_b = np.sin(beta)

    gain = np.where(throttle >= 0.0, max_accel, max_brake)
    v_raw = v + throttle * gain * dt
    moving = v_raw > 0.0

    out_next[:, 0] = x + v * cos_c * dt
    out_next[:, 1] = y + v * sin_c * dt
    out_next[:, 2] = np.mod(psi + (v / lr) * sin_b * dt, TWO_PI)
    out_next[:, 3] = np.where(moving, v_raw, 0.0)

    if out_js is not None:
        out_js[:] = 0.0
        out_js[:, 0, 0] = 1.0
        out_js[:, 1, 1] = 1.0
        out_js[:, 2, 2] = 1.0
        out_js[:, 0, 2] = -v * sin_c * dt
        out_js[:, 0, 3] = cos_c * dt
        out_js[:, 1, 2] = v * cos_c * dt
        out_js[:, 1, 3] = sin_c * dt
        out_js[:, 2, 3] = sin_b / lr * dt
        out_js[:, 3, 3] = np.where(moving, 1.0, 0.0)

    if out_ja is not None:
        out_ja[:] = 0.0
        dbeta_dsteer = max_steer * ratio * (1.0 + tan_d * tan_d) \
            / (1.0 + (ratio * tan_d) ** 2)
        out_ja[:, 0, 1] = -v * sin_c * dt * dbeta_dsteer
        out_ja[:, 1, 1] = v * cos_c * dt * dbeta_dsteer
        out_ja[:, 2, 1] = (v / lr) * np.cos(beta) * dt * dbeta_dsteer
        out_ja[:, 3, 0] = np.where(moving, gain * dt, 0.0)


def _corners(poses, dims):
    """World-frame corners (K, 4, 2) of oriented boxes."""
    c = np.cos(poses[:, 2])
    s = np.sin(poses[:, 2])
    local = _CORNER_SIGNS[None, :, :] * dims[:, None, :]
    cx = poses[:, 0, None] + local[:, :, 0] * c[:, None] - local[:, :, 1] * s[:, None]
    cy = poses[:, 1, None] + local[:, :, 0] * s[:, None] + local[:, :, 1] * c[:, None]
    return np.stack([cx, cy], axis=-1)


def _project_overlap(corners_a, corners_b, axes):
    """True per pair if projections onto every axis overlap (touch counts)."""
    pa = np.einsum('kce,kae->kac', corners_a, axes)
    pb = np.einsum('kce,kae->kac', corners_b, axes)
    sep = (pa.max(axis=2) < pb.min(axis=2)) | (pb.max(axis=2) < pa.min(axis=2))
    return ~sep.any(axis=1)


def overlap_batch(poses_a, dims_a, poses_b, dims_b, out):
    """Separating-axis test over the 4 candidate axes of K box pairs."""
    ca = _corners(poses_a, dims_a)
    cb = _corners(poses_b, dims_b)
    axes = np.empty((len(poses_a), 4, 2))
    for src, off in ((poses_a, 0), (poses_b, 2)):
        c = np.cos(src[:, 2])
        s = np.sin(src[:, 2])
        axes[:, off, 0] = c
        axes[:, off, 1] = s
        axes[:, off + 1, 0] = -s
        axes[:, off + 1, 1] = c
    out[:] = _project_overlap(ca, cb, axes)


def _point_segment(points, seg_a, seg_b):
    """Closest points on segments for a (K, P, S) grid of point/segment pairs.

    points: (K, P, 2); seg_a/seg_b: (K, S, 2). Returns (dist (K, P, S),
    closest (K, P, S, 2)).
    """
    d = seg_b - seg_a
    len2 = np.einsum('kse,kse->ks', d, d)
    rel = points[:, :, None, :] - seg_a[:, None, :, :]
    t = np.einsum('kpse,kse->kps', rel, d) / np.maximum(len2[:, None, :], 1e-300)
    t = np.clip(t, 0.0, 1.0)
    closest = seg_a[:, None, :, :] + t[..., None] * d[:, None, :, :]
    diff = points[:, :, None, :] - closest
    dist = np.sqrt(np.einsum('kpse,kpse->kps', diff, diff))
    return dist, closest


def box_distance_batch(poses_a, dims_a, poses_b, dims_b, out_d, out_wa, out_wb):
    """Distance between K oriented box pairs with closest-point witnesses.

    Overlapping pairs get distance 0 and coincident witnesses at the center
    midpoint. Otherwise the minimum over the 32 corner-to-edge candidates is
    taken, first corners of A against edges of B, then corners of B against
    edges of A, ties resolved by the first candidate in that order.
    """
    K = len(poses_a)
    ca = _corners(poses_a, dims_a)
    cb = _corners(poses_b, dims_b)
    ea0, ea1 = ca, np.roll(ca, -1, axis=1)
    eb0, eb1 = cb, np.roll(cb, -1, axis=1)

    d_ab, q_ab = _point_segment(ca, eb0, eb1)          # corner of A vs edge of B
    d_ba, q_ba = _point_segment(cb, ea0, ea1)          # corner of B vs edge of A

    dists = np.concatenate([d_ab.reshape(K, 16), d_ba.reshape(K, 16)], axis=1)
    wa = np.concatenate(
        [np.broadcast_to(ca[:, :, None, :], (K, 4, 4, 2)).reshape(K, 16, 2),
         q_ba.reshape(K, 16, 2)], axis=1)
    wb = np.concatenate(
        [q_ab.reshape(K, 16, 2),
         np.broadcast_to(cb[:, :, None, :], (K, 4, 4, 2)).reshape(K, 16, 2)],
        axis=1)

    best = np.argmin(dists, axis=1)
    rows = np.arange(K)
    out_d[:] = dists[rows, best]
    out_wa[:] = wa[rows, best]
    out_wb[:] = wb[rows, best]

    overlap = np.empty(K, dtype=np.uint8)
    overlap_batch(poses_a, dims_a, poses_b, dims_b, overlap)
    hit = overlap.astype(bool)
    if hit.any():
        mid = 0.5 * (poses_a[hit, :2] + poses_b[hit, :2])
        out_d[hit] = 0.0
        out_wa[hit] = mid
        out_wb[hit] = mid


def sdf_batch(grid, origin_x, origin_y, resolution, points, out_v, out_g=None):
    """Bilinear interpolation of a signed-distance grid at K points.

    Points outside the grid extent are clamped to the edge; the gradient is
    zeroed along any clamped coordinate. grid is indexed [iy, ix].
    """
    ny, nx = grid.shape
    gx = (points[:, 0] - origin_x) / resolution
    gy = (points[:, 1] - origin_y) / resolution
    in_x = (gx >= 0.0) & (gx <= nx - 1.0)
    in_y = (gy >= 0.0) & (gy <= ny - 1.0)
    gx = np.clip(gx, 0.0, nx - 1.0)
    gy = np.clip(gy, 0.0, ny - 1.0)
    ix = np.minimum(gx.astype(np.int64), nx - 2)
    iy = np.minimum(gy.astype(np.int64), ny - 2)
    fx = gx - ix
    fy = gy - iy

    g00 = grid[iy, ix]
    g01 = grid[iy, ix + 1]
    g10 = grid[iy + 1, ix]
    g11 = grid[iy + 1, ix + 1]
    top = g00 * (1.0 - fx) + g01 * fx
    bot = g10 * (1.0 - fx) + g11 * fx
    out_v[:] = top * (1.0 - fy) + bot * fy
    if out_g is not None:
        dx = ((g01 - g00) * (1.0 - fy) + (g11 - g10) * fy) / resolution
        dy = (bot - top) / resolution
        out_g[:, 0] = np.where(in_x, dx, 0.0)
        out_g[:, 1] = np.where(in_y, dy, 0.0)
