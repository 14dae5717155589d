"""Polyline route utilities: arc-length parameterization, projection,
tangents, and curvature-limited target speeds."""

from __future__ import annotations

import numpy as np

from advtraffic.errors import RouteExhausted


class Route:
    """Arc-length view of a waypoint polyline."""

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("route must be an (R, 2) polyline with R >= 2")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        keep = np.concatenate([[True], seg_len > 1e-9])
        pts = pts[keep]
        if len(pts) < 2:
            raise ValueError("route has no extent")
        self.points = pts
        self._seg = np.diff(pts, axis=0)
        self._seg_len = np.hypot(self._seg[:, 0], self._seg[:, 1])
        self.cum = np.concatenate([[0.0], np.cumsum(self._seg_len)])
        self.length = float(self.cum[-1])
        self._curvature = self._vertex_curvature()

    def _vertex_curvature(self) -> np.ndarray:
        """Approximate unsigned curvature at interior vertices."""
        kappa = np.zeros(len(self.points))
        for i in range(1, len(self.points) - 1):
            a = self._seg[i - 1] / self._seg_len[i - 1]
            b = self._seg[i] / self._seg_len[i]
            turn = np.arctan2(a[0] * b[1] - a[1] * b[0], a @ b)
            ds = 0.5 * (self._seg_len[i - 1] + self._seg_len[i])
            kappa[i] = abs(turn) / max(ds, 1e-9)
        return kappa

    def project(self, p) -> tuple[float, bool]:
        """Arc length of the closest route point and a past-the-end flag."""
        p = np.asarray(p, dtype=np.float64)
        rel = p[None, :] - self.points[:-1]
        t = np.einsum('se,se->s', rel, self._seg) / (self._seg_len ** 2)
        t_clip = np.clip(t, 0.0, 1.0)
        proj = self.points[:-1] + t_clip[:, None] * self._seg
        d2 = ((p[None, :] - proj) ** 2).sum(axis=1)
        best = int(np.argmin(d2))
        s = float(self.cum[best] + t_clip[best] * self._seg_len[best])
        past_end = best == len(self._seg) - 1 and t[best] > 1.0
        return s, past_end

    def point_at(self, s: float) -> np.ndarray:
        s = float(np.clip(s, 0.0, self.length))
        i = int(np.searchsorted(self.cum, s, side='right')) - 1
        i = min(max(i, 0), len(self._seg) - 1)
        t = (s - self.cum[i]) / self._seg_len[i]
        return self.points[i] + t * self._seg[i]

    def tangent_at(self, s: float) -> np.ndarray:
        s = float(np.clip(s, 0.0, self.length))
        i = int(np.searchsorted(self.cum, s, side='right')) - 1
        i = min(max(i, 0), len(self._seg) - 1)
        return self._seg[i] / self._seg_len[i]

    def heading_at(self, s: float) -> float:
        t = self.tangent_at(s)
        return float(np.arctan2(t[1], t[0]))

    def speed_limit(self, s: float, lookahead: float,
                    cruise: float, lat_accel: float = 3.0) -> float:
        """Curvature-limited speed over [s, s + lookahead]."""
        lo, hi = s, s + lookahead
        limit = cruise
        for i in range(1, len(self.points) - 1):
            if lo - 2.0 <= self.cum[i] <= hi and self._curvature[i] > 1e-6:
                limit = min(limit, np.sqrt(lat_accel / self._curvature[i]))
        return float(max(limit, 0.5))

    def require_not_exhausted(self, p) -> float:
        """Project, raising RouteExhausted when past the final point."""
        s, past = self.project(p)
        if past:
            raise RouteExhausted("agent is past the final route point")
        return s


def polyline_min_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum distance between two polylines (dense segment sampling)."""
    ra, rb = Route(a), Route(b)
    sa = np.linspace(0.0, ra.length, max(int(ra.length / 0.5), 2))
    sb = np.linspace(0.0, rb.length, max(int(rb.length / 0.5), 2))
    pa = np.stack([ra.point_at(s) for s in sa])
    pb = np.stack([rb.point_at(s) for s in sb])
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min()))
