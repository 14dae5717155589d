"""Oriented-rectangle geometry and the map model with its signed-distance
field.

The signed distance convention is positive strictly inside the drivable
union and negative outside; queries between grid nodes are bilinear, which
keeps the off-road potential differentiable almost everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import shapely

from advtraffic._kernels_py import _corners as _corners_impl
from advtraffic.backend import kernels
from advtraffic.errors import OutOfExtent, SchemaViolation

MAP_FORMAT_VERSION = 1
DEFAULT_GRID_RESOLUTION = 0.2
DEFAULT_GRID_PADDING = 8.0
DEFAULT_OFFROAD_SIGMA = 0.7


@dataclass(frozen=True)
class OrientedBox:
    """Rectangle with center, heading, and half extents."""

    center: np.ndarray
    heading: float
    half_length: float
    half_width: float

    def __post_init__(self):
        if self.half_length <= 0.0 or self.half_width <= 0.0:
            raise ValueError("box extents must be positive")
        c = np.array(self.center, dtype=np.float64)
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "heading", float(self.heading))

    def pose_row(self) -> np.ndarray:
        return np.array([self.center[0], self.center[1], self.heading])

    def dims_row(self) -> np.ndarray:
        return np.array([self.half_length, self.half_width])

    def corners(self) -> np.ndarray:
        """World corners (4, 2), order FL, RL, RR, FR."""
        return box_corners(self.pose_row()[None, :], self.dims_row()[None, :])[0]


def box_corners(poses: np.ndarray, dims: np.ndarray) -> np.ndarray:
    """Corners (K, 4, 2) for K boxes given as poses (K, 3) and dims (K, 2)."""
    return _corners_impl(np.asarray(poses, dtype=np.float64),
                         np.asarray(dims, dtype=np.float64))


@dataclass(frozen=True)
class BoxGradient:
    """Derivative of a box-pair distance wrt one box's center and heading."""

    d_center: np.ndarray
    d_heading: float


def box_distance_arrays(poses_a, dims_a, poses_b, dims_b):
    """Batched pair distances with witness points.

    Returns (dist (K,), witness_a (K, 2), witness_b (K, 2)); overlapping
    pairs report distance 0.
    """
    poses_a = np.ascontiguousarray(poses_a, dtype=np.float64)
    poses_b = np.ascontiguousarray(poses_b, dtype=np.float64)
    dims_a = np.ascontiguousarray(dims_a, dtype=np.float64)
    dims_b = np.ascontiguousarray(dims_b, dtype=np.float64)
    k = len(poses_a)
    out_d = np.empty(k)
    out_wa = np.empty((k, 2))
    out_wb = np.empty((k, 2))
    kernels.box_distance_batch(poses_a, dims_a, poses_b, dims_b,
                               out_d, out_wa, out_wb)
    return out_d, out_wa, out_wb


def boxes_overlap_arrays(poses_a, dims_a, poses_b, dims_b) -> np.ndarray:
    poses_a = np.ascontiguousarray(poses_a, dtype=np.float64)
    poses_b = np.ascontiguousarray(poses_b, dtype=np.float64)
    dims_a = np.ascontiguousarray(dims_a, dtype=np.float64)
    dims_b = np.ascontiguousarray(dims_b, dtype=np.float64)
    out = np.empty(len(poses_a), dtype=np.uint8)
    kernels.overlap_batch(poses_a, dims_a, poses_b, dims_b, out)
    return out.astype(bool)


def pair_distance_gradients(dist, wa, wb, poses_a, poses_b):
    """Envelope-rule gradients of batched pair distances.

    The active closest-point pair is held fixed; each witness moves rigidly
    with its box, so the distance gradient wrt a pose is the unit separation
    vector (and its moment for the heading). Overlapping pairs (dist == 0)
    get zero gradients.

    Returns (grad_pose_a (K, 3), grad_pose_b (K, 3)) with columns
    [d/dx, d/dy, d/dheading].
    """
    k = len(dist)
    ga = np.zeros((k, 3))
    gb = np.zeros((k, 3))
    ok = dist > 0.0
    if not ok.any():
        return ga, gb
    u = np.zeros((k, 2))
    u[ok] = (wa[ok] - wb[ok]) / dist[ok, None]
    ra = wa - poses_a[:, :2]
    rb = wb - poses_b[:, :2]
    ga[:, :2] = np.where(ok[:, None], u, 0.0)
    gb[:, :2] = -ga[:, :2]
    # d witness / d heading is the perpendicular of its body offset.
    ga[:, 2] = np.where(ok, u[:, 0] * -ra[:, 1] + u[:, 1] * ra[:, 0], 0.0)
    gb[:, 2] = np.where(ok, -(u[:, 0] * -rb[:, 1] + u[:, 1] * rb[:, 0]), 0.0)
    return ga, gb


def box_distance(a: OrientedBox, b: OrientedBox):
    """Distance between two boxes plus envelope-rule gradients.

    Returns (distance, grad_a, grad_b) where the gradients cover each box's
    center and heading. Distance and gradients are 0 when the boxes overlap.
    """
    d, wa, wb = box_distance_arrays(a.pose_row()[None], a.dims_row()[None],
                                    b.pose_row()[None], b.dims_row()[None])
    ga, gb = pair_distance_gradients(d, wa, wb, a.pose_row()[None],
                                     b.pose_row()[None])
    return (
        float(d[0]),
        BoxGradient(d_center=ga[0, :2], d_heading=float(ga[0, 2])),
        BoxGradient(d_center=gb[0, :2], d_heading=float(gb[0, 2])),
    )


def boxes_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis test; grazing contact counts as overlap."""
    return bool(boxes_overlap_arrays(a.pose_row()[None], a.dims_row()[None],
                                     b.pose_row()[None], b.dims_row()[None])[0])


class MapModel:
    """Drivable-area polygons plus a precomputed signed-distance grid."""

    def __init__(self, map_id: str, drivable: Sequence[np.ndarray],
                 routes: Optional[Dict[str, np.ndarray]] = None,
                 resolution: float = DEFAULT_GRID_RESOLUTION,
                 padding: float = DEFAULT_GRID_PADDING):
        self.map_id = map_id
        self.drivable = [np.asarray(p, dtype=np.float64) for p in drivable]
        for i, poly in enumerate(self.drivable):
            if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
                raise ValueError(f"drivable[{i}] is not a polygon")
        self.routes = {k: np.asarray(v, dtype=np.float64)
                       for k, v in (routes or {}).items()}
        self.grid_resolution = float(resolution)
        self._union = shapely.unary_union(
            [shapely.Polygon(p) for p in self.drivable]
        )
        if self._union.is_empty:
            raise ValueError("drivable union is empty")
        self._build_grid(padding)

    def _build_grid(self, padding: float) -> None:
        minx, miny, maxx, maxy = self._union.bounds
        res = self.grid_resolution
        self.grid_origin = np.array([minx - padding, miny - padding])
        nx = int(np.ceil((maxx + padding - self.grid_origin[0]) / res)) + 1
        ny = int(np.ceil((maxy + padding - self.grid_origin[1]) / res)) + 1
        xs = self.grid_origin[0] + res * np.arange(nx)
        ys = self.grid_origin[1] + res * np.arange(ny)
        gx, gy = np.meshgrid(xs, ys)
        pts = shapely.points(gx.ravel(), gy.ravel())
        dist = shapely.distance(pts, self._union.boundary)
        inside = shapely.contains(self._union, pts)
        sdf = np.where(inside, dist, -dist).reshape(ny, nx)
        self.sdf_grid = np.ascontiguousarray(sdf)

    @property
    def drivable_union(self):
        """Shapely geometry of the drivable area (exact queries)."""
        return self._union

    def contains_point(self, p) -> bool:
        return bool(shapely.contains(self._union, shapely.Point(p[0], p[1])))

    def sdf(self, points: np.ndarray, with_grad: bool = False):
        """Interpolated signed distance at (K, 2) points."""
        points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        out_v = np.empty(len(points))
        if not with_grad:
            kernels.sdf_batch(self.sdf_grid, self.grid_origin[0],
                              self.grid_origin[1], self.grid_resolution,
                              points, out_v)
            return out_v
        out_g = np.empty((len(points), 2))
        kernels.sdf_batch(self.sdf_grid, self.grid_origin[0],
                          self.grid_origin[1], self.grid_resolution,
                          points, out_v, out_g)
        return out_v, out_g

    def in_extent(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        ny, nx = self.sdf_grid.shape
        hi = self.grid_origin + self.grid_resolution * np.array([nx - 1, ny - 1])
        return ((points >= self.grid_origin) & (points <= hi)).all(axis=1)

    def to_json_dict(self) -> dict:
        return {
            "version": MAP_FORMAT_VERSION,
            "map_id": self.map_id,
            "drivable": [p.tolist() for p in self.drivable],
            "routes": {k: v.tolist() for k, v in self.routes.items()},
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)

    @classmethod
    def load(cls, path, resolution: float = DEFAULT_GRID_RESOLUTION) -> "MapModel":
        """Read the map JSON; the SDF grid is rebuilt, never stored."""
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict) or data.get("version") != MAP_FORMAT_VERSION:
            raise SchemaViolation("$.version", "unsupported or missing version")
        if "map_id" not in data or not isinstance(data["map_id"], str):
            raise SchemaViolation("$.map_id", "expected str")
        if "drivable" not in data or not isinstance(data["drivable"], list):
            raise SchemaViolation("$.drivable", "expected list of polygons")
        routes = data.get("routes", {})
        if not isinstance(routes, dict):
            raise SchemaViolation("$.routes", "expected object")
        return cls(
            map_id=data["map_id"],
            drivable=[np.array(p, dtype=np.float64) for p in data["drivable"]],
            routes={k: np.array(v, dtype=np.float64) for k, v in routes.items()},
            resolution=resolution,
        )


def offroad_field(map_model: MapModel, p, sigma: float = DEFAULT_OFFROAD_SIGMA,
                  clamp: bool = True):
    """Gaussian off-road potential and its gradient at one point.

    Value is exp(-max(sdf, 0)^2 / (2 sigma^2)): 1 on the boundary and
    everywhere off-road, decaying into the drivable interior. The gradient
    is analytic through the bilinear interpolation and vanishes on the
    off-road plateau.
    """
    p = np.asarray(p, dtype=np.float64)
    if not clamp and not map_model.in_extent(p)[0]:
        raise OutOfExtent(f"point {p.tolist()} outside the SDF grid")
    value, grad = offroad_field_arrays(map_model, p[None, :], sigma)
    return float(value[0]), grad[0]


def offroad_field_arrays(map_model: MapModel, points: np.ndarray, sigma: float):
    """Batched off-road potential; returns (values (K,), grads (K, 2))."""
    sd, sd_grad = map_model.sdf(points, with_grad=True)
    inside = np.maximum(sd, 0.0)
    value = np.exp(-(inside ** 2) / (2.0 * sigma * sigma))
    coeff = np.where(sd > 0.0, -inside / (sigma * sigma) * value, 0.0)
    return value, coeff[:, None] * sd_grad


def box_offroad_violation(map_model: MapModel, box: OrientedBox) -> bool:
    """True if any corner or the center has interpolated sdf < 0."""
    pts = np.vstack([box.corners(), box.center[None, :]])
    return bool((map_model.sdf(pts) < 0.0).any())


def boxes_offroad_violation_arrays(map_model: MapModel, poses: np.ndarray,
                                   dims: np.ndarray) -> np.ndarray:
    """Vectorized corner+center off-road check for K boxes."""
    corners = box_corners(poses, dims)
    pts = np.concatenate([corners.reshape(-1, 2), poses[:, :2]], axis=0)
    sd = map_model.sdf(pts)
    k = len(poses)
    return (sd[: 4 * k].reshape(k, 4) < 0.0).any(axis=1) | (sd[4 * k:] < 0.0)
