"""Composite adversarial objective over a rolled-out state sequence.

All three potentials operate on a realized state array S of shape
(L, M, 4) with agent 0 the ego, and return analytic gradient blocks of shape
(L, M, 4) whose position and heading columns are populated (cost never
depends on speed directly). Gradients for the ego rows are produced but the
direct-path optimizer never consumes them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from advtraffic.errors import NoAdversaries
from advtraffic.geometry import (MapModel, box_distance_arrays,
                                 offroad_field_arrays,
                                 pair_distance_gradients)


@dataclass(frozen=True)
class CostWeights:
    """Objective weights: adversary-collision, off-road, and their scales."""

    adv_col_weight: float = 1.0      # weight on the adversary repulsion term
    offroad_weight: float = 1.0      # weight on the drivable-area term
    repulsion_threshold: float = 2.0  # meters; repulsion active below this
    offroad_sigma: float = 0.7       # meters; width of the off-road potential

    def __post_init__(self):
        if self.adv_col_weight < 0.0 or self.offroad_weight < 0.0:
            raise ValueError("weights must be non-negative")
        if self.repulsion_threshold <= 0.0 or self.offroad_sigma <= 0.0:
            raise ValueError("threshold and sigma must be positive")


@dataclass(frozen=True)
class CostBreakdown:
    ego_term: float
    adv_col_term: float
    dev_term: float
    total: float
    d_cost_d_state: np.ndarray  # (L, M, 4)


def _pair_distances(states, dims, idx_a, idx_b):
    """Distances and witnesses for agent pairs over every timestep.

    states: (L, M, 4). idx_a/idx_b: (P,) agent indices. Returns
    (dist (L, P), wa (L, P, 2), wb (L, P, 2)).
    """
    L = states.shape[0]
    P = len(idx_a)
    poses_a = states[:, idx_a, :3].reshape(L * P, 3)
    poses_b = states[:, idx_b, :3].reshape(L * P, 3)
    dims_a = np.broadcast_to(dims[idx_a], (L, P, 2)).reshape(L * P, 2)
    dims_b = np.broadcast_to(dims[idx_b], (L, P, 2)).reshape(L * P, 2)
    d, wa, wb = box_distance_arrays(poses_a, dims_a, poses_b, dims_b)
    return d.reshape(L, P), wa.reshape(L, P, 2), wb.reshape(L, P, 2)


def phi_ego(states: np.ndarray, dims: np.ndarray, horizon: int | None = None):
    """Attractive term: minimum over adversaries of the time-mean ego
    distance.

    The mean uses 1 / (horizon + 1) with the full planned horizon, so early
    truncation strictly removes positive terms. Gradients flow only to the
    arg-min adversary (ties to the lowest index) and to the ego rows.
    """
    L, M = states.shape[:2]
    if M < 2:
        raise NoAdversaries("phi_ego needs at least one adversary")
    if horizon is None:
        horizon = L - 1
    adv = np.arange(1, M)
    ego = np.zeros(M - 1, dtype=np.intp)
    dist, wa, wb = _pair_distances(states, dims, ego, adv)

    prefactor = 1.0 / (horizon + 1)
    means = dist.sum(axis=0) * prefactor
    best = int(np.argmin(means))
    value = float(means[best])

    grads = np.zeros((L, M, 4))
    poses_e = states[:, 0, :3]
    poses_a = states[:, 1 + best, :3]
    ge, ga = pair_distance_gradients(dist[:, best], wa[:, best], wb[:, best],
                                     poses_e, poses_a)
    grads[:, 0, :3] = ge * prefactor
    grads[:, 1 + best, :3] = ga * prefactor
    return value, grads


def phi_adv_col(states: np.ndarray, dims: np.ndarray, tau: float):
    """Thresholded repulsion: negative of the clipped global minimum pair
    distance among adversaries.

    Gradients flow only to the arg-min pair at the arg-min timestep (lowest
    pair index, then lowest timestep) and only when the minimum is below the
    threshold.
    """
    L, M = states.shape[:2]
    grads = np.zeros((L, M, 4))
    n_adv = M - 1
    if n_adv < 2:
        return -tau, grads

    idx_a, idx_b = np.triu_indices(n_adv, k=1)
    idx_a = idx_a + 1
    idx_b = idx_b + 1
    dist, wa, wb = _pair_distances(states, dims, idx_a, idx_b)

    flat = np.argmin(dist.T.reshape(-1))  # pair-major: lowest pair, then t
    p_star, t_star = divmod(int(flat), L)
    d_min = float(dist[t_star, p_star])
    value = -min(d_min, tau)
    if d_min < tau:
        i, j = int(idx_a[p_star]), int(idx_b[p_star])
        gi, gj = pair_distance_gradients(
            dist[t_star:t_star + 1, p_star],
            wa[t_star:t_star + 1, p_star],
            wb[t_star:t_star + 1, p_star],
            states[t_star:t_star + 1, i, :3],
            states[t_star:t_star + 1, j, :3],
        )
        grads[t_star, i, :3] = -gi[0]
        grads[t_star, j, :3] = -gj[0]
    return value, grads


def phi_dev(states: np.ndarray, dims: np.ndarray, map_model: MapModel,
            sigma: float):
    """Off-road potential summed over adversaries and timesteps."""
    L, M = states.shape[:2]
    grads = np.zeros((L, M, 4))
    if M < 2:
        return 0.0, grads
    centers = states[:, 1:, :2].reshape(-1, 2)
    values, g = offroad_field_arrays(map_model, centers, sigma)
    grads[:, 1:, :2] = g.reshape(L, M - 1, 2)
    return float(values.sum()), grads


def total_cost(states: np.ndarray, dims: np.ndarray, map_model: MapModel,
               weights: CostWeights, horizon: int | None = None) -> CostBreakdown:
    """Weighted sum of the three potentials with combined gradient blocks."""
    ego_val, ego_g = phi_ego(states, dims, horizon)
    adv_val, adv_g = phi_adv_col(states, dims, weights.repulsion_threshold)
    dev_val, dev_g = phi_dev(states, dims, map_model, weights.offroad_sigma)
    total = ego_val + weights.adv_col_weight * adv_val \
        + weights.offroad_weight * dev_val
    grads = ego_g + weights.adv_col_weight * adv_g \
        + weights.offroad_weight * dev_g
    return CostBreakdown(ego_term=ego_val, adv_col_term=adv_val,
                         dev_term=dev_val, total=total, d_cost_d_state=grads)
