"""Closed-loop scenario rollout and reverse-mode gradients of the cost with
respect to the adversary action parameters.

The direct backward pass pulls cost adjoints through the kinematics tape of
the adversary agents only; ego-state adjoints are dropped, which implements
the stop-gradient through the ego's reaction. The full backward pass keeps
ego adjoints and routes them through controller, policy, and featurization
Jacobians back to the adversary states.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from advtraffic.costs import CostBreakdown, CostWeights, total_cost
from advtraffic.errors import NotDifferentiableEgo, TapeMissing
from advtraffic.geometry import (MapModel, boxes_offroad_violation_arrays,
                                 boxes_overlap_arrays)
from advtraffic.kinematics import BicycleParams
from advtraffic.backend import kernels
from advtraffic.scenario import (ScenarioSpec, Verdict, VerdictKind,
                                 squash_deriv)

MODE_NO_RECORD = "no_record"
MODE_RECORD = "record"
MODE_RECORD_FULL = "record_full"


@dataclass
class Tape:
    """Per-step Jacobians recorded along a rollout."""

    j_state: np.ndarray              # (L-1, M, 4, 4)
    j_action: np.ndarray             # (L-1, M, 4, 2)
    actions: np.ndarray              # (L-1, M, 2)
    ego_jac: Optional[np.ndarray]    # (L-1, M, 2, 4) in full mode


@dataclass
class RolloutResult:
    spec: ScenarioSpec
    states: np.ndarray               # (L, M, 4), L <= horizon + 1
    dims: np.ndarray                 # (M, 2)
    verdict: Verdict
    cost: CostBreakdown
    tape: Optional[Tape]

    @property
    def realized_steps(self) -> int:
        return len(self.states) - 1


@dataclass
class PlanGradient:
    """Gradient of the total cost wrt the plan's raw parameters."""

    d_cost_d_raw_params: np.ndarray  # (N, T, 2)


def rollout(spec: ScenarioSpec, ego, map_model: MapModel,
            mode: str = MODE_RECORD,
            params: BicycleParams = BicycleParams(),
            weights: CostWeights = CostWeights()) -> RolloutResult:
    """Simulate a scenario in closed loop.

    Per step: the ego observes the true state and emits an action, the
    adversaries execute their squashed plan actions, all agents advance one
    bicycle step, and the termination checks run in order (ego collision,
    adversary-adversary collision, adversary off-road). The cost is
    evaluated over the realized, possibly truncated, sequence.
    """
    if mode not in (MODE_NO_RECORD, MODE_RECORD, MODE_RECORD_FULL):
        raise ValueError(f"unknown rollout mode {mode!r}")
    record = mode in (MODE_RECORD, MODE_RECORD_FULL)
    full = mode == MODE_RECORD_FULL
    if full and not hasattr(ego, "act_with_state_jacobian"):
        raise NotDifferentiableEgo(
            "full-mode rollout needs an ego with a Jacobian interface")

    params = params.with_dt(spec.dt)
    init_states, dims = spec.initial_state.to_arrays()
    m = len(init_states)
    n_adv = m - 1
    horizon = spec.horizon
    adv_actions = spec.initial_plan.actions  # (N, T, 2)

    states = np.empty((horizon + 1, m, 4))
    states[0] = init_states
    j_state = np.empty((horizon, m, 4, 4)) if record else None
    j_action = np.empty((horizon, m, 4, 2)) if record else None
    acts_log = np.empty((horizon, m, 2)) if record else None
    ego_jac = np.empty((horizon, m, 2, 4)) if full else None

    ego.reset(spec, map_model)
    checker = _TerminationChecker(dims, map_model) if n_adv else None
    verdict = Verdict(kind=VerdictKind.NO_COLLISION)
    steps = 0
    acts = np.empty((m, 2))
    for t in range(horizon):
        if full:
            ego_action, jac = ego.act_with_state_jacobian(states[t], dims, t)
            ego_jac[t] = jac
        else:
            ego_action = ego.act(states[t], dims, t)
        acts[0] = np.clip(ego_action, -1.0, 1.0)
        if n_adv:
            acts[1:] = adv_actions[:, t]
        if record:
            acts_log[t] = acts
            kernels.step_batch(states[t], acts, params.lf, params.lr,
                               params.max_steer, params.max_accel,
                               params.max_brake, params.dt, states[t + 1],
                               j_state[t], j_action[t])
        else:
            kernels.step_batch(states[t], acts, params.lf, params.lr,
                               params.max_steer, params.max_accel,
                               params.max_brake, params.dt, states[t + 1])
        steps = t + 1

        if n_adv:
            v = checker.check(states[t + 1], t + 1)
            if v is not None:
                verdict = v
                break

    length = steps + 1
    states = states[:length]
    if n_adv:
        cost = _terminal_hold_cost(states, dims, map_model, weights, horizon)
    else:
        cost = CostBreakdown(ego_term=0.0, adv_col_term=0.0, dev_term=0.0,
                             total=0.0,
                             d_cost_d_state=np.zeros((length, m, 4)))
    tape = None
    if record:
        tape = Tape(j_state=j_state[:steps], j_action=j_action[:steps],
                    actions=acts_log[:steps],
                    ego_jac=ego_jac[:steps] if full else None)
    return RolloutResult(spec=spec, states=states, dims=dims,
                         verdict=verdict, cost=cost, tape=tape)


def _terminal_hold_cost(states, dims, map_model, weights,
                        horizon) -> CostBreakdown:
    """Cost of the realized sequence with the terminal state held to the
    full horizon.

    Early termination therefore keeps its intended pricing: an early ego
    collision repeats zero-distance terms (a reward), while an early
    off-road or adversary contact keeps accruing its penalty instead of
    discounting the remaining timesteps. Gradient blocks of the held
    states fold into the terminal realized state, whose copy they are.
    """
    length = len(states)
    if length == horizon + 1:
        return total_cost(states, dims, map_model, weights, horizon=horizon)
    pad = np.repeat(states[length - 1][None], horizon + 1 - length, axis=0)
    padded = np.concatenate([states, pad])
    full = total_cost(padded, dims, map_model, weights, horizon=horizon)
    grads = full.d_cost_d_state[:length].copy()
    grads[length - 1] += full.d_cost_d_state[length:].sum(axis=0)
    return CostBreakdown(ego_term=full.ego_term,
                         adv_col_term=full.adv_col_term,
                         dev_term=full.dev_term, total=full.total,
                         d_cost_d_state=grads)


class _TerminationChecker:
    """Per-rollout termination predicate with precomputed index buffers."""

    def __init__(self, dims: np.ndarray, map_model: MapModel):
        m = len(dims)
        self.n_adv = m - 1
        self.map_model = map_model
        self.ego_dims = np.ascontiguousarray(np.tile(dims[0], (self.n_adv, 1)))
        self.adv_dims = np.ascontiguousarray(dims[1:])
        if self.n_adv >= 2:
            ia, ib = np.triu_indices(self.n_adv, k=1)
            self.pair_a = 1 + ia
            self.pair_b = 1 + ib
            self.dims_a = np.ascontiguousarray(dims[self.pair_a])
            self.dims_b = np.ascontiguousarray(dims[self.pair_b])

    def check(self, states_row: np.ndarray, t: int) -> Optional[Verdict]:
        """Checks in success-biased order: ego collision first, then
        adversary-adversary collision, then adversary off-road."""
        n_adv = self.n_adv
        poses = np.ascontiguousarray(states_row[:, :3])
        ego_pose = np.ascontiguousarray(
            np.broadcast_to(poses[0], (n_adv, 3)))
        hits = boxes_overlap_arrays(ego_pose, self.ego_dims, poses[1:],
                                    self.adv_dims)
        if hits.any():
            other = 1 + int(np.argmax(hits))
            return Verdict(kind=VerdictKind.EGO_COLLISION, time_index=t,
                           agents_involved=(0, other))

        if n_adv >= 2:
            hits = boxes_overlap_arrays(poses[self.pair_a], self.dims_a,
                                        poses[self.pair_b], self.dims_b)
            if hits.any():
                p = int(np.argmax(hits))
                return Verdict(kind=VerdictKind.ADV_ADV_COLLISION,
                               time_index=t,
                               agents_involved=(int(self.pair_a[p]),
                                                int(self.pair_b[p])))

        off = boxes_offroad_violation_arrays(self.map_model, poses[1:],
                                             self.adv_dims)
        if off.any():
            agent = 1 + int(np.argmax(off))
            return Verdict(kind=VerdictKind.OFF_ROAD, time_index=t,
                           agents_involved=(agent, agent))
        return None


def backward_direct(result: RolloutResult) -> PlanGradient:
    """Reverse sweep along the direct path only.

    Ego-state adjoints are dropped at every timestep; adversary adjoints
    accumulate the cost blocks and the pullback through the step Jacobians,
    then chain through the squashing derivative into the raw parameters.
    """
    if result.tape is None:
        raise TapeMissing("rollout was not recorded")
    return _backward(result, full=False)


def backward_full(result: RolloutResult, policy_ego=None) -> PlanGradient:
    """Reverse sweep keeping ego adjoints and the indirect path.

    Requires a rollout recorded in full mode (policy/feature Jacobians on
    the tape).
    """
    if result.tape is None:
        raise TapeMissing("rollout was not recorded")
    if result.tape.ego_jac is None:
        raise NotDifferentiableEgo(
            "tape has no ego Jacobians; record the rollout in full mode")
    return _backward(result, full=True)


def _backward(result: RolloutResult, full: bool) -> PlanGradient:
    spec = result.spec
    n_adv = spec.num_adversaries
    horizon = spec.horizon
    grads = np.zeros((n_adv, horizon, 2))
    if n_adv == 0:
        return PlanGradient(d_cost_d_raw_params=grads)

    tape = result.tape
    cg = result.cost.d_cost_d_state          # (L, M, 4)
    steps = result.realized_steps

    adj = cg[steps].copy()                   # adjoint of state t+1
    if not full:
        adj[0] = 0.0
    for t in range(steps - 1, -1, -1):
        grads[:, t] = np.einsum('mia,mi->ma', tape.j_action[t, 1:], adj[1:])
        new_adj = cg[t] + np.einsum('mij,mi->mj', tape.j_state[t], adj)
        if full:
            pull = tape.j_action[t, 0].T @ adj[0]
            new_adj += np.einsum('maj,a->mj', tape.ego_jac[t], pull)
        else:
            new_adj[0] = 0.0
        adj = new_adj

    raw = spec.initial_plan.raw_params
    grads[:, :steps] *= squash_deriv(raw[:, :steps])
    return PlanGradient(d_cost_d_raw_params=grads)
