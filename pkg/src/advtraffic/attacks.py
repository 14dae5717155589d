"""Attack methods behind one interface: the gradient attack (direct or full
path) and the black-box baselines (random search, SimBA-style greedy
coordinate descent, CMA-ES).

All methods minimize the same rollout objective and share the success
predicate: the terminating rollout's verdict must be an ego collision, which
by the termination ordering implies no earlier adversary-adversary collision
or off-road event. Every success is re-certified by a deterministic replay
before the outcome is returned.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from advtraffic.costs import CostWeights
from advtraffic.errors import MethodIncompatible
from advtraffic.geometry import MapModel
from advtraffic.kinematics import BicycleParams
from advtraffic.rollout import (MODE_NO_RECORD, MODE_RECORD, MODE_RECORD_FULL,
                                RolloutResult, backward_direct, backward_full,
                                rollout)
from advtraffic.scenario import ActionPlan, ScenarioSpec, VerdictKind

ATTACK_METHODS = ("king_direct", "king_full", "random_search", "simba",
                  "cma_es")


@dataclass(frozen=True)
class AttackConfig:
    method: str = "king_direct"
    wall_clock_budget: float = 30.0
    max_iterations: int = 1_000_000
    learning_rate: float = 0.02
    # Method-specific scale: random-search sigma (default 0.3), SimBA step
    # (default 0.2), CMA-ES initial step size (default 0.3).
    perturb_scale: Optional[float] = None
    population: Optional[int] = None
    seed: int = 0
    step_rejection: bool = False

    def __post_init__(self):
        if self.method not in ATTACK_METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.wall_clock_budget < 0.0:
            raise ValueError("budget must be non-negative")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")

    def scale_for(self, method: str) -> float:
        if self.perturb_scale is not None:
            return self.perturb_scale
        return {"random_search": 0.3, "simba": 0.2, "cma_es": 0.3}.get(
            method, 0.3)


@dataclass
class AttackOutcome:
    success: bool
    best_plan: ActionPlan
    best_cost: float
    iterations: int
    wall_time: float
    time_to_success: Optional[float]
    cost_trace: List[float]
    method: str


def replay(spec: ScenarioSpec, best_plan: ActionPlan, ego,
           map_model: MapModel,
           params: BicycleParams = BicycleParams(),
           weights: CostWeights = CostWeights()) -> RolloutResult:
    """Roll out a spec with a substituted plan (used for certification)."""
    return rollout(spec.with_plan(best_plan), ego, map_model,
                   mode=MODE_NO_RECORD, params=params, weights=weights)


class _BudgetExhausted(Exception):
    pass


class _Search:
    """Shared evaluation loop state: budget, best-so-far, success."""

    def __init__(self, spec, ego, map_model, cfg, params, weights):
        self.spec = spec
        self.ego = ego
        self.map_model = map_model
        self.cfg = cfg
        self.params = params
        self.weights = weights
        self.started = time.monotonic()
        self.iterations = 0
        self.cost_trace: List[float] = []
        self.best_raw = spec.initial_plan.raw_params.copy()
        self.best_cost = math.inf
        self.success_raw = None
        self.time_to_success = None

    def elapsed(self) -> float:
        return time.monotonic() - self.started

    def evaluate(self, raw: np.ndarray, mode: str = MODE_NO_RECORD
                 ) -> RolloutResult:
        if (self.elapsed() >= self.cfg.wall_clock_budget
                or self.iterations >= self.cfg.max_iterations):
            raise _BudgetExhausted
        result = rollout(self.spec.with_plan(ActionPlan(raw)), self.ego,
                         self.map_model, mode=mode, params=self.params,
                         weights=self.weights)
        self.iterations += 1
        cost = result.cost.total
        self.cost_trace.append(cost)
        if cost < self.best_cost:
            self.best_cost = cost
            self.best_raw = raw.copy()
        if result.verdict.kind == VerdictKind.EGO_COLLISION:
            self.success_raw = raw.copy()
            self.best_raw = raw.copy()
            self.best_cost = cost
            self.time_to_success = self.elapsed()
            raise _BudgetExhausted
        return result

    def outcome(self) -> AttackOutcome:
        success = self.success_raw is not None
        plan = ActionPlan(self.success_raw if success else self.best_raw)
        if success:
            check = replay(self.spec, plan, self.ego, self.map_model,
                           self.params, self.weights)
            if check.verdict.kind != VerdictKind.EGO_COLLISION:
                raise AssertionError(
                    "success replay failed to reproduce the collision")
        return AttackOutcome(
            success=success,
            best_plan=plan,
            best_cost=self.best_cost if math.isfinite(self.best_cost)
            else float("nan"),
            iterations=self.iterations,
            wall_time=self.elapsed(),
            time_to_success=self.time_to_success,
            cost_trace=self.cost_trace,
            method=self.cfg.method,
        )


def attack(spec: ScenarioSpec, ego, cfg: AttackConfig, map_model: MapModel,
           params: BicycleParams = BicycleParams(),
           weights: CostWeights = CostWeights()) -> AttackOutcome:
    """Run one attack until ego collision, budget, or iteration cap."""
    if cfg.method == "king_full" and not hasattr(ego,
                                                 "act_with_state_jacobian"):
        raise MethodIncompatible(
            "king_full needs a differentiable ego policy")
    search = _Search(spec, ego, map_model, cfg, params, weights)
    runner = {
        "king_direct": _run_gradient,
        "king_full": _run_gradient,
        "random_search": _run_random_search,
        "simba": _run_simba,
        "cma_es": _run_cma_es,
    }[cfg.method]
    try:
        runner(search)
    except _BudgetExhausted:
        pass
    return search.outcome()


def _run_gradient(search: _Search) -> None:
    cfg = search.cfg
    full = cfg.method == "king_full"
    mode = MODE_RECORD_FULL if full else MODE_RECORD
    backward = backward_full if full else backward_direct

    raw = search.spec.initial_plan.raw_params.copy()
    adam_m = np.zeros_like(raw)
    adam_v = np.zeros_like(raw)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    result = search.evaluate(raw, mode=mode)
    grad = backward(result).d_cost_d_raw_params
    last_cost = result.cost.total
    while True:
        step += 1
        adam_m = beta1 * adam_m + (1.0 - beta1) * grad
        adam_v = beta2 * adam_v + (1.0 - beta2) * grad * grad
        m_hat = adam_m / (1.0 - beta1 ** step)
        v_hat = adam_v / (1.0 - beta2 ** step)
        cand = raw - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        result = search.evaluate(cand, mode=mode)
        if cfg.step_rejection and result.cost.total > last_cost:
            continue
        raw = cand
        grad = backward(result).d_cost_d_raw_params
        last_cost = result.cost.total


def _run_random_search(search: _Search) -> None:
    cfg = search.cfg
    rng = np.random.default_rng(cfg.seed)
    base = search.spec.initial_plan.raw_params
    sigma = cfg.scale_for("random_search")
    search.evaluate(base)
    while True:
        cand = base + sigma * rng.standard_normal(base.shape)
        search.evaluate(cand)


def _run_simba(search: _Search) -> None:
    cfg = search.cfg
    rng = np.random.default_rng(cfg.seed)
    eps = cfg.scale_for("simba")
    cur = search.spec.initial_plan.raw_params.copy()
    flat = cur.reshape(-1)
    cur_cost = search.evaluate(cur).cost.total
    while True:
        for idx in rng.permutation(flat.size):
            for sign in (1.0, -1.0):
                flat[idx] += sign * eps
                cost = search.evaluate(cur).cost.total
                if cost < cur_cost:
                    cur_cost = cost
                    break
                flat[idx] -= sign * eps


def _run_cma_es(search: _Search) -> None:
    cfg = search.cfg
    rng = np.random.default_rng(cfg.seed)
    base = search.spec.initial_plan.raw_params
    shape = base.shape
    dim = base.size
    lam = cfg.population or (4 + int(3 * math.log(dim)))
    es = _CmaEs(base.reshape(-1), cfg.scale_for("cma_es"), lam, rng)
    while True:
        xs, ys = es.ask()
        costs = np.empty(lam)
        for k in range(lam):
            costs[k] = search.evaluate(xs[k].reshape(shape)).cost.total
        es.tell(ys, costs)


class _CmaEs:
    """Standard (mu/mu_w, lambda) covariance matrix adaptation."""

    def __init__(self, x0: np.ndarray, sigma0: float, lam: int, rng):
        n = len(x0)
        self.n = n
        self.rng = rng
        self.mean = x0.astype(np.float64).copy()
        self.sigma = sigma0
        self.lam = lam
        mu = lam // 2
        w = np.log(0.5 * (lam + 1)) - np.log(np.arange(1, mu + 1))
        self.weights = w / w.sum()
        self.mu = mu
        self.mueff = 1.0 / (self.weights ** 2).sum()
        self.cc = (4.0 + self.mueff / n) / (n + 4.0 + 2.0 * self.mueff / n)
        self.cs = (self.mueff + 2.0) / (n + self.mueff + 5.0)
        self.c1 = 2.0 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(1.0 - self.c1,
                       2.0 * (self.mueff - 2.0 + 1.0 / self.mueff)
                       / ((n + 2.0) ** 2 + self.mueff))
        self.damps = 1.0 + 2.0 * max(
            0.0, math.sqrt((self.mueff - 1.0) / (n + 1.0)) - 1.0) + self.cs
        self.chi_n = math.sqrt(n) * (1.0 - 1.0 / (4.0 * n)
                                     + 1.0 / (21.0 * n * n))
        self.pc = np.zeros(n)
        self.ps = np.zeros(n)
        self.cov = np.eye(n)
        self.b_mat = np.eye(n)
        self.d_diag = np.ones(n)
        self.gen = 0
        self.eigen_gen = 0
        self.eigen_interval = max(
            1, int(1.0 / ((self.c1 + self.cmu) * n * 10.0)))

    def ask(self):
        z = self.rng.standard_normal((self.lam, self.n))
        y = (z * self.d_diag) @ self.b_mat.T
        x = self.mean[None, :] + self.sigma * y
        return x, y

    def tell(self, y: np.ndarray, costs: np.ndarray) -> None:
        order = np.argsort(costs, kind="stable")[:self.mu]
        y_w = self.weights @ y[order]
        self.mean = self.mean + self.sigma * y_w

        inv_sqrt_y = self.b_mat @ ((self.b_mat.T @ y_w) / self.d_diag)
        self.ps = (1.0 - self.cs) * self.ps + math.sqrt(
            self.cs * (2.0 - self.cs) * self.mueff) * inv_sqrt_y
        self.gen += 1
        ps_norm = np.linalg.norm(self.ps)
        denom = math.sqrt(1.0 - (1.0 - self.cs) ** (2.0 * self.gen))
        hsig = ps_norm / denom / self.chi_n < 1.4 + 2.0 / (self.n + 1.0)
        self.pc = (1.0 - self.cc) * self.pc
        if hsig:
            self.pc += math.sqrt(
                self.cc * (2.0 - self.cc) * self.mueff) * y_w

        rank_mu = (self.weights[:, None] * y[order]).T @ y[order]
        delta = (1.0 - hsig) * self.cc * (2.0 - self.cc)
        self.cov = ((1.0 - self.c1 - self.cmu) * self.cov
                    + self.c1 * (np.outer(self.pc, self.pc)
                                 + delta * self.cov)
                    + self.cmu * rank_mu)
        self.sigma *= math.exp(
            (self.cs / self.damps) * (ps_norm / self.chi_n - 1.0))

        if self.gen - self.eigen_gen >= self.eigen_interval:
            self.eigen_gen = self.gen
            self.cov = 0.5 * (self.cov + self.cov.T)
            vals, vecs = np.linalg.eigh(self.cov)
            self.d_diag = np.sqrt(np.maximum(vals, 1e-20))
            self.b_mat = vecs
