"""Demonstration collection and imitation training of the waypoint policy.

Training minimizes the mean absolute error between predicted and
demonstrated waypoints with Adam over mini-batches; fine-tuning restarts
from existing weights and draws each batch from the regular and critical
pools according to a mixing ratio.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from advtraffic.agents import (ControllerGains, ExpertEgo, PolicyModel,
                               _control, extract_features)
from advtraffic.errors import EmptyDataset, ShapeMismatch
from advtraffic.geometry import MapModel
from advtraffic.kinematics import BicycleParams
from advtraffic.scenario import ActionPlan, ScenarioSpec

TAG_REGULAR = "regular"
TAG_CRITICAL = "critical"


@dataclass
class DemoDataset:
    """Observation-waypoint pairs with a regular/critical tag per pair."""

    features: np.ndarray   # (n, F)
    waypoints: np.ndarray  # (n, 4, 2)
    tags: np.ndarray       # (n,) unicode

    def __post_init__(self):
        if len(self.features) != len(self.waypoints) \
                or len(self.features) != len(self.tags):
            raise ShapeMismatch("features, waypoints, tags lengths differ")

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, tag: str) -> "DemoDataset":
        mask = self.tags == tag
        return DemoDataset(self.features[mask], self.waypoints[mask],
                           self.tags[mask])

    @classmethod
    def concatenate(cls, parts: Sequence["DemoDataset"]) -> "DemoDataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise EmptyDataset("nothing to concatenate")
        return cls(np.concatenate([p.features for p in parts]),
                   np.concatenate([p.waypoints for p in parts]),
                   np.concatenate([p.tags for p in parts]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i in range(len(self)):
                fh.write(json.dumps({
                    "features": self.features[i].tolist(),
                    "waypoints": self.waypoints[i].tolist(),
                    "tag": str(self.tags[i]),
                }) + "\n")

    @classmethod
    def load(cls, path) -> "DemoDataset":
        feats, wps, tags = [], [], []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                feats.append(rec["features"])
                wps.append(rec["waypoints"])
                tags.append(rec["tag"])
        if not feats:
            raise EmptyDataset(f"{path} holds no pairs")
        return cls(np.array(feats, dtype=np.float64),
                   np.array(wps, dtype=np.float64),
                   np.array(tags))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 60
    batch_size: int = 64
    mix_ratio: float = 0.5   # fraction of each batch drawn from critical
    hidden: int = 64
    seed: int = 0


class _Adam:
    def __init__(self, shapes, lr, total_steps=None):
        self.lr = lr
        self.total = total_steps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        lr = self.lr
        if self.total:
            # linear decay to 5%: the L1 objective's sign gradients leave an
            # oscillation floor proportional to the step size
            lr *= max(0.05, 1.0 - self.t / self.total)
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= 0.9
            m += 0.1 * g
            v *= 0.999
            v += 0.001 * g * g
            m_hat = m / (1.0 - 0.9 ** self.t)
            v_hat = v / (1.0 - 0.999 ** self.t)
            out.append(p - lr * m_hat / (np.sqrt(v_hat) + 1e-8))
        return out


def l1_loss_and_grads(model: PolicyModel, x: np.ndarray, y: np.ndarray):
    """Mean absolute waypoint error and its gradients wrt all weights."""
    targets = y.reshape(len(y), -1)
    pred, (z, h1, h2) = model.forward_batch(x, cache=True)
    diff = pred - targets
    loss = float(np.abs(diff).mean())

    d_out = np.sign(diff) / diff.size
    d_w3 = d_out.T @ h2
    d_b3 = d_out.sum(axis=0)
    d_h2 = (d_out @ model.w3) * (1.0 - h2 ** 2)
    d_w2 = d_h2.T @ h1
    d_b2 = d_h2.sum(axis=0)
    d_h1 = (d_h2 @ model.w2) * (1.0 - h1 ** 2)
    d_w1 = d_h1.T @ z
    d_b1 = d_h1.sum(axis=0)
    return loss, [d_w1, d_b1, d_w2, d_b2, d_w3, d_b3]


def _run_training(model: PolicyModel, batches, lr,
                  total_steps=None) -> List[float]:
    params = [model.w1, model.b1, model.w2, model.b2, model.w3, model.b3]
    opt = _Adam([p.shape for p in params], lr, total_steps=total_steps)
    losses = []
    for x, y in batches:
        loss, grads = l1_loss_and_grads(model, x, y)
        params = opt.step(params, grads)
        (model.w1, model.b1, model.w2, model.b2, model.w3,
         model.b3) = params
        losses.append(loss)
    return losses


def _plain_batches(data: DemoDataset, cfg: TrainConfig):
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    bs = min(cfg.batch_size, n)
    targets = data.waypoints
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, bs):
            idx = order[lo:lo + bs]
            yield data.features[idx], targets[idx]


def train_policy(data: DemoDataset, config: TrainConfig = TrainConfig()
                 ) -> Tuple[PolicyModel, List[float]]:
    """Train a fresh policy; returns the model and the per-batch loss trace."""
    if len(data) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    model = PolicyModel(hidden=config.hidden, seed=config.seed)
    if data.features.shape[1] != model.w1.shape[1]:
        raise ShapeMismatch("dataset feature width does not match the model")
    steps = config.epochs * max(1, -(-len(data) // config.batch_size))
    losses = _run_training(model, _plain_batches(data, config),
                           config.learning_rate, total_steps=steps)
    return model, losses


def _mixed_batches(regular: DemoDataset, critical: DemoDataset,
                   cfg: TrainConfig):
    rng = np.random.default_rng(cfg.seed)
    n_total = max(len(regular), len(critical))
    bs = cfg.batch_size
    n_crit = int(round(cfg.mix_ratio * bs))
    if len(critical) == 0:
        n_crit = 0
    if len(regular) == 0:
        n_crit = bs
    n_reg = bs - n_crit
    steps = max(1, n_total // bs)
    for _ in range(cfg.epochs):
        for _ in range(steps):
            xs, ys = [], []
            if n_reg:
                idx = rng.integers(0, len(regular), n_reg)
                xs.append(regular.features[idx])
                ys.append(regular.waypoints[idx])
            if n_crit:
                idx = rng.integers(0, len(critical), n_crit)
                xs.append(critical.features[idx])
                ys.append(critical.waypoints[idx])
            yield np.concatenate(xs), np.concatenate(ys)


def fine_tune(model: PolicyModel, data: DemoDataset,
              config: TrainConfig = TrainConfig()
              ) -> Tuple[PolicyModel, List[float]]:
    """Continue training from existing weights on a tagged mixture.

    mix_ratio 0 reproduces regular-only fine-tuning, 1 critical-only; when
    one pool is empty the batches fall back to the other pool.
    """
    if len(data) == 0:
        raise EmptyDataset("cannot fine-tune on an empty dataset")
    if data.features.shape[1] != model.w1.shape[1]:
        raise ShapeMismatch("dataset feature width does not match the model")
    tuned = model.copy()
    regular = data.subset(TAG_REGULAR)
    critical = data.subset(TAG_CRITICAL)
    steps = config.epochs * max(1, max(len(regular), len(critical))
                                // config.batch_size)
    batches = _mixed_batches(regular, critical, config)
    losses = _run_training(tuned, batches, config.learning_rate,
                           total_steps=steps)
    return tuned, losses


class _RelabelingEgo:
    """Drives with one agent while logging another agent's waypoints for
    the visited states (the aggregation step of iterative imitation)."""

    def __init__(self, driver, labeler, gains: ControllerGains):
        self.driver = driver
        self.labeler = labeler
        self.gains = gains
        self.features: List[np.ndarray] = []
        self.waypoints: List[np.ndarray] = []
        self._goal = None
        self._dt = 0.25

    def reset(self, spec, map_model) -> None:
        self._goal = np.asarray(spec.ego_goal, dtype=np.float64)
        self._dt = spec.dt
        self.driver.reset(spec, map_model)
        self.labeler.reset(spec, map_model)

    def act(self, states, dims, t) -> np.ndarray:
        self.features.append(extract_features(states, dims, self._goal))
        self.waypoints.append(self.labeler.waypoints(states, dims, t).copy())
        return self.driver.act(states, dims, t)


def collect_relabeled_demos(scenarios: Sequence[ScenarioSpec], map_models,
                            policy, tags=TAG_REGULAR,
                            params: BicycleParams = BicycleParams(),
                            gains: ControllerGains = ControllerGains(),
                            cruise: float = 6.0) -> DemoDataset:
    """Roll out with the policy as ego and record the expert's waypoints on
    the states the policy actually visits (corrective demonstrations)."""
    from advtraffic.agents import PolicyEgo
    from advtraffic.rollout import MODE_NO_RECORD, rollout

    if isinstance(tags, str):
        tags = [tags] * len(scenarios)
    feats, wps, labels = [], [], []
    for spec, tag in zip(scenarios, tags):
        map_model = map_models[spec.map_id]
        recorder = _RelabelingEgo(
            PolicyEgo(policy, gains=gains),
            ExpertEgo(params=params, gains=gains, cruise=cruise), gains)
        rollout(spec, recorder, map_model, mode=MODE_NO_RECORD,
                params=params)
        feats.extend(recorder.features)
        wps.extend(recorder.waypoints)
        labels.extend([tag] * len(recorder.features))
    if not feats:
        raise EmptyDataset("no corrective pairs were recorded")
    return DemoDataset(np.array(feats), np.array(wps), np.array(labels))


def build_base_policy(demo_specs: Sequence[ScenarioSpec], map_models,
                      config: TrainConfig = TrainConfig(),
                      dagger_rounds: int = 3,
                      noise_scales: Sequence[float] = (0.15, 0.3, 0.45),
                      params: BicycleParams = BicycleParams(),
                      gains: ControllerGains = ControllerGains(),
                      cruise: float = 6.0):
    """Behavioral cloning of the expert plus iterative relabeling rounds.

    Each round rolls the current policy on the demonstration scenarios and
    on noise-perturbed copies of their plans, labels the visited states
    with the expert, and retrains on the aggregate. The perturbed copies
    cover the off-distribution states that plan perturbations reach.
    """
    data = collect_demos(demo_specs, map_models, driver="expert",
                         params=params, gains=gains, cruise=cruise)
    model, _ = train_policy(data, config)
    rng = np.random.default_rng(config.seed)
    for round_idx in range(dagger_rounds):
        specs = list(demo_specs)
        for scale in noise_scales[:round_idx + 1]:
            for spec in demo_specs:
                noise = rng.normal(0.0, scale,
                                   spec.initial_plan.raw_params.shape)
                specs.append(spec.with_plan(
                    ActionPlan(spec.initial_plan.raw_params + noise)))
        relabeled = collect_relabeled_demos(specs, map_models, model,
                                            params=params, gains=gains,
                                            cruise=cruise)
        data = DemoDataset.concatenate([data, relabeled])
        cfg = TrainConfig(learning_rate=config.learning_rate,
                          epochs=config.epochs,
                          batch_size=config.batch_size,
                          mix_ratio=config.mix_ratio, hidden=config.hidden,
                          seed=config.seed + round_idx + 1)
        model, _ = train_policy(data, cfg)
    return model, data


class _RecordingEgo:
    """Wraps an ego agent, logging (features, waypoints) at every step."""

    def __init__(self, inner, gains: ControllerGains):
        self.inner = inner
        self.gains = gains
        self.features: List[np.ndarray] = []
        self.waypoints: List[np.ndarray] = []
        self._goal = None
        self._dt = 0.25

    def reset(self, spec, map_model) -> None:
        self._goal = np.asarray(spec.ego_goal, dtype=np.float64)
        self._dt = spec.dt
        self.inner.reset(spec, map_model)

    def act(self, states, dims, t) -> np.ndarray:
        wp = self.inner.waypoints(states, dims, t)
        self.features.append(extract_features(states, dims, self._goal))
        self.waypoints.append(wp.copy())
        return _control(wp, states[0, 3], self.gains, self._dt)


def collect_demos(scenarios: Sequence[ScenarioSpec], map_models,
                  driver: str = "expert", tags=TAG_REGULAR,
                  params: BicycleParams = BicycleParams(),
                  gains: ControllerGains = ControllerGains(),
                  cruise: float = 6.0) -> DemoDataset:
    """Roll out each scenario with the demonstration driver as ego and
    record one (features, waypoints) pair per realized timestep.

    map_models: mapping from map_id to MapModel. tags: one tag for all
    scenarios or a per-scenario sequence (the scenario's provenance).
    """
    from advtraffic.agents import RuleBasedEgo
    from advtraffic.rollout import MODE_NO_RECORD, rollout

    if isinstance(tags, str):
        tags = [tags] * len(scenarios)
    if len(tags) != len(scenarios):
        raise ValueError("tags length must match scenarios")

    feats, wps, labels = [], [], []
    for spec, tag in zip(scenarios, tags):
        map_model = map_models[spec.map_id]
        if driver == "expert":
            inner = ExpertEgo(params=params, gains=gains, cruise=cruise)
        elif driver == "rule_based":
            inner = RuleBasedEgo(params=params, gains=gains, cruise=cruise)
        else:
            raise ValueError(f"unknown demonstration driver {driver!r}")
        recorder = _RecordingEgo(inner, gains)
        rollout(spec, recorder, map_model, mode=MODE_NO_RECORD,
                params=params)
        feats.extend(recorder.features)
        wps.extend(recorder.waypoints)
        labels.extend([tag] * len(recorder.features))
    if not feats:
        raise EmptyDataset("no demonstration pairs were recorded")
    return DemoDataset(np.array(feats), np.array(wps), np.array(labels))
