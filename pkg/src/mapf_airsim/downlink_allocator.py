"""Event-risk oracles, KL action-shift, priority gating, and DL selection.

The trained risk and relief predictors are replaced by the quantities
they would be trained on: Monte-Carlo event probabilities from short
rollouts under the local policy, and counterfactual risk reductions from
paired rollouts (common random numbers) with and without the cloud
override. Rollouts simulate the focal agent together with its nearby
peers under full execution stochasticity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .execution_engine import (Action, TransitionKernel, arbitrate,
                               proposal_from_uniform)
from .map_model import Cell, GridMap
from .policies import GuidanceCache, greedy_step, masked_distribution

__all__ = [
    "EVENT_TYPES",
    "DEFAULT_EVENT_WEIGHTS",
    "RolloutParams",
    "DlGrant",
    "mc_event_risk",
    "counterfactual_relief",
    "risk_and_relief",
    "kl_gap",
    "assign_priorities",
    "dl_score",
    "select_dl",
    "dl_bit_length",
    "dl_rate",
    "KL_CAP_NATS",
]

EVENT_TYPES = ("vertex", "edge", "wall", "wait")
DEFAULT_EVENT_WEIGHTS = {"vertex": 1.0, "edge": 1.0, "wall": 0.5, "wait": 0.25}
KL_CAP_NATS = 20.0


@dataclass(frozen=True)
class RolloutParams:
    horizon: int = 6
    rollouts: int = 16
    decay: float = 0.9
    radius: int = 4  # Chebyshev radius of the simulated neighborhood

    def __post_init__(self):
        if self.horizon < 1 or self.rollouts < 1:
            raise ValueError("horizon and rollout count must be >= 1")
        if not (0.0 < self.decay <= 1.0):
            raise ValueError("decay must lie in (0, 1]")


@dataclass
class DlGrant:
    agent: int
    score: float
    rate: float
    bits: int
    success: Optional[bool] = None


def _neighborhood(positions: Sequence[Cell], focal: int, radius: int) -> List[int]:
    fx, fy = positions[focal]
    return [i for i, p in enumerate(positions)
            if abs(p.x - fx) <= radius and abs(p.y - fy) <= radius]


def _rollout_focal_events(grid: GridMap, positions: Sequence[Cell],
                          goals: Sequence[Cell], members: Sequence[int],
                          focal: int, cache: GuidanceCache,
                          kernel: TransitionKernel, horizon: int, decay: float,
                          rng: np.random.Generator,
                          override: Optional[Mapping[int, Action]] = None
                          ) -> Dict[str, float]:
    """One rollout; returns decay^tau at the first occurrence per event."""
    pos = [positions[i] for i in members]
    fields = [cache.field(goals[i]) for i in members]
    focal_idx = members.index(focal)
    first: Dict[str, float] = {}
    for tau in range(1, horizon + 1):
        actions = []
        for k, i in enumerate(members):
            if tau == 1 and override is not None and i in override:
                actions.append(override[i])
            else:
                actions.append(greedy_step(grid, fields[k], pos[k]))
        # Batched uniforms; same stream as per-agent sample_proposal calls.
        draws = rng.random(len(members))
        proposals = [proposal_from_uniform(pos[k], actions[k], kernel, draws[k])
                     for k in range(len(members))]
        res = arbitrate(grid, pos, proposals, rng)
        moved = res.executed[focal_idx] != pos[focal_idx]
        events = set(res.events[focal_idx])
        if not moved and actions[focal_idx] != Action.STAY:
            events.add("wait")
        for e in events:
            if e not in first:
                first[e] = decay ** tau
        pos = res.executed
    return first


def mc_event_risk(grid: GridMap, positions: Sequence[Cell], goals: Sequence[Cell],
                  focal: int, cache: GuidanceCache, kernel: TransitionKernel,
                  params: RolloutParams,
                  rng_factory: Callable[[int], np.random.Generator]
                  ) -> Dict[str, float]:
    """Monte-Carlo near-future event probabilities for one agent.

    Averages, over independent rollouts, decay^tau at the first step tau
    where each event type occurs; values are probabilities in [0, 1].
    """
    members = _neighborhood(positions, focal, params.radius)
    acc = {e: 0.0 for e in EVENT_TYPES}
    for m in range(params.rollouts):
        hits = _rollout_focal_events(grid, positions, goals, members, focal,
                                     cache, kernel, params.horizon,
                                     params.decay, rng_factory(m))
        for e, v in hits.items():
            acc[e] += v
    return {e: min(1.0, acc[e] / params.rollouts) for e in EVENT_TYPES}


def counterfactual_relief(grid: GridMap, positions: Sequence[Cell],
                          goals: Sequence[Cell], focal: int,
                          cache: GuidanceCache, kernel: TransitionKernel,
                          cloud_actions: Mapping[int, Action],
                          params: RolloutParams,
                          rng_factory: Callable[[int], np.random.Generator]
                          ) -> Dict[str, float]:
    """Per-event risk reduction sigma = y(no cloud) - y(with cloud).

    Branch rollouts are paired by common random numbers: rollout m of both
    branches draws from an identically seeded stream, so identical
    policies give exactly zero relief.
    """
    members = _neighborhood(positions, focal, params.radius)
    acc = {e: 0.0 for e in EVENT_TYPES}
    for m in range(params.rollouts):
        y0 = _rollout_focal_events(grid, positions, goals, members, focal,
                                   cache, kernel, params.horizon,
                                   params.decay, rng_factory(m))
        y1 = _rollout_focal_events(grid, positions, goals, members, focal,
                                   cache, kernel, params.horizon,
                                   params.decay, rng_factory(m),
                                   override=cloud_actions)
        for e in EVENT_TYPES:
            acc[e] += y0.get(e, 0.0) - y1.get(e, 0.0)
    return {e: acc[e] / params.rollouts for e in EVENT_TYPES}


def risk_and_relief(grid: GridMap, positions: Sequence[Cell],
                    goals: Sequence[Cell], focal: int,
                    cache: GuidanceCache, kernel: TransitionKernel,
                    cloud_actions: Mapping[int, Action],
                    params: RolloutParams,
                    rng_factory: Callable[[int], np.random.Generator]
                    ) -> Tuple[Dict[str, float], Dict[str, float]]:
    """(rho, sigma) from one set of paired rollouts.

    The no-cloud branch doubles as the event-risk estimate, so this costs
    two-thirds of calling mc_event_risk and counterfactual_relief
    separately while returning the same estimators.
    """
    members = _neighborhood(positions, focal, params.radius)
    risk = {e: 0.0 for e in EVENT_TYPES}
    relief = {e: 0.0 for e in EVENT_TYPES}
    for m in range(params.rollouts):
        y0 = _rollout_focal_events(grid, positions, goals, members, focal,
                                   cache, kernel, params.horizon,
                                   params.decay, rng_factory(m))
        y1 = _rollout_focal_events(grid, positions, goals, members, focal,
                                   cache, kernel, params.horizon,
                                   params.decay, rng_factory(m),
                                   override=cloud_actions)
        for e in EVENT_TYPES:
            risk[e] += y0.get(e, 0.0)
            relief[e] += y0.get(e, 0.0) - y1.get(e, 0.0)
    k = params.rollouts
    return ({e: min(1.0, risk[e] / k) for e in EVENT_TYPES},
            {e: relief[e] / k for e in EVENT_TYPES})


def kl_gap(local_logits: np.ndarray, refined_logits: np.ndarray,
           mask: np.ndarray) -> float:
    """D_KL(masked softmax(local) || masked softmax(refined)), natural log.

    Zero-probability local actions contribute nothing; a refined-side zero
    against positive local mass is reported as the 20-nat cap.
    """
    p = masked_distribution(local_logits, mask)
    q = masked_distribution(refined_logits, mask)
    total = 0.0
    for pa, qa in zip(p, q):
        if pa <= 0.0:
            continue
        if qa <= 0.0:
            return KL_CAP_NATS
        total += pa * math.log(pa / qa)
    return min(max(total, 0.0), KL_CAP_NATS)


def assign_priorities(scores: Sequence[float], rng: np.random.Generator,
                      eps_s: float = 1e-6) -> List[int]:
    """Total order sampled by successive draws without replacement with
    probabilities proportional to max(score, eps_s). Returns per-agent
    rank kappa; 0 is the highest priority."""
    weights = np.array([max(s, eps_s) for s in scores], dtype=float)
    n = len(weights)
    kappa = [0] * n
    remaining = list(range(n))
    for rank in range(n):
        w = weights[remaining]
        probs = w / w.sum()
        pick = int(rng.choice(len(remaining), p=probs))
        kappa[remaining[pick]] = rank
        remaining.pop(pick)
    return kappa


def phi(kappa: int) -> float:
    """Priority down-weight; decreasing in rank with phi(0) = 1."""
    return 1.0 / (1.0 + kappa)


def dl_score(kappa: int, p_dl: float, rho: Mapping[str, float],
             sigma: Mapping[str, float],
             omega: Mapping[str, float], klgap: float) -> float:
    """phi(kappa) * p_DL * max(0, sum_e omega_e rho_e sigma_e) * klgap."""
    relief_term = sum(omega[e] * rho[e] * sigma[e] for e in EVENT_TYPES)
    return phi(kappa) * p_dl * max(0.0, relief_term) * klgap


def select_dl(scores: Mapping[int, float], c_dl: int) -> List[int]:
    """Agents holding the c_dl largest strictly-positive scores;
    ties broken by lower agent id."""
    if c_dl < 0:
        raise ValueError("C_DL must be >= 0")
    positive = [(agent, s) for agent, s in scores.items() if s > 0.0]
    positive.sort(key=lambda kv: (-kv[1], kv[0]))
    return [agent for agent, _ in positive[:c_dl]]


def dl_bit_length(peers_in_fov: int, b0: int = 64, b1: int = 8) -> int:
    if peers_in_fov < 0:
        raise ValueError("peer count must be non-negative")
    return b0 + b1 * peers_in_fov


def dl_rate(bits: int, n: int) -> float:
    if n < 1:
        raise ValueError("blocklength must be >= 1")
    return bits / n
