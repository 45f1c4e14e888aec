"""Uplink sender selection and resource-block allocation.

Sender selection maximizes a weighted coverage objective over risk
centers: F(S) = sum_u w_u * (1 - prod_{i in S covering u} (1 - p_i)),
which is monotone submodular, so plain greedy carries the (1 - 1/e)
guarantee. RB allocation then feeds extra blocks to whichever sender
currently has the worst packet-loss probability until the budget runs
out or everyone meets the PER target.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Sequence, Set, Tuple

from .map_model import Cell, GridMap, NEIGHBOR_OFFSETS
from .radio_link import CommBudget, LinkBudgetParams, RadioMap, blocklength, db_to_linear, p_loss

__all__ = [
    "RiskCenter",
    "UplinkPlan",
    "UplinkGrant",
    "ConflictHistory",
    "identify_risk_centers",
    "coverage_value",
    "greedy_select",
    "visibility",
    "ul_bit_length",
    "allocate_ul",
]


@dataclass(frozen=True)
class RiskCenter:
    cell: Cell
    weight: float

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("risk weight must be non-negative")


@dataclass
class UplinkGrant:
    agent: int
    rb_count: int
    rate: float
    bits: int
    nominal_success: float


@dataclass
class UplinkPlan:
    grants: List[UplinkGrant]

    @property
    def senders(self) -> List[int]:
        return [g.agent for g in self.grants]


class ConflictHistory:
    """Exponentially decayed per-cell conflict counts (decay 0.9/step)."""

    def __init__(self, decay: float = 0.9):
        self.decay = decay
        self.counts: Dict[Cell, float] = {}

    def step(self, conflict_cells: Iterable[Cell]):
        stale = []
        for cell in self.counts:
            self.counts[cell] *= self.decay
            if self.counts[cell] < 1e-6:
                stale.append(cell)
        for cell in stale:
            del self.counts[cell]
        for cell in conflict_cells:
            self.counts[cell] = self.counts.get(cell, 0.0) + 1.0


def identify_risk_centers(grid: GridMap,
                          history: ConflictHistory | None = None,
                          structural_weight: float = 1.0) -> List[RiskCenter]:
    """Free cells of degree <= 2 (corridors, doors) plus cells with recent
    conflicts; weight = structural score + decayed conflict count."""
    weights: Dict[Cell, float] = {}
    for cell in grid.free_cells():
        degree = sum(1 for dx, dy in NEIGHBOR_OFFSETS
                     if grid.is_free(cell.x + dx, cell.y + dy))
        if degree <= 2:
            weights[cell] = structural_weight
    if history is not None:
        for cell, count in history.counts.items():
            weights[cell] = weights.get(cell, 0.0) + count
    return [RiskCenter(cell, weights[cell]) for cell in sorted(weights)]


def visibility(positions: Sequence[Cell], centers: Sequence[RiskCenter],
               fov_size: int = 7) -> Dict[int, Set[int]]:
    """center index -> agents whose FOV (Chebyshev box) covers it."""
    if fov_size % 2 != 1:
        raise ValueError("fov_size must be odd")
    radius = (fov_size - 1) // 2
    nn: Dict[int, Set[int]] = {}
    for u, center in enumerate(centers):
        agents = {i for i, p in enumerate(positions)
                  if abs(p.x - center.cell.x) <= radius
                  and abs(p.y - center.cell.y) <= radius}
        nn[u] = agents
    return nn


def coverage_value(selected: Set[int], centers: Sequence[RiskCenter],
                   nn: Mapping[int, Set[int]],
                   p_nominal: Mapping[int, float]) -> float:
    """F(S): probability-weighted coverage of the risk centers."""
    total = 0.0
    for u, center in enumerate(centers):
        miss = 1.0
        for i in selected & nn[u]:
            miss *= 1.0 - p_nominal[i]
        total += center.weight * (1.0 - miss)
    return total


def greedy_select(centers: Sequence[RiskCenter], candidates: Sequence[int],
                  nn: Mapping[int, Set[int]], p_nominal: Mapping[int, float],
                  k: int) -> Set[int]:
    """Standard greedy; stops at k picks or when all gains are <= 0.
    Ties broken by lowest agent id."""
    selected: Set[int] = set()
    remaining = sorted(candidates)
    # Incremental bookkeeping: per-center miss probability, per-candidate
    # covered-center lists. Marginal gain of i given S is
    # sum_{u: i in nn[u]} w_u * miss_u * p_i, so each pick is linear in the
    # total coverage lists instead of re-evaluating F from scratch.
    miss = [1.0] * len(centers)
    covers: Dict[int, List[int]] = {i: [] for i in remaining}
    for u, agents in nn.items():
        for i in agents:
            if i in covers:
                covers[i].append(u)
    for _ in range(k):
        best_gain, best_agent = 0.0, None
        for i in remaining:
            gain = p_nominal[i] * sum(centers[u].weight * miss[u]
                                      for u in covers[i])
            if gain > best_gain + 1e-15:
                best_gain, best_agent = gain, i
        if best_agent is None:
            break
        selected.add(best_agent)
        remaining.remove(best_agent)
        for u in covers[best_agent]:
            miss[u] *= 1.0 - p_nominal[best_agent]
    return selected


def ul_bit_length(peers_in_fov: int, d_h: int = 128, bits_per_element: int = 16,
                  coord_bits: int = 16, header_bits: int = 32) -> int:
    """header + (1 + peers) * (2 coords + hidden state)."""
    if peers_in_fov < 0:
        raise ValueError("peer count must be non-negative")
    return header_bits + (1 + peers_in_fov) * (2 * coord_bits + d_h * bits_per_element)


def allocate_ul(sender_bits: Mapping[int, int], snr_db: Mapping[int, float],
                budget: CommBudget, params: LinkBudgetParams) -> UplinkPlan:
    """RB/rate allocation under the C_UL budget.

    Everyone starts with one RB; the remaining budget goes one RB at a time
    to the sender with the worst current p_loss until all meet the target
    PER or the budget is exhausted. Ties go to the lower agent id.
    """
    senders = sorted(sender_bits, key=lambda i: (-sender_bits[i], i))
    if not senders:
        raise ValueError("no senders to allocate")
    if budget.c_ul < len(senders):
        raise ValueError("insufficient RBs: C_UL smaller than sender count")

    n1 = blocklength(1, params)
    rb = {i: 1 for i in senders}

    def loss(i: int) -> float:
        n = n1 * rb[i]
        rate = sender_bits[i] / n
        return p_loss(db_to_linear(snr_db[i]), rate, n)

    spent = len(senders)
    while spent < budget.c_ul:
        worst = max(senders, key=lambda i: (loss(i), -i))
        if loss(worst) <= budget.target_per:
            break
        rb[worst] += 1
        spent += 1

    grants = []
    for i in senders:
        n = n1 * rb[i]
        rate = sender_bits[i] / n
        grants.append(UplinkGrant(agent=i, rb_count=rb[i], rate=rate,
                                  bits=sender_bits[i],
                                  nominal_success=1.0 - loss(i)))
    return UplinkPlan(grants=grants)
