"""Per-epoch capacity allocation policies.

All three policies take the demands buyers present to the router in one epoch
and split the router's capacity ``c`` (KB) among them:

* FIFO  -- proportional to within-epoch demand (the flow-level stand-in for a
  first-in-first-out queue),
* FQ    -- max-min fair sharing with recursive redistribution of unused shares,
* SPQ   -- strict priority by key (highest first), random tie-break.

Grants are real-valued KB; every policy is work-conserving, never grants more
than demand, and never exceeds ``c`` in total.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np

__all__ = [
    "EpochAllocation",
    "EpochRequest",
    "allocate_fifo",
    "allocate_fq",
    "allocate_spq",
]

# One epoch's outcome: buyer id -> granted capacity (KB).  Every policy
# guarantees grants >= 0, grants <= demand, total <= capacity, and full
# service whenever total demand fits.
EpochAllocation = Dict[str, float]

# Numeric floor for the FQ water-filling loop (KB).
_FQ_EPS = 1e-9


@dataclass(frozen=True)
class EpochRequest:
    """What one buyer offers the router this epoch.

    ``priority`` is the key SPQ sorts on (the perturbed bid under resampling
    mechanisms); FIFO and FQ ignore it.
    """

    buyer_id: str
    demand: float
    priority: float = 0.0

    def __post_init__(self) -> None:
        if self.demand < 0:
            raise ValueError(f"presented demand must be >= 0, got {self.demand}")


def allocate_fifo(requests: Sequence[EpochRequest], c: float) -> EpochAllocation:
    """Split capacity proportionally to presented demand."""
    if c < 0:
        raise ValueError(f"capacity must be >= 0, got {c}")
    total = sum(r.demand for r in requests)
    if total <= c:
        return {r.buyer_id: r.demand for r in requests}
    return {r.buyer_id: c * r.demand / total for r in requests}


def allocate_fq(requests: Sequence[EpochRequest], c: float) -> EpochAllocation:
    """Max-min fair split: equal shares, unused capacity redistributed.

    Repeatedly gives every unsatisfied buyer an equal share of the remaining
    capacity, capped at her leftover demand, until everyone is satisfied or
    the remainder falls below the numeric floor.  Each round saturates at
    least one buyer (or exhausts capacity), so the loop is finite and the
    result is the exact max-min fair allocation.
    """
    if c < 0:
        raise ValueError(f"capacity must be >= 0, got {c}")
    grants = {r.buyer_id: 0.0 for r in requests}
    need = {r.buyer_id: r.demand for r in requests}
    remaining = c
    unsatisfied = [r.buyer_id for r in requests if need[r.buyer_id] > 0]
    while unsatisfied and remaining > _FQ_EPS:
        share = remaining / len(unsatisfied)
        still = []
        for bid in unsatisfied:
            take = min(share, need[bid])
            grants[bid] += take
            need[bid] -= take
            remaining -= take
            if need[bid] > _FQ_EPS:
                still.append(bid)
        if len(still) == len(unsatisfied):
            break  # nobody saturated: all took the full share, capacity is gone
        unsatisfied = still
    return grants


def allocate_spq(
    requests: Sequence[EpochRequest], c: float, rng: np.random.Generator
) -> EpochAllocation:
    """Serve buyers in descending priority order, each up to her demand.

    Exact priority ties are broken by a uniformly random permutation drawn
    from ``rng``; one draw is consumed per request, in request order, so
    replays with a fixed stream stay aligned across counterfactual bids.
    """
    if c < 0:
        raise ValueError(f"capacity must be >= 0, got {c}")
    tiebreak = rng.random(len(requests))
    order = sorted(range(len(requests)), key=lambda i: (-requests[i].priority, tiebreak[i]))
    grants = {}
    remaining = c
    for i in order:
        take = min(remaining, requests[i].demand)
        grants[requests[i].buyer_id] = take
        remaining -= take
    return grants
