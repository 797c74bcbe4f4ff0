"""Payment mechanisms.

Three schemes are supported:

* fixed price  -- a posted per-KB price; only buyers bidding at or above it
  participate and they pay the posted price per KB.
* VCG-per-epoch -- each epoch, charge every buyer the externality she imposes
  within that epoch: the value others would get in the value-optimal split of
  capacity without her, minus what they actually get with her present.
* resampling rebates -- each bid is randomly perturbed downward with
  probability ``mu`` before routing; buyers pay bid * bytes, and perturbed
  buyers get a rebate of bytes * (bid - reserve) / mu.  The rebate makes
  truthful bidding optimal in expectation without any counterfactual
  allocation knowledge.

The perturbation map is b~ = r + (b - r) * gamma^(1/(1-mu)) with
gamma ~ Uniform[0,1], so conditional on being perturbed,
Pr(b~ <= a) = ((a - r)/(b - r))^(1-mu).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Sequence

import numpy as np

from bandshare.routing import EpochRequest, allocate_fq

__all__ = [
    "BidRecord",
    "MeanCI",
    "PaymentOutcome",
    "bks_settle",
    "expected_bks_payment",
    "fixed_price_eligibility",
    "fixed_price_settle",
    "resample_bid",
    "summarize",
    "vmm_epoch_charges",
]

_Z95 = 1.959963984540054  # two-sided 95% normal quantile


@dataclass(frozen=True)
class BidRecord:
    """A submitted bid together with its (possibly perturbed) routing key."""

    buyer_id: str
    bid: float
    perturbed_bid: float
    resampled: bool
    reserve: float
    mu: float

    def __post_init__(self) -> None:
        if not (self.reserve - 1e-12 <= self.perturbed_bid <= self.bid + 1e-12):
            raise ValueError(
                f"perturbed bid {self.perturbed_bid} outside [{self.reserve}, {self.bid}]"
            )
        if not self.resampled and self.perturbed_bid != self.bid:
            raise ValueError("unperturbed record must keep the submitted bid")


@dataclass(frozen=True)
class PaymentOutcome:
    """Settled payment for one buyer: net = gross - rebate."""

    buyer_id: str
    bytes: float
    gross: float
    rebate: float

    @property
    def net(self) -> float:
        return self.gross - self.rebate


def perturbed_bid_value(b: float, r: float, mu: float, gamma: float) -> float:
    """The downward perturbation map: r + (b - r) * gamma^(1/(1-mu)).

    With r = 0 this degrades gracefully to b * gamma^(1/(1-mu)).
    """
    return r + (b - r) * gamma ** (1.0 / (1.0 - mu))


def resample_bid(
    buyer_id: str, b: float, r: float, mu: float, rng: np.random.Generator
) -> BidRecord:
    """Perturb a bid downward with probability ``mu``.

    Draws the coin and gamma unconditionally (two uniforms per call) so that
    replays against a fixed stream stay aligned across counterfactual bid
    values.
    """
    if not 0 <= r <= b:
        raise ValueError(f"need 0 <= reserve <= bid, got r={r}, b={b}")
    if not 0 < mu < 1:
        raise ValueError(f"mu must be in (0, 1), got {mu}")
    coin = rng.random()
    gamma = rng.random()
    if coin >= mu:
        return BidRecord(buyer_id, b, b, False, r, mu)
    return BidRecord(buyer_id, b, perturbed_bid_value(b, r, mu, gamma), True, r, mu)


def bks_settle(record: BidRecord, x: float) -> PaymentOutcome:
    """Settle a buyer at departure: gross b*x, rebate x*(b-r)/mu if perturbed.

    Rebates routinely exceed the gross charge; negative net payments are
    expected and are what the multi-seller revenue pool absorbs.
    """
    if x < 0:
        raise ValueError(f"total bytes must be >= 0, got {x}")
    gross = record.bid * x
    rebate = x * (record.bid - record.reserve) / record.mu if record.resampled else 0.0
    return PaymentOutcome(record.buyer_id, x, gross, rebate)


def _greedy_value_allocation(
    bids: Mapping[str, float], demands: Mapping[str, float], c: float
) -> Dict[str, float]:
    """Value-maximal within-epoch split: fill in descending bid order.

    Valid as an optimum because values are linear per KB under a single
    capacity constraint.  Buyers tied at the marginal bid share the leftover
    capacity max-min fairly, keeping the result deterministic.
    """
    grants = {b: 0.0 for b in bids}
    remaining = c
    for bid_value in sorted(set(bids.values()), reverse=True):
        group = [b for b, v in bids.items() if v == bid_value]
        group_demand = sum(demands[b] for b in group)
        if group_demand <= remaining:
            for b in group:
                grants[b] = demands[b]
            remaining -= group_demand
        else:
            # Equal shares capped at demand, spare redistributed within the tie.
            reqs = [EpochRequest(b, demands[b]) for b in group]
            grants.update(allocate_fq(reqs, remaining))
            remaining = 0.0
        if remaining <= 0:
            break
    return grants


def vmm_epoch_charges(
    bids: Mapping[str, float], demands: Mapping[str, float], c: float
) -> Dict[str, float]:
    """Per-epoch VCG externality charge for every buyer.

    charge_i = (others' value in the optimal split without i)
             - (others' value in the optimal split with i present).
    """
    if c < 0:
        raise ValueError(f"capacity must be >= 0, got {c}")
    if set(bids) != set(demands):
        raise ValueError("bids and demands must cover the same buyers")
    base = _greedy_value_allocation(bids, demands, c)
    charges = {}
    for i in bids:
        others_with_i = sum(bids[j] * base[j] for j in bids if j != i)
        without = _greedy_value_allocation(
            {j: v for j, v in bids.items() if j != i},
            {j: v for j, v in demands.items() if j != i},
            c,
        )
        others_without_i = sum(bids[j] * without[j] for j in without)
        charges[i] = max(0.0, others_without_i - others_with_i)
    return charges


def fixed_price_eligibility(bids: Mapping[str, float], p: float) -> set[str]:
    """Buyers bidding at or above the posted price."""
    if p < 0:
        raise ValueError(f"posted price must be >= 0, got {p}")
    return {b for b, v in bids.items() if v >= p}


def fixed_price_settle(x: float, p: float) -> float:
    """Linear payment p per KB."""
    if x < 0 or p < 0:
        raise ValueError("bytes and price must be >= 0")
    return p * x


@dataclass(frozen=True)
class MeanCI:
    """Sample mean with a normal-approximation 95% confidence interval."""

    mean: float
    ci_low: float
    ci_high: float
    n: int

    @property
    def half_width(self) -> float:
        return (self.ci_high - self.ci_low) / 2.0


def summarize(samples: Sequence[float]) -> MeanCI:
    arr = np.asarray(samples, dtype=float)
    n = arr.size
    if n == 0:
        raise ValueError("no samples")
    mean = float(arr.mean())
    if n == 1:
        return MeanCI(mean, mean, mean, 1)
    half = _Z95 * float(arr.std(ddof=1)) / math.sqrt(n)
    return MeanCI(mean, mean - half, mean + half, n)


def expected_bks_payment(
    run: Callable[[int], Mapping[str, float]], n_samples: int, seed: int
) -> Dict[str, MeanCI]:
    """Monte Carlo mean net payment per buyer over independent seeded runs.

    ``run(seed)`` executes one full mechanism round and returns the net
    payment per buyer.  Missing buyers in a run count as 0.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    seeds = np.random.default_rng(seed).integers(0, 2**63 - 1, size=n_samples)
    results = [run(int(s)) for s in seeds]
    buyers = sorted({b for r in results for b in r})
    return {
        b: summarize([float(r.get(b, 0.0)) for r in results]) for b in buyers
    }
