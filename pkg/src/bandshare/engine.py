"""Discrete-epoch session driver.

``run_session`` plays out one seller's market for ``horizon`` epochs: buyers
arrive and depart, query their demand realizations, push traffic through the
configured routing policy, and settle payments under the configured mechanism.
Sessions are deterministic given the master seed, which feeds independent
named streams for demand draws, priority tie-breaks, and bid resampling, so a
counterfactual bid sweep replays the exact same world.

Memoryless scenarios with straightforward buyers run through a vectorized
path; anything stateful (buffered or impatient demand, padding, delaying, the
threshold-hybrid policy) takes the epoch loop.  Both produce identical
results.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from bandshare.demand import DemandRealization, DemandSpec
from bandshare.payments import (
    BidRecord,
    MeanCI,
    PaymentOutcome,
    bks_settle,
    fixed_price_settle,
    perturbed_bid_value,
    summarize,
    vmm_epoch_charges,
)
from bandshare.pooling import LedgerRow, SellerLedger
from bandshare.routing import EpochRequest, allocate_fifo, allocate_fq

__all__ = [
    "BuyerSpec",
    "HybridBoost",
    "MonteCarloStats",
    "Scenario",
    "SessionOutcome",
    "Strategy",
    "build_ledger",
    "offline_optimum",
    "run_monte_carlo",
    "run_session",
    "strategy_delay",
    "strategy_greedy",
    "strategy_misreport",
    "strategy_pad",
]

ROUTING_POLICIES = ("spq", "fq", "fifo", "hybrid")
MECHANISMS = ("bks", "vmm", "fixed")

PadSchedule = Union[float, Callable[[int], float]]


@dataclass(frozen=True)
class Strategy:
    """How a buyer maps true demand and value to router-visible behavior.

    greedy    -- present the full true demand each epoch, bid truthfully.
    pad       -- present demand plus fake traffic; padding consumes capacity
                 and is billed, but carries no value and does not advance the
                 demand model's cumulative-traffic argument.
    delay     -- withhold each epoch's demand and re-present it after a fixed
                 number of epochs (demand withheld past departure is lost).
    misreport -- greedy demand behavior with the bid scaled by a factor.

    Whatever the strategy, bytes consumed in an epoch count as real (valued,
    demand-advancing) traffic only up to that epoch's true demand; padding and
    stale re-presented data are billed junk.
    """

    kind: str
    pad: PadSchedule = 0.0
    delay_epochs: int = 0
    bid_factor: float = 1.0

    def pad_at(self, t: int) -> float:
        amount = self.pad(t) if callable(self.pad) else self.pad
        if amount < 0:
            raise ValueError(f"pad schedule must be nonnegative, got {amount} at t={t}")
        return float(amount)


def strategy_greedy() -> Strategy:
    return Strategy("greedy")


def strategy_pad(pad: PadSchedule) -> Strategy:
    if not callable(pad) and pad < 0:
        raise ValueError("pad schedule must be nonnegative")
    return Strategy("pad", pad=pad)


def strategy_delay(delay_epochs: int) -> Strategy:
    if delay_epochs < 0:
        raise ValueError("delay must be nonnegative")
    return Strategy("delay", delay_epochs=delay_epochs)


def strategy_misreport(bid_factor: float) -> Strategy:
    if bid_factor < 0:
        raise ValueError("bid factor must be nonnegative")
    return Strategy("misreport", bid_factor=bid_factor)


@dataclass(frozen=True)
class BuyerSpec:
    """One buyer: true per-KB value, demand model, allocation period, strategy."""

    buyer_id: str
    value: float
    demand: DemandSpec
    arrival: int = 1
    departure: int = 600
    strategy: Strategy = field(default_factory=strategy_greedy)

    def __post_init__(self) -> None:
        if self.value < 0:
            raise ValueError(f"value must be >= 0, got {self.value}")
        if not 0 <= self.arrival <= self.departure:
            raise ValueError(
                f"need 0 <= arrival <= departure, got [{self.arrival}, {self.departure}]"
            )

    def submitted_bid(self) -> float:
        return self.value * self.strategy.bid_factor


@dataclass(frozen=True)
class HybridBoost:
    """Threshold-hybrid routing: pace one buyer to a byte target by a deadline.

    Until the designated buyer has accumulated ``target_bytes`` (or the
    deadline passes), she receives a top-priority reservation each epoch equal
    to the remaining target spread evenly over the epochs left; all other
    capacity is allocated by plain strict priority, in which she competes
    normally for anything beyond the reservation.
    """

    buyer_id: str
    target_bytes: float
    deadline: int

    def __post_init__(self) -> None:
        if self.target_bytes < 0:
            raise ValueError("boost target must be >= 0")
        if self.deadline < 1:
            raise ValueError("boost deadline must be >= 1")


@dataclass(frozen=True)
class Scenario:
    """A complete market configuration for one seller."""

    buyers: Tuple[BuyerSpec, ...]
    capacity: float
    routing: str = "spq"
    mechanism: str = "bks"
    mu: float = 0.2
    reserve: float = 0.0
    price: float = 0.0
    horizon: int = 600
    hybrid: Optional[HybridBoost] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "buyers", tuple(self.buyers))
        if self.capacity <= 0:
            raise ValueError(f"capacity must be > 0, got {self.capacity}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.routing not in ROUTING_POLICIES:
            raise ValueError(f"unknown routing policy {self.routing!r}")
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if not 0 < self.mu < 1:
            raise ValueError(f"mu must be in (0, 1), got {self.mu}")
        if self.reserve < 0 or self.price < 0:
            raise ValueError("reserve and price must be >= 0")
        ids = [b.buyer_id for b in self.buyers]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate buyer ids")
        if self.routing == "hybrid":
            if self.hybrid is None:
                raise ValueError("hybrid routing needs boost parameters")
            if self.hybrid.buyer_id not in ids:
                raise ValueError(f"boosted buyer {self.hybrid.buyer_id!r} is not in the scenario")


@dataclass
class SessionOutcome:
    """Everything observable from one simulated session."""

    buyer_ids: List[str]
    bytes: Dict[str, float]  # real (valued) traffic per buyer
    billed_bytes: Dict[str, float]  # includes padding
    bids: Dict[str, float]  # submitted
    perturbed_bids: Dict[str, float]  # routing keys (equal to bids outside bks)
    payments: Dict[str, PaymentOutcome]
    utilities: Dict[str, float]
    welfare: float
    seller_revenue: float
    trace: np.ndarray  # (horizon, n) consumed KB per epoch, column order = buyer_ids
    mechanism: str
    reserve: float
    efficiency: Optional[float] = None


def _root_streams(seed: int) -> tuple[np.random.SeedSequence, ...]:
    return tuple(np.random.SeedSequence(seed).spawn(3))  # demand, ties, resampling


def _materialize_demands(
    scenario: Scenario, demand_ss: np.random.SeedSequence
) -> List[DemandRealization]:
    seeds = demand_ss.generate_state(len(scenario.buyers), dtype=np.uint64)
    return [
        buyer.demand.realize(int(s)) for buyer, s in zip(scenario.buyers, seeds)
    ]


def _bid_records(
    scenario: Scenario,
    resample_ss: np.random.SeedSequence,
    bid_override: Optional[Mapping[str, float]],
    force_resample: Optional[Mapping[str, bool]],
) -> Dict[str, BidRecord]:
    """Submitted and (for bks) perturbed bids, one record per buyer.

    Resampling draws are consumed for every buyer in scenario order, even the
    excluded ones, so counterfactual replays against the same seed see the
    same coins.  ``force_resample`` overrides the coin while keeping the gamma
    draw (Rao-Blackwellized estimators rely on this).
    """
    override = bid_override or {}
    forced = force_resample or {}
    rng = np.random.default_rng(resample_ss)
    records = {}
    for buyer in scenario.buyers:
        bid = float(override.get(buyer.buyer_id, buyer.submitted_bid()))
        if scenario.mechanism == "bks" and bid >= scenario.reserve:
            coin = rng.random()
            gamma = rng.random()
            want = forced.get(buyer.buyer_id)
            resampled = (coin < scenario.mu) if want is None else bool(want)
            if resampled:
                perturbed = perturbed_bid_value(bid, scenario.reserve, scenario.mu, gamma)
            else:
                perturbed = bid
            records[buyer.buyer_id] = BidRecord(
                buyer.buyer_id, bid, perturbed, resampled, scenario.reserve, scenario.mu
            )
        else:
            if scenario.mechanism == "bks":
                rng.random()
                rng.random()
            records[buyer.buyer_id] = BidRecord(
                buyer.buyer_id, bid, bid, False, min(scenario.reserve, bid), scenario.mu
            )
    return records


def _eligible(scenario: Scenario, bid: float) -> bool:
    if scenario.mechanism == "fixed":
        return bid >= scenario.price
    return bid >= scenario.reserve


def _settle(
    scenario: Scenario,
    buyer: BuyerSpec,
    record: BidRecord,
    billed: float,
    vmm_accrued: float,
) -> PaymentOutcome:
    if scenario.mechanism == "bks":
        return bks_settle(record, billed)
    if scenario.mechanism == "vmm":
        return PaymentOutcome(buyer.buyer_id, billed, vmm_accrued, 0.0)
    return PaymentOutcome(
        buyer.buyer_id, billed, fixed_price_settle(billed, scenario.price), 0.0
    )


def _can_vectorize(scenario: Scenario, realizations: Sequence[DemandRealization]) -> bool:
    if scenario.routing == "hybrid":
        return False
    if any(not r.memoryless for r in realizations):
        return False
    if any(b.strategy.kind in ("pad", "delay") for b in scenario.buyers):
        return False
    return True


def run_session(
    scenario: Scenario,
    seed: int,
    *,
    bid_override: Optional[Mapping[str, float]] = None,
    force_resample: Optional[Mapping[str, bool]] = None,
    compute_efficiency: bool = False,
) -> SessionOutcome:
    """Simulate one session.  Deterministic in (scenario, seed, overrides).

    ``bid_override`` replaces a buyer's submitted bid (for counterfactual
    sweeps against the same world); ``force_resample`` pins a buyer's
    resampling coin.  With ``compute_efficiency`` the outcome carries
    welfare / offline optimum for the same world (see
    :func:`offline_optimum` for the oracle's limits).
    """
    demand_ss, tie_ss, resample_ss = _root_streams(seed)
    realizations = _materialize_demands(scenario, demand_ss)
    records = _bid_records(scenario, resample_ss, bid_override, force_resample)
    outcome = None
    if _can_vectorize(scenario, realizations):
        priorities = [records[b.buyer_id].perturbed_bid for b in scenario.buyers]
        elig = [_eligible(scenario, records[b.buyer_id].bid) for b in scenario.buyers]
        keys = [p for p, e in zip(priorities, elig) if e]
        if len(set(keys)) == len(keys):  # ties need the per-epoch tie-break loop
            outcome = _run_vectorized(scenario, realizations, records)
    if outcome is None:
        outcome = _run_loop(scenario, realizations, records, tie_ss)
    if compute_efficiency:
        optimum = offline_optimum(scenario, seed)
        outcome.efficiency = outcome.welfare / optimum if optimum > 0 else 1.0
    return outcome


def _run_loop(
    scenario: Scenario,
    realizations: Sequence[DemandRealization],
    records: Dict[str, BidRecord],
    tie_ss: np.random.SeedSequence,
) -> SessionOutcome:
    buyers = scenario.buyers
    n = len(buyers)
    T = scenario.horizon
    tie_rng = np.random.default_rng(tie_ss)

    elig = [_eligible(scenario, records[b.buyer_id].bid) for b in buyers]
    priorities = [records[b.buyer_id].perturbed_bid for b in buyers]
    arrivals = [b.arrival for b in buyers]
    departures = [b.departure for b in buyers]
    strategies = [b.strategy for b in buyers]
    kinds = [s.kind for s in strategies]
    queries = [r.query for r in realizations]
    x_real = [0.0] * n
    x_billed = [0.0] * n
    vmm_accrued = [0.0] * n
    gen_history: List[Dict[int, float]] = [dict() for _ in range(n)]
    trace = np.zeros((T, n))
    boost = scenario.hybrid if scenario.routing == "hybrid" else None
    is_vmm = scenario.mechanism == "vmm"

    static_order: Optional[List[int]] = None
    if scenario.routing in ("spq", "hybrid") and len(set(priorities)) == n:
        static_order = sorted(range(n), key=lambda i: -priorities[i])
    plain_spq = scenario.routing == "spq" and static_order is not None
    capacity = scenario.capacity

    for t in range(1, T + 1):
        active: List[int] = []
        presented = [0.0] * n
        truth = [0.0] * n
        for i in range(n):
            if not elig[i] or t < arrivals[i] or t > departures[i]:
                continue
            active.append(i)
            try:
                d = queries[i](t, x_real[i])
            except Exception as exc:
                raise RuntimeError(
                    f"demand query failed for buyer {buyers[i].buyer_id!r} "
                    f"at epoch {t}: {exc}"
                ) from exc
            truth[i] = d
            kind = kinds[i]
            if kind == "delay":
                gen_history[i][t] = d
                presented[i] = gen_history[i].get(t - strategies[i].delay_epochs, 0.0)
            elif kind == "pad":
                presented[i] = d + strategies[i].pad_at(t)
            else:
                presented[i] = d

        if active:
            if plain_spq:
                # Distinct static priorities: greedy fill, no tie draws needed.
                grants = {}
                remaining = capacity
                for i in static_order:
                    p = presented[i]
                    take = p if p <= remaining else remaining
                    grants[i] = take
                    remaining -= take
            else:
                grants = _allocate_epoch(
                    scenario, t, active, presented, priorities, x_real, boost,
                    static_order, tie_rng,
                )
            if is_vmm:
                charges = vmm_epoch_charges(
                    {buyers[i].buyer_id: records[buyers[i].buyer_id].bid for i in active},
                    {buyers[i].buyer_id: presented[i] for i in active},
                    capacity,
                )
                for i in active:
                    vmm_accrued[i] += charges[buyers[i].buyer_id]
            row = trace[t - 1]
            for i in active:
                consumed = grants[i]
                # Only traffic backed by current true demand carries value and
                # advances the demand model; padded or stale bytes are billed
                # but worthless.
                real = consumed if consumed <= truth[i] else truth[i]
                x_real[i] += real
                x_billed[i] += consumed
                row[i] = consumed

    payments = {
        b.buyer_id: _settle(scenario, b, records[b.buyer_id], x_billed[i], vmm_accrued[i])
        for i, b in enumerate(buyers)
    }
    return _finish(scenario, records, x_real, x_billed, payments, trace)


def _allocate_epoch(
    scenario: Scenario,
    t: int,
    active: List[int],
    presented: List[float],
    priorities: List[float],
    x_real: List[float],
    boost: Optional[HybridBoost],
    static_order: Optional[List[int]],
    tie_rng: np.random.Generator,
) -> Dict[int, float]:
    """Grants for one epoch, keyed by buyer position."""
    buyers = scenario.buyers
    c = scenario.capacity

    if scenario.routing == "fifo":
        reqs = [EpochRequest(buyers[i].buyer_id, presented[i]) for i in active]
        by_id = allocate_fifo(reqs, c)
        return {i: by_id[buyers[i].buyer_id] for i in active}
    if scenario.routing == "fq":
        reqs = [EpochRequest(buyers[i].buyer_id, presented[i]) for i in active]
        by_id = allocate_fq(reqs, c)
        return {i: by_id[buyers[i].buyer_id] for i in active}

    # spq / hybrid
    demands = {i: presented[i] for i in active}
    grants = {i: 0.0 for i in active}
    remaining = c
    if boost is not None and t <= boost.deadline:
        bi = next(
            (i for i in active if buyers[i].buyer_id == boost.buyer_id), None
        )
        if bi is not None and x_real[bi] < boost.target_bytes:
            pace = (boost.target_bytes - x_real[bi]) / (boost.deadline - t + 1)
            reserved = min(pace, demands[bi], remaining)
            grants[bi] += reserved
            demands[bi] -= reserved
            remaining -= reserved

    if static_order is not None:
        order = [i for i in static_order if i in demands]
    else:
        tie = tie_rng.random(len(active))
        pos = {i: k for k, i in enumerate(active)}
        order = sorted(active, key=lambda i: (-priorities[i], tie[pos[i]]))
    for i in order:
        take = demands[i] if demands[i] <= remaining else remaining
        grants[i] += take
        remaining -= take
    return grants


def _demand_matrix(
    scenario: Scenario, realizations: Sequence[DemandRealization]
) -> np.ndarray:
    """(n, T) presented-demand matrix for memoryless greedy buyers, masked to
    each buyer's active window (eligibility is applied separately)."""
    T = scenario.horizon
    demand = np.zeros((len(scenario.buyers), T))
    for i, (buyer, real) in enumerate(zip(scenario.buyers, realizations)):
        lo = max(1, buyer.arrival)
        hi = min(T, buyer.departure)
        if lo <= hi:
            demand[i, lo - 1 : hi] = real.query_epochs(lo, hi)
    return demand


def _run_vectorized(
    scenario: Scenario,
    realizations: Sequence[DemandRealization],
    records: Dict[str, BidRecord],
    demand_base: Optional[np.ndarray] = None,
) -> SessionOutcome:
    """Vector path: memoryless demand, greedy presentation, static priorities.

    ``demand_base`` lets counterfactual sweeps reuse one demand matrix across
    many bid configurations of the same world.
    """
    buyers = scenario.buyers
    n = len(buyers)
    T = scenario.horizon
    elig = [_eligible(scenario, records[b.buyer_id].bid) for b in buyers]
    priorities = [records[b.buyer_id].perturbed_bid for b in buyers]

    demand = (demand_base if demand_base is not None else
              _demand_matrix(scenario, realizations)).copy()
    for i in range(n):
        if not elig[i]:
            demand[i] = 0.0

    c = scenario.capacity
    if scenario.routing == "spq":
        grants = _waterfall(demand, priorities, c)
    elif scenario.routing == "fifo":
        total = demand.sum(axis=0)
        scale = np.where(total > c, c / np.maximum(total, 1e-300), 1.0)
        grants = demand * scale
    else:  # fq
        grants = _maxmin_columns(demand, c)

    vmm_totals = np.zeros(n)
    if scenario.mechanism == "vmm":
        bids = [records[b.buyer_id].bid for b in buyers]
        base = _waterfall(demand, bids, c)
        values = np.array(bids)[:, None] * base
        for i in range(n):
            if not elig[i]:
                continue
            others = [j for j in range(n) if j != i]
            sub = _waterfall(demand[others], [bids[j] for j in others], c)
            v_without = (np.array([bids[j] for j in others])[:, None] * sub).sum(axis=0)
            v_with = values[others].sum(axis=0)
            vmm_totals[i] = np.maximum(0.0, v_without - v_with).sum()

    x = grants.sum(axis=1)
    payments = {}
    for i, buyer in enumerate(buyers):
        payments[buyer.buyer_id] = _settle(
            scenario, buyer, records[buyer.buyer_id], float(x[i]), float(vmm_totals[i])
        )
    x_list = [float(v) for v in x]
    return _finish(scenario, records, x_list, x_list, payments, grants.T.copy())


def _waterfall(demand: np.ndarray, priorities: Sequence[float], c: float) -> np.ndarray:
    """Strict-priority fill of each epoch column; priorities must be distinct."""
    grants = np.zeros_like(demand)
    remaining = np.full(demand.shape[1], float(c))
    for i in sorted(range(demand.shape[0]), key=lambda j: -priorities[j]):
        take = np.minimum(remaining, demand[i])
        grants[i] = take
        remaining -= take
    return grants


def _maxmin_columns(demand: np.ndarray, c: float) -> np.ndarray:
    """Max-min fair split of every epoch column (vectorized water-filling)."""
    n, T = demand.shape
    order = np.argsort(demand, axis=0, kind="stable")
    sorted_d = np.take_along_axis(demand, order, axis=0)
    grants_sorted = np.zeros_like(sorted_d)
    remaining = np.full(T, float(c))
    for k in range(n):
        share = remaining / (n - k)
        take = np.minimum(sorted_d[k], share)
        grants_sorted[k] = take
        remaining -= take
    grants = np.zeros_like(demand)
    np.put_along_axis(grants, order, grants_sorted, axis=0)
    return grants


def _finish(
    scenario: Scenario,
    records: Dict[str, BidRecord],
    x_real: Sequence[float],
    x_billed: Sequence[float],
    payments: Dict[str, PaymentOutcome],
    trace: np.ndarray,
) -> SessionOutcome:
    buyers = scenario.buyers
    ids = [b.buyer_id for b in buyers]
    real = {b.buyer_id: float(x_real[i]) for i, b in enumerate(buyers)}
    billed = {b.buyer_id: float(x_billed[i]) for i, b in enumerate(buyers)}
    utilities = {
        b.buyer_id: b.value * real[b.buyer_id] - payments[b.buyer_id].net for b in buyers
    }
    welfare = sum(b.value * real[b.buyer_id] for b in buyers)
    revenue = sum(p.net for p in payments.values())
    return SessionOutcome(
        buyer_ids=ids,
        bytes=real,
        billed_bytes=billed,
        bids={bid: rec.bid for bid, rec in records.items()},
        perturbed_bids={bid: rec.perturbed_bid for bid, rec in records.items()},
        payments=payments,
        utilities=utilities,
        welfare=welfare,
        seller_revenue=revenue,
        trace=trace,
        mechanism=scenario.mechanism,
        reserve=scenario.reserve,
    )


def build_ledger(seller_id: str, outcome: SessionOutcome) -> SellerLedger:
    """Accounting-period ledger rows for one seller from a settled session."""
    rows = [
        LedgerRow(
            buyer_id=bid,
            bytes=outcome.payments[bid].bytes,
            bid=outcome.bids[bid],
            perturbed_bid=outcome.perturbed_bids[bid],
            rebate=outcome.payments[bid].rebate,
        )
        for bid in outcome.buyer_ids
    ]
    return SellerLedger(seller_id, outcome.reserve, rows)


# -- offline optimum ---------------------------------------------------------

_SEARCH_MAX_BUYERS = 4
_SEARCH_MAX_EPOCHS = 60


def offline_optimum(scenario: Scenario, seed: int) -> float:
    """Best achievable total value for the world drawn from ``seed``.

    For memoryless demand this is the per-epoch value-greedy allocation and is
    exact (every realized welfare is bounded by it).  For stateful demand it
    searches over per-epoch priority orderings (desk scale only: at most 4
    buyers and 60 epochs); fractional pacing policies can in principle beat
    every pure ordering on stateful demand, so there the value is a strong
    baseline rather than a true upper bound.
    """
    demand_ss, _, _ = _root_streams(seed)
    realizations = _materialize_demands(scenario, demand_ss)
    buyers = scenario.buyers
    T = scenario.horizon
    c = scenario.capacity

    if all(r.memoryless for r in realizations):
        total = 0.0
        values = [b.value for b in buyers]
        demand = np.zeros((len(buyers), T))
        for i, (buyer, real) in enumerate(zip(buyers, realizations)):
            lo, hi = max(1, buyer.arrival), min(T, buyer.departure)
            if lo <= hi:
                demand[i, lo - 1 : hi] = real.query_epochs(lo, hi)
        if len(set(values)) == len(values):
            grants = _waterfall(demand, values, c)
            return float((np.array(values)[:, None] * grants).sum())
        from bandshare.payments import _greedy_value_allocation

        ids = [b.buyer_id for b in buyers]
        for t in range(T):
            alloc = _greedy_value_allocation(
                dict(zip(ids, values)), dict(zip(ids, demand[:, t])), c
            )
            total += sum(values[i] * alloc[ids[i]] for i in range(len(ids)))
        return total

    if len(buyers) > _SEARCH_MAX_BUYERS or T > _SEARCH_MAX_EPOCHS:
        raise ValueError(
            "offline optimum for stateful demand supports at most "
            f"{_SEARCH_MAX_BUYERS} buyers and {_SEARCH_MAX_EPOCHS} epochs"
        )

    n = len(buyers)
    memo: Dict[tuple, float] = {}

    def best(t: int, x: tuple) -> float:
        if t > T:
            return 0.0
        key = (t, x)
        cached = memo.get(key)
        if cached is not None:
            return cached
        active = [
            i for i in range(n) if buyers[i].arrival <= t <= buyers[i].departure
        ]
        if not active:
            value = best(t + 1, x)
            memo[key] = value
            return value
        demands = [realizations[i].query(t, x[i]) for i in active]
        result = -np.inf
        for perm in itertools.permutations(range(len(active))):
            remaining = c
            gained = 0.0
            new_x = list(x)
            for slot in perm:
                i = active[slot]
                take = min(remaining, demands[slot])
                gained += buyers[i].value * take
                new_x[i] = round(new_x[i] + take, 9)
                remaining -= take
            result = max(result, gained + best(t + 1, tuple(new_x)))
        memo[key] = result
        return result

    return best(1, (0.0,) * n)


# -- Monte Carlo -------------------------------------------------------------


@dataclass(frozen=True)
class MonteCarloStats:
    """Aggregates over independent seeded sessions."""

    n_runs: int
    welfare: MeanCI
    seller_revenue: MeanCI
    bytes: Dict[str, MeanCI]
    payments: Dict[str, MeanCI]
    utilities: Dict[str, MeanCI]


def _mc_worker(args: tuple) -> tuple:
    scenario, run_seed = args
    out = run_session(scenario, run_seed)
    return (
        out.welfare,
        out.seller_revenue,
        {b: out.bytes[b] for b in out.buyer_ids},
        {b: out.payments[b].net for b in out.buyer_ids},
        {b: out.utilities[b] for b in out.buyer_ids},
    )


def run_monte_carlo(
    scenario: Scenario, n_runs: int, seed: int, jobs: int = 1
) -> MonteCarloStats:
    """Mean and 95% CI of welfare, revenue, and per-buyer outcomes.

    Run seeds derive deterministically from ``seed``; the aggregation folds in
    run-index order, so results are identical for any ``jobs``.
    """
    if n_runs < 1:
        raise ValueError("need at least one run")
    run_seeds = np.random.default_rng(seed).integers(0, 2**63 - 1, size=n_runs)
    tasks = [(scenario, int(s)) for s in run_seeds]
    if jobs > 1 and n_runs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_mc_worker, tasks, chunksize=max(1, n_runs // (jobs * 8))))
    else:
        rows = [_mc_worker(t) for t in tasks]

    ids = [b.buyer_id for b in scenario.buyers]
    welfare = summarize([r[0] for r in rows])
    revenue = summarize([r[1] for r in rows])
    return MonteCarloStats(
        n_runs=n_runs,
        welfare=welfare,
        seller_revenue=revenue,
        bytes={b: summarize([r[2][b] for r in rows]) for b in ids},
        payments={b: summarize([r[3][b] for r in rows]) for b in ids},
        utilities={b: summarize([r[4][b] for r in rows]) for b in ids},
    )
