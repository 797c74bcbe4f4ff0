"""Buyer demand models.

A demand model answers "how many KB does this buyer want to move in epoch t,
given that she has moved x KB so far?".  Each model is materialized as a fixed
:class:`DemandRealization` whose randomness (if any) is drawn once at
construction from a seed, so repeated queries are deterministic and a
realization can be replayed across counterfactual simulations.

Units: one epoch is one second; demand and rates are KB per epoch.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

__all__ = [
    "DemandRealization",
    "DemandSpec",
    "FlowTraceParams",
    "NaturalCheck",
    "buffered_demand",
    "check_natural",
    "cliff_demand",
    "constant_demand",
    "flow_trace_demand",
    "impatient_demand",
    "increasing_rate_demand",
    "increasing_total_demand",
    "time_varying_demand",
]

GenFn = Callable[[int], float]
Gen = Union[GenFn, Sequence[float]]

# Probe grid used to spot-check monotonicity of user-supplied rate functions.
_MONOTONE_PROBE_MAX = 1e4
_MONOTONE_PROBE_POINTS = 512


@dataclass(frozen=True)
class DemandRealization:
    """A fixed draw of a demand function d(t, x).

    ``query(t, x)`` returns the demand (KB) for epoch ``t >= 1`` given
    cumulative real traffic ``x >= 0``.  Immutable after construction and safe
    to query concurrently.

    ``memoryless`` is True when d(t, x) does not depend on x at all;
    ``natural`` is the declared naturalness of the model family (verifiable
    with :func:`check_natural`).
    """

    model_id: str
    params: Mapping[str, object]
    memoryless: bool
    natural: bool
    _fn: Callable[[int, float], float] = field(repr=False)
    _bulk: Optional[Callable[[int, int], np.ndarray]] = field(default=None, repr=False)

    def query(self, t: int, x: float) -> float:
        if t < 1:
            raise ValueError(f"epoch index must be >= 1, got {t}")
        if x < 0:
            raise ValueError(f"cumulative bytes must be >= 0, got {x}")
        d = float(self._fn(t, x))
        if not math.isfinite(d) or d < 0:
            raise ValueError(
                f"model {self.model_id!r} produced invalid demand {d} at (t={t}, x={x})"
            )
        return d

    def query_epochs(self, lo: int, hi: int) -> np.ndarray:
        """Demand at x = 0 for every epoch in [lo, hi].

        Only meaningful for memoryless models (where demand does not depend on
        x); a vectorized shortcut is used when the model provides one.
        """
        if not self.memoryless:
            raise ValueError(f"model {self.model_id!r} depends on cumulative traffic")
        if lo < 1 or hi < lo:
            raise ValueError(f"bad epoch range [{lo}, {hi}]")
        if self._bulk is not None:
            return self._bulk(lo, hi)
        return np.array([self.query(t, 0.0) for t in range(lo, hi + 1)])


def _as_gen_fn(g: Gen, name: str) -> GenFn:
    """Normalize a per-epoch sequence to a callable on epochs >= 1.

    Sequences are 1-indexed by epoch and yield 0 beyond their end (the
    generation process has stopped).
    """
    if callable(g):
        return g
    seq = [float(v) for v in g]
    for p, v in enumerate(seq, start=1):
        if v < 0:
            raise ValueError(f"{name}: generation at epoch {p} is negative ({v})")

    def fn(p: int) -> float:
        return seq[p - 1] if 1 <= p <= len(seq) else 0.0

    return fn


def _check_weakly_increasing(g: Callable[[float], float], name: str) -> None:
    """Reject g if a probe grid reveals a decrease.

    For callables this is a spot check, not a proof; sequences passed to the
    increasing variants are rejected outright (the argument is continuous).
    """
    zs = np.linspace(0.0, _MONOTONE_PROBE_MAX, _MONOTONE_PROBE_POINTS)
    vals = [float(g(z)) for z in zs]
    for a, b in zip(vals, vals[1:]):
        if b < a - 1e-12:
            raise ValueError(f"{name}: rate function is not weakly increasing")


def constant_demand(k: float) -> DemandRealization:
    """A buyer that wants to send at a constant rate k."""
    if k < 0:
        raise ValueError(f"constant rate must be >= 0, got {k}")
    return DemandRealization(
        model_id="constant",
        params={"k": k},
        memoryless=True,
        natural=True,
        _fn=lambda t, x: k,
        _bulk=lambda lo, hi: np.full(hi - lo + 1, float(k)),
    )


def time_varying_demand(g: Gen) -> DemandRealization:
    """Data generated by g(t) that must be sent immediately: d(t, x) = g(t)."""
    fn = _as_gen_fn(g, "time_varying_demand")
    return DemandRealization(
        model_id="time_varying",
        params={"g": g},
        memoryless=True,
        natural=True,
        _fn=lambda t, x: fn(t),
    )


def buffered_demand(g: Gen) -> DemandRealization:
    """Data generated by g(t) and buffered until sent: d(t, x) = sum_{p<=t} g(p) - x.

    Clamped at 0 when x exceeds cumulative generation (reachable only under
    padding strategies, where billed traffic outruns real traffic).
    """
    fn = _as_gen_fn(g, "buffered_demand")
    # Lazy prefix sums; append-only under the GIL, recomputation is benign.
    prefix: list[float] = [0.0]
    lock = threading.Lock()

    def cum(t: int) -> float:
        if t >= len(prefix):
            with lock:
                while len(prefix) <= t:
                    p = len(prefix)
                    v = float(fn(p))
                    if v < 0:
                        raise ValueError(
                            f"buffered_demand: generation at epoch {p} is negative ({v})"
                        )
                    prefix.append(prefix[-1] + v)
        return prefix[t]

    return DemandRealization(
        model_id="buffered",
        params={"g": g},
        memoryless=False,
        natural=True,
        _fn=lambda t, x: max(0.0, cum(t) - x),
    )


def impatient_demand(k: float, p: int, m: float) -> DemandRealization:
    """A buyer who sends at rate k until epoch p, then gives up unless she has
    received strictly more than m KB of service by then."""
    if k < 0:
        raise ValueError(f"rate must be >= 0, got {k}")
    if p < 1:
        raise ValueError(f"patience epoch must be >= 1, got {p}")
    if m < 0:
        raise ValueError(f"minimum service must be >= 0, got {m}")

    def fn(t: int, x: float) -> float:
        if t <= p:
            return k
        return k if x > m else 0.0

    return DemandRealization(
        model_id="impatient",
        params={"k": k, "p": p, "m": m},
        memoryless=False,
        natural=True,
        _fn=fn,
    )


def increasing_rate_demand(g: Callable[[float], float]) -> DemandRealization:
    """Demand growing with the achieved average rate: d(t, x) = g(x / t), g weakly increasing."""
    if not callable(g):
        raise ValueError("increasing_rate_demand: g must be callable on a continuous argument")
    _check_weakly_increasing(g, "increasing_rate_demand")
    return DemandRealization(
        model_id="increasing_rate",
        params={"g": g},
        memoryless=False,
        natural=True,
        _fn=lambda t, x: g(x / t),
    )


def increasing_total_demand(g: Callable[[float], float]) -> DemandRealization:
    """Demand growing with the total already moved: d(t, x) = g(x), g weakly increasing."""
    if not callable(g):
        raise ValueError("increasing_total_demand: g must be callable on a continuous argument")
    _check_weakly_increasing(g, "increasing_total_demand")
    return DemandRealization(
        model_id="increasing_total",
        params={"g": g},
        memoryless=False,
        natural=True,
        _fn=lambda t, x: g(x),
    )


def cliff_demand(k: float, m: float) -> DemandRealization:
    """Deliberately unnatural fixture: full rate k while x < m, then nothing.

    The buyer demands a whole epoch of rate k even when only a sliver short of
    her quota m, so extra service early can strictly reduce her achievable
    total.  This is the (t, x)-expressible stand-in for history-dependent
    give-up behavior; it violates the naturalness inequality with an easy
    witness (x = m, x' = m - eps, c = k).
    """
    if k < 0 or m < 0:
        raise ValueError("rate and quota must be >= 0")
    return DemandRealization(
        model_id="cliff",
        params={"k": k, "m": m},
        memoryless=False,
        natural=False,
        _fn=lambda t, x: k if x < m else 0.0,
    )


@dataclass(frozen=True)
class FlowTraceParams:
    """Parameters of the trace-inspired stochastic demand model.

    Durations and the inter-arrival gap are in epochs, the rate in KB/epoch.
    ``seed`` fixes the realization; leave it None when the seed is supplied at
    materialization time (e.g. by the session engine).
    """

    mean_duration: float
    stddev_duration: float
    mean_interarrival: float
    mean_rate: float
    horizon: int
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.mean_duration <= 0:
            raise ValueError("mean flow duration must be > 0")
        if self.stddev_duration < 0:
            raise ValueError("flow duration stddev must be >= 0")
        if self.mean_interarrival <= 0:
            raise ValueError("mean inter-arrival must be > 0")
        if self.mean_rate < 0:
            raise ValueError("mean flow rate must be >= 0")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1 epoch")


def _lognormal_mu_sigma(mean: float, stddev: float) -> tuple[float, float]:
    # Underlying normal parameters for a lognormal with the given moments.
    if mean <= 0:
        raise ValueError("lognormal mean must be > 0")
    sigma2 = math.log(1.0 + (stddev / mean) ** 2)
    mu = math.log(mean) - sigma2 / 2.0
    return mu, math.sqrt(sigma2)


def flow_trace_demand(params: FlowTraceParams) -> DemandRealization:
    """Stochastic demand built from flows: Poisson arrivals, lognormal
    durations, and per-epoch Poisson demand for each active flow.

    The whole trace is sampled at construction (one array entry per epoch), so
    queries are O(1) and independent of x.  Arrivals start well before epoch 1
    so the flow population is in steady state over the whole horizon; the
    time-averaged demand then matches the mean flow rate.
    """
    if params.seed is None:
        raise ValueError("flow_trace_demand needs a seed to fix the realization")
    rng = np.random.default_rng(params.seed)
    mu, sigma = _lognormal_mu_sigma(params.mean_duration, params.stddev_duration)

    # Warm-start margin: generous multiple of the mean duration so flows that
    # straddle epoch 1 are represented.
    warmup = 20.0 * params.mean_duration
    demand = np.zeros(params.horizon + 1)  # index by epoch, entry 0 unused

    t_arr = -warmup
    while True:
        t_arr += rng.exponential(params.mean_interarrival)
        if t_arr > params.horizon:
            break
        duration = math.ceil(rng.lognormal(mu, sigma))  # whole epochs, >= 1
        start = max(1, math.floor(t_arr) + 1)  # first whole epoch after arrival
        end = min(params.horizon, math.floor(t_arr) + duration)
        if end < start or params.mean_rate == 0:
            continue
        demand[start : end + 1] += rng.poisson(params.mean_rate, size=end - start + 1)

    def fn(t: int, x: float) -> float:
        if t > params.horizon:
            return 0.0
        return float(demand[t])

    def bulk(lo: int, hi: int) -> np.ndarray:
        out = np.zeros(hi - lo + 1)
        top = min(hi, params.horizon)
        if top >= lo:
            out[: top - lo + 1] = demand[lo : top + 1]
        return out

    return DemandRealization(
        model_id="flow_trace",
        params={"params": params},
        memoryless=True,
        natural=True,
        _fn=fn,
        _bulk=bulk,
    )


@dataclass(frozen=True)
class NaturalCheck:
    """Result of a naturalness check; ``witness`` is (t, x, x_prime, c) on failure."""

    passed: bool
    witness: Optional[tuple[int, float, float, float]] = None

    def __bool__(self) -> bool:
        return self.passed


def check_natural(
    d: DemandRealization,
    t_range: Iterable[int],
    x_grid: Sequence[float],
    c_grid: Sequence[float],
    tol: float = 1e-9,
) -> NaturalCheck:
    """Verify x + min(c, d(t, x)) >= x' + min(c, d(t, x')) on the given grids.

    Checks every t in ``t_range``, every ordered pair x >= x' from ``x_grid``,
    and every c in ``c_grid``.  Returns the first violating (t, x, x', c) as a
    witness.
    """
    xs = sorted(float(x) for x in x_grid)
    cs = [float(c) for c in c_grid]
    if any(c < 0 for c in cs):
        raise ValueError("capacity grid must be nonnegative")
    for t in t_range:
        dvals = [d.query(t, x) for x in xs]
        for j, x_hi in enumerate(xs):
            for i in range(j + 1):
                x_lo = xs[i]
                for c in cs:
                    lhs = x_hi + min(c, dvals[j])
                    rhs = x_lo + min(c, dvals[i])
                    if lhs < rhs - tol:
                        return NaturalCheck(False, (t, x_hi, x_lo, c))
    return NaturalCheck(True)


# Declarative form used by scenario configs and the session engine.  The six
# example models are deterministic and ignore the materialization seed; the
# flow-trace model is re-drawn per seed.
_BUILDERS: dict[str, Callable[..., DemandRealization]] = {
    "constant": constant_demand,
    "time_varying": time_varying_demand,
    "buffered": buffered_demand,
    "impatient": impatient_demand,
    "increasing_rate": increasing_rate_demand,
    "increasing_total": increasing_total_demand,
    "cliff": cliff_demand,
}


@dataclass(frozen=True)
class DemandSpec:
    """Tag + parameters naming a demand model; ``realize`` draws a realization."""

    kind: str
    params: Mapping[str, object]

    def realize(self, seed: Optional[int] = None) -> DemandRealization:
        if self.kind == "flow_trace":
            p: FlowTraceParams = self.params["params"]  # type: ignore[assignment]
            if seed is not None:
                p = replace(p, seed=int(seed))
            return flow_trace_demand(p)
        try:
            builder = _BUILDERS[self.kind]
        except KeyError:
            raise ValueError(f"unknown demand model {self.kind!r}") from None
        return builder(**self.params)

    @staticmethod
    def constant(k: float) -> "DemandSpec":
        return DemandSpec("constant", {"k": k})

    @staticmethod
    def time_varying(g: Gen) -> "DemandSpec":
        return DemandSpec("time_varying", {"g": g})

    @staticmethod
    def buffered(g: Gen) -> "DemandSpec":
        return DemandSpec("buffered", {"g": g})

    @staticmethod
    def impatient(k: float, p: int, m: float) -> "DemandSpec":
        return DemandSpec("impatient", {"k": k, "p": p, "m": m})

    @staticmethod
    def increasing_rate(g: Callable[[float], float]) -> "DemandSpec":
        return DemandSpec("increasing_rate", {"g": g})

    @staticmethod
    def increasing_total(g: Callable[[float], float]) -> "DemandSpec":
        return DemandSpec("increasing_total", {"g": g})

    @staticmethod
    def cliff(k: float, m: float) -> "DemandSpec":
        return DemandSpec("cliff", {"k": k, "m": m})

    @staticmethod
    def flow_trace(
        mean_rate: float,
        horizon: int,
        mean_duration: float = 30.0,
        stddev_duration: float = 30.0,
        mean_interarrival: float = 30.0,
        seed: Optional[int] = None,
    ) -> "DemandSpec":
        return DemandSpec(
            "flow_trace",
            {
                "params": FlowTraceParams(
                    mean_duration=mean_duration,
                    stddev_duration=stddev_duration,
                    mean_interarrival=mean_interarrival,
                    mean_rate=mean_rate,
                    horizon=horizon,
                    seed=seed,
                )
            },
        )
