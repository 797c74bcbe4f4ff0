"""Scenario configuration files.

Experiments are declared in YAML.  A config names the buyers (value, demand
model, allocation period, strategy), the seller's capacity and routing policy,
the mechanism and its parameters, the horizon, run count, and seed.  Optional
blocks add mechanism variants to compare, a sweep over capacity / reserve /
mu, and a multi-seller pool.

Validation is strict: unknown keys, missing required keys, bad types, and
unknown tags are all rejected with the file path and the dotted key path of
the offending entry.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Any, List, Mapping, Optional, Sequence

import yaml

from bandshare.demand import DemandSpec
from bandshare.engine import (
    MECHANISMS,
    ROUTING_POLICIES,
    BuyerSpec,
    HybridBoost,
    Scenario,
    Strategy,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "MechanismVariant",
    "PoolConfig",
    "PoolType",
    "SweepConfig",
    "builtin_config_path",
    "builtin_configs",
    "load_config",
    "parse_config",
]

SWEEP_VARIABLES = ("capacity", "reserve", "mu")


class ConfigError(ValueError):
    """A scenario config failed validation; the message carries the key path."""


def _err(path: str, message: str) -> ConfigError:
    return ConfigError(f"{path}: {message}")


def _require(mapping: Mapping, key: str, path: str) -> Any:
    if key not in mapping:
        raise _err(path, f"missing required key {key!r}")
    return mapping[key]


def _check_keys(mapping: Mapping, allowed: Sequence[str], path: str) -> None:
    if not isinstance(mapping, dict):
        raise _err(path, f"expected a mapping, got {type(mapping).__name__}")
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise _err(path, f"unknown keys {sorted(unknown)}; allowed: {sorted(allowed)}")


def _number(value: Any, path: str, minimum: Optional[float] = None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _err(path, f"expected a number, got {value!r}")
    if minimum is not None and value < minimum:
        raise _err(path, f"must be >= {minimum}, got {value}")
    return float(value)


def _integer(value: Any, path: str, minimum: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise _err(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise _err(path, f"must be >= {minimum}, got {value}")
    return value


def _parse_demand(node: Any, path: str, horizon: int) -> DemandSpec:
    _check_keys(
        node,
        [
            "model",
            "rate",
            "rates",
            "mean_rate",
            "mean_duration",
            "stddev_duration",
            "mean_interarrival",
            "patience",
            "min_bytes",
        ],
        path,
    )
    model = _require(node, "model", path)
    if model == "constant":
        return DemandSpec.constant(_number(_require(node, "rate", path), f"{path}.rate", 0))
    if model == "flow_trace":
        return DemandSpec.flow_trace(
            mean_rate=_number(_require(node, "mean_rate", path), f"{path}.mean_rate", 0),
            horizon=horizon,
            mean_duration=_number(node.get("mean_duration", 30.0), f"{path}.mean_duration", 1e-9),
            stddev_duration=_number(node.get("stddev_duration", 30.0), f"{path}.stddev_duration", 0),
            mean_interarrival=_number(
                node.get("mean_interarrival", 30.0), f"{path}.mean_interarrival", 1e-9
            ),
        )
    if model == "impatient":
        return DemandSpec.impatient(
            k=_number(_require(node, "rate", path), f"{path}.rate", 0),
            p=_integer(_require(node, "patience", path), f"{path}.patience", 1),
            m=_number(_require(node, "min_bytes", path), f"{path}.min_bytes", 0),
        )
    if model == "buffered":
        if "rates" in node:
            rates = node["rates"]
            if not isinstance(rates, list) or not rates:
                raise _err(f"{path}.rates", "expected a nonempty list of numbers")
            seq = [_number(v, f"{path}.rates[{i}]", 0) for i, v in enumerate(rates)]
            return DemandSpec.buffered(seq)
        rate = _number(_require(node, "rate", path), f"{path}.rate", 0)
        return DemandSpec("buffered", {"g": [rate] * horizon})
    if model == "time_varying":
        rates = _require(node, "rates", path)
        if not isinstance(rates, list) or not rates:
            raise _err(f"{path}.rates", "expected a nonempty list of numbers")
        seq = [_number(v, f"{path}.rates[{i}]", 0) for i, v in enumerate(rates)]
        return DemandSpec.time_varying(seq)
    raise _err(
        f"{path}.model",
        f"unknown demand model {model!r}; config-declarable models: "
        "constant, flow_trace, impatient, buffered, time_varying",
    )


def _parse_strategy(node: Any, path: str) -> Strategy:
    if node is None:
        return Strategy("greedy")
    _check_keys(node, ["kind", "rate", "epochs", "factor"], path)
    kind = _require(node, "kind", path)
    if kind == "greedy":
        return Strategy("greedy")
    if kind == "pad":
        return Strategy("pad", pad=_number(_require(node, "rate", path), f"{path}.rate", 0))
    if kind == "delay":
        return Strategy(
            "delay", delay_epochs=_integer(_require(node, "epochs", path), f"{path}.epochs", 0)
        )
    if kind == "misreport":
        return Strategy(
            "misreport", bid_factor=_number(_require(node, "factor", path), f"{path}.factor", 0)
        )
    raise _err(f"{path}.kind", f"unknown strategy {kind!r}")


def _parse_buyer(node: Any, path: str, horizon: int) -> BuyerSpec:
    _check_keys(node, ["id", "value", "arrival", "departure", "demand", "strategy"], path)
    buyer_id = _require(node, "id", path)
    if not isinstance(buyer_id, str) or not buyer_id:
        raise _err(f"{path}.id", "buyer id must be a nonempty string")
    return BuyerSpec(
        buyer_id=buyer_id,
        value=_number(_require(node, "value", path), f"{path}.value", 0),
        demand=_parse_demand(_require(node, "demand", path), f"{path}.demand", horizon),
        arrival=_integer(node.get("arrival", 1), f"{path}.arrival", 0),
        departure=_integer(node.get("departure", horizon), f"{path}.departure", 0),
        strategy=_parse_strategy(node.get("strategy"), f"{path}.strategy"),
    )


@dataclass(frozen=True)
class MechanismVariant:
    """One mechanism/routing combination compared by an experiment."""

    name: str
    mechanism: str
    routing: str
    mu: Optional[float] = None
    reserve: Optional[float] = None
    price: Optional[float] = None

    def apply(self, base: Scenario) -> Scenario:
        return replace(
            base,
            mechanism=self.mechanism,
            routing=self.routing,
            mu=self.mu if self.mu is not None else base.mu,
            reserve=self.reserve if self.reserve is not None else base.reserve,
            price=self.price if self.price is not None else base.price,
        )


@dataclass(frozen=True)
class SweepConfig:
    variable: str
    values: tuple

    def apply(self, scenario: Scenario, value: float) -> Scenario:
        if self.variable == "capacity":
            return replace(scenario, capacity=value)
        if self.variable == "mu":
            return replace(scenario, mu=value)
        # Reserve: for the posted-price mechanism the reserve lever *is* the
        # posted price; for the others it is the auction reserve.
        if scenario.mechanism == "fixed":
            return replace(scenario, reserve=value, price=value)
        return replace(scenario, reserve=value)


@dataclass(frozen=True)
class PoolType:
    name: str
    count: int
    scenario: Scenario


@dataclass(frozen=True)
class PoolConfig:
    types: tuple  # of PoolType
    trials: int
    sessions_per_seller: int = 10  # auctions per accounting period

    @property
    def total_sellers(self) -> int:
        return sum(t.count for t in self.types)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str
    scenario: Scenario  # base scenario (first variant applied)
    variants: tuple  # of MechanismVariant
    runs: int
    seed: int
    sweep: Optional[SweepConfig] = None
    pool: Optional[PoolConfig] = None
    source: Optional[str] = None

    def scenario_for(self, variant: MechanismVariant) -> Scenario:
        return variant.apply(self.scenario)


_TOP_KEYS = [
    "experiment",
    "seed",
    "runs",
    "horizon",
    "capacity",
    "routing",
    "mechanism",
    "mu",
    "reserve",
    "price",
    "hybrid",
    "buyers",
    "mechanisms",
    "sweep",
    "pool",
]


def parse_config(doc: Any, source: str = "<config>") -> ExperimentConfig:
    """Validate a parsed YAML document and build the experiment objects."""
    _check_keys(doc, _TOP_KEYS, source)
    experiment = _require(doc, "experiment", source)
    if not isinstance(experiment, str) or not experiment:
        raise _err(f"{source}.experiment", "experiment id must be a nonempty string")
    horizon = _integer(doc.get("horizon", 600), f"{source}.horizon", 1)

    buyers_node = _require(doc, "buyers", source)
    if not isinstance(buyers_node, list) or not buyers_node:
        raise _err(f"{source}.buyers", "expected a nonempty list of buyers")
    buyers = tuple(
        _parse_buyer(b, f"{source}.buyers[{i}]", horizon) for i, b in enumerate(buyers_node)
    )

    hybrid = None
    if doc.get("hybrid") is not None:
        hpath = f"{source}.hybrid"
        _check_keys(doc["hybrid"], ["buyer", "bytes", "deadline"], hpath)
        hybrid = HybridBoost(
            buyer_id=_require(doc["hybrid"], "buyer", hpath),
            target_bytes=_number(_require(doc["hybrid"], "bytes", hpath), f"{hpath}.bytes", 0),
            deadline=_integer(_require(doc["hybrid"], "deadline", hpath), f"{hpath}.deadline", 1),
        )

    routing = doc.get("routing", "spq")
    if routing not in ROUTING_POLICIES:
        raise _err(f"{source}.routing", f"unknown routing policy {routing!r}")
    mechanism = doc.get("mechanism", "bks")
    if mechanism not in MECHANISMS:
        raise _err(f"{source}.mechanism", f"unknown mechanism {mechanism!r}")

    try:
        base = Scenario(
            buyers=buyers,
            capacity=_number(_require(doc, "capacity", source), f"{source}.capacity", 1e-12),
            routing=routing,
            mechanism=mechanism,
            mu=_number(doc.get("mu", 0.2), f"{source}.mu"),
            reserve=_number(doc.get("reserve", 0.0), f"{source}.reserve", 0),
            price=_number(doc.get("price", 0.0), f"{source}.price", 0),
            horizon=horizon,
            hybrid=hybrid,
        )
    except ValueError as exc:
        raise _err(source, str(exc)) from exc

    variants = []
    if doc.get("mechanisms") is not None:
        node = doc["mechanisms"]
        if not isinstance(node, list) or not node:
            raise _err(f"{source}.mechanisms", "expected a nonempty list")
        for i, v in enumerate(node):
            vpath = f"{source}.mechanisms[{i}]"
            _check_keys(v, ["name", "mechanism", "routing", "mu", "reserve", "price"], vpath)
            vmech = v.get("mechanism", base.mechanism)
            vrouting = v.get("routing", base.routing)
            if vmech not in MECHANISMS:
                raise _err(f"{vpath}.mechanism", f"unknown mechanism {vmech!r}")
            if vrouting not in ROUTING_POLICIES:
                raise _err(f"{vpath}.routing", f"unknown routing policy {vrouting!r}")
            variants.append(
                MechanismVariant(
                    name=v.get("name", f"{vmech}-{vrouting}"),
                    mechanism=vmech,
                    routing=vrouting,
                    mu=None if "mu" not in v else _number(v["mu"], f"{vpath}.mu"),
                    reserve=None if "reserve" not in v else _number(v["reserve"], f"{vpath}.reserve", 0),
                    price=None if "price" not in v else _number(v["price"], f"{vpath}.price", 0),
                )
            )
        names = [v.name for v in variants]
        if len(set(names)) != len(names):
            raise _err(f"{source}.mechanisms", f"duplicate variant names in {names}")
    else:
        variants.append(MechanismVariant(base.mechanism, base.mechanism, base.routing))

    for i, v in enumerate(variants):
        try:
            v.apply(base)
        except ValueError as exc:
            raise _err(f"{source}.mechanisms[{i}]", str(exc)) from exc

    sweep = None
    if doc.get("sweep") is not None:
        spath = f"{source}.sweep"
        _check_keys(doc["sweep"], ["variable", "values"], spath)
        variable = _require(doc["sweep"], "variable", spath)
        if variable not in SWEEP_VARIABLES:
            raise _err(
                f"{spath}.variable",
                f"unknown sweep variable {variable!r}; one of {SWEEP_VARIABLES}",
            )
        values = _require(doc["sweep"], "values", spath)
        if not isinstance(values, list) or not values:
            raise _err(f"{spath}.values", "expected a nonempty list of numbers")
        minimum = 1e-12 if variable == "capacity" else (1e-9 if variable == "mu" else 0.0)
        parsed = tuple(
            _number(v, f"{spath}.values[{i}]", minimum) for i, v in enumerate(values)
        )
        if variable == "mu" and any(v >= 1 for v in parsed):
            raise _err(f"{spath}.values", "mu values must be in (0, 1)")
        sweep = SweepConfig(variable, parsed)

    pool = None
    if doc.get("pool") is not None:
        ppath = f"{source}.pool"
        _check_keys(doc["pool"], ["sellers", "trials", "types", "sessions_per_seller"], ppath)
        trials = _integer(doc["pool"].get("trials", 100), f"{ppath}.trials", 1)
        sessions = _integer(
            doc["pool"].get("sessions_per_seller", 10), f"{ppath}.sessions_per_seller", 1
        )
        types: List[PoolType] = []
        if doc["pool"].get("types") is not None:
            tnode = doc["pool"]["types"]
            if not isinstance(tnode, list) or not tnode:
                raise _err(f"{ppath}.types", "expected a nonempty list")
            for i, tdoc in enumerate(tnode):
                tpath = f"{ppath}.types[{i}]"
                _check_keys(tdoc, ["name", "count", "capacity", "buyers"], tpath)
                count = _integer(_require(tdoc, "count", tpath), f"{tpath}.count", 1)
                scenario = base
                if "capacity" in tdoc:
                    scenario = replace(
                        scenario,
                        capacity=_number(tdoc["capacity"], f"{tpath}.capacity", 1e-12),
                    )
                if "buyers" in tdoc:
                    bnode = tdoc["buyers"]
                    if not isinstance(bnode, list) or not bnode:
                        raise _err(f"{tpath}.buyers", "expected a nonempty list")
                    scenario = replace(
                        scenario,
                        buyers=tuple(
                            _parse_buyer(b, f"{tpath}.buyers[{j}]", horizon)
                            for j, b in enumerate(bnode)
                        ),
                    )
                types.append(PoolType(tdoc.get("name", f"type{i}"), count, scenario))
        else:
            sellers = _integer(_require(doc["pool"], "sellers", ppath), f"{ppath}.sellers", 2)
            types.append(PoolType("all", sellers, base))
        pool = PoolConfig(tuple(types), trials, sessions)
        if pool.total_sellers < 2:
            raise _err(ppath, "a pool needs at least 2 sellers")

    return ExperimentConfig(
        experiment_id=experiment,
        scenario=base,
        variants=tuple(variants),
        runs=_integer(doc.get("runs", 1), f"{source}.runs", 1),
        seed=_integer(doc.get("seed", 0), f"{source}.seed"),
        sweep=sweep,
        pool=pool,
        source=source,
    )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r") as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if doc is None:
        raise ConfigError(f"{path}: empty config")
    return parse_config(doc, source=path)


def builtin_config_path(name: str) -> str:
    """Path of a packaged experiment fixture (see bandshare/configs/)."""
    here = os.path.dirname(__file__)
    path = os.path.join(here, "configs", f"{name}.yaml")
    if not os.path.exists(path):
        raise ConfigError(f"no builtin config named {name!r}")
    return path


def builtin_configs() -> List[str]:
    here = os.path.join(os.path.dirname(__file__), "configs")
    return sorted(
        os.path.splitext(f)[0] for f in os.listdir(here) if f.endswith(".yaml")
    )
