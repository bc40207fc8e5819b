"""Scenario configuration.

Config files are flat YAML mappings. Every key below is optional; unknown
keys are rejected. Example::

    protocol: SGPBFT        # PBFT | SGPBFT
    n: 8
    f: 1
    requests: 20
    latency_kind: constant  # constant | uniform
    latency_ticks: 1        # constant latency per message
    latency_lo: 1           # uniform range, inclusive
    latency_hi: 3
    per_message_overhead: 1 # sender link time per message
    seed: 7
    faults: ["3:silent", "5:wrong_result", "2:delay:4", "1:drop:0.2"]
    rotation_m: 1           # default max(1, CN // 10)
    rotation_period: 50
    quorum_mode: geq        # geq (>= 2f+1) | strict (> 2f+1)
    timeout_ticks: 40       # default derived from latency and n
    workload_mode: sequential  # sequential | burst
    tick_budget: 100000     # default derived from timeout and requests
    auth_vehicles: 5        # auth-demo only
    auth_forged: 1          # auth-demo only

Any key can be overridden from the environment as ``SGPBFT_<KEY>``
(upper-case), e.g. ``SGPBFT_SEED=11``; values are parsed as YAML scalars.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Mapping, Optional, Tuple

import yaml

from .fault_models import FaultSpec
from .pbft_engine import ConfigError
from .sg_pbft_engine import check_sizes

ENV_PREFIX = "SGPBFT_"

PROTOCOLS = ("PBFT", "SGPBFT")


@dataclass(frozen=True)
class LatencyModel:
    kind: str = "constant"
    ticks: int = 1
    lo: int = 1
    hi: int = 3
    per_message_overhead: int = 1

    def mean(self) -> float:
        return self.ticks if self.kind == "constant" else (self.lo + self.hi) / 2

    def max(self) -> int:
        return self.ticks if self.kind == "constant" else self.hi


@dataclass(frozen=True)
class ScenarioConfig:
    protocol: str = "PBFT"
    n: int = 4
    f: int = 1
    requests: int = 1
    latency_kind: str = "constant"
    latency_ticks: int = 1
    latency_lo: int = 1
    latency_hi: int = 3
    per_message_overhead: int = 1
    seed: int = 0
    faults: Tuple[FaultSpec, ...] = ()
    rotation_m: Optional[int] = None
    rotation_period: int = 50
    quorum_mode: str = "geq"
    timeout_ticks: Optional[int] = None
    workload_mode: str = "sequential"
    tick_budget: Optional[int] = None
    scenario_id: str = ""
    auth_vehicles: int = 5
    auth_forged: int = 1

    def __post_init__(self):
        faults = tuple(_coerce_fault(x) for x in self.faults)
        object.__setattr__(self, "faults", faults)
        object.__setattr__(self, "protocol", str(self.protocol).upper().replace("-", ""))

    # --- derived values -------------------------------------------------------

    @property
    def sid(self) -> str:
        if self.scenario_id:
            return self.scenario_id
        return f"{self.protocol.lower()}-n{self.n}-f{self.f}-s{self.seed}"

    @property
    def strict_quorum(self) -> bool:
        return self.quorum_mode == "strict"

    def latency(self) -> LatencyModel:
        return LatencyModel(self.latency_kind, self.latency_ticks, self.latency_lo,
                            self.latency_hi, self.per_message_overhead)

    def in_flight(self) -> int:
        """Most client requests outstanding at once under the workload mode.

        SG-PBFT holds new requests at each rotation, which caps a burst at
        ``rotation_period``.
        """
        if self.workload_mode != "burst":
            return 1
        if self.protocol == "SGPBFT":
            return max(1, min(self.requests, self.rotation_period))
        return max(1, self.requests)

    def base_timeout(self) -> int:
        """Ten one-way latencies plus two full-broadcast serializations."""
        lat = self.latency()
        return int(10 * (lat.mean() + lat.per_message_overhead)
                   + 2 * lat.per_message_overhead * self.n)

    def effective_timeout(self) -> int:
        """Default: the base timeout per concurrently outstanding request.

        Every queued request sits behind the others on the master's link, so a
        fixed timeout would fire under burst load without any fault.
        """
        if self.timeout_ticks is not None:
            return self.timeout_ticks
        return self.base_timeout() * self.in_flight()

    def effective_budget(self) -> int:
        if self.tick_budget is not None:
            return self.tick_budget
        base = self.timeout_ticks if self.timeout_ticks is not None else self.base_timeout()
        return 40 * base * (self.requests + 5)

    def with_(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    # --- validation -----------------------------------------------------------

    def validate(self) -> "ScenarioConfig":
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.f < 0:
            raise ConfigError("f must be non-negative")
        if self.protocol == "PBFT":
            if self.n < 3 * self.f + 1 or self.n < 1:
                raise ConfigError(f"n={self.n} < 3f+1={3 * self.f + 1}")
        else:
            check_sizes(self.n, self.f)
        if self.requests < 0:
            raise ConfigError("requests must be non-negative")
        if self.latency_kind not in ("constant", "uniform"):
            raise ConfigError("latency_kind must be constant or uniform")
        if self.latency_kind == "constant" and self.latency_ticks < 1:
            raise ConfigError("latency_ticks must be >= 1")
        if self.latency_kind == "uniform" and not 1 <= self.latency_lo <= self.latency_hi:
            raise ConfigError("uniform latency needs 1 <= latency_lo <= latency_hi")
        if self.per_message_overhead < 0:
            raise ConfigError("per_message_overhead must be >= 0")
        if self.rotation_m is not None and self.rotation_m < 0:
            raise ConfigError("rotation_m must be >= 0")
        if self.rotation_period < 1:
            raise ConfigError("rotation_period must be >= 1")
        if self.quorum_mode not in ("geq", "strict"):
            raise ConfigError("quorum_mode must be geq or strict")
        if self.workload_mode not in ("sequential", "burst"):
            raise ConfigError("workload_mode must be sequential or burst")
        if self.timeout_ticks is not None and self.timeout_ticks < 1:
            raise ConfigError("timeout_ticks must be >= 1")
        if self.tick_budget is not None and self.tick_budget < 1:
            raise ConfigError("tick_budget must be >= 1")
        if self.auth_vehicles < 0 or self.auth_forged < 0:
            raise ConfigError("auth_vehicles and auth_forged must be >= 0")
        seen = set()
        for spec in self.faults:
            if not 0 <= spec.node < self.n:
                raise ConfigError(f"fault on unknown node {spec.node}")
            if spec.node in seen:
                raise ConfigError(f"node {spec.node} has more than one fault")
            seen.add(spec.node)
        return self

    # --- (de)serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for fld in dataclasses.fields(self):
            value = getattr(self, fld.name)
            if fld.name == "faults":
                value = [str(x) for x in value]
            out[fld.name] = value
        return out

    @classmethod
    def from_mapping(cls, data: Mapping) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = dict(data)
        if "faults" in kwargs:
            faults = kwargs["faults"] or []
            if not isinstance(faults, (list, tuple)):
                raise ConfigError("faults must be a list")
            kwargs["faults"] = tuple(faults)
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _coerce_fault(item) -> FaultSpec:
    if isinstance(item, FaultSpec):
        return item
    if isinstance(item, str):
        return FaultSpec.parse(item)
    if isinstance(item, Mapping):
        return FaultSpec(int(item["node"]), item["behavior"], item.get("param"))
    raise ValueError(f"cannot interpret fault {item!r}")


def env_overrides(environ: Mapping[str, str]) -> dict:
    out = {}
    for key, raw in environ.items():
        if key.startswith(ENV_PREFIX):
            out[key[len(ENV_PREFIX):].lower()] = yaml.safe_load(raw)
    return out


def load_config(path: Optional[str] = None, environ: Optional[Mapping[str, str]] = None,
                base: Optional[Mapping] = None, **overrides) -> ScenarioConfig:
    """Merge, lowest priority first: ``base``, the file, the environment,
    then keyword overrides whose value is not ``None``."""
    data = dict(base or {})
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, Mapping):
            raise ConfigError("config file must hold a key-value mapping")
        data.update(loaded)
    data.update(env_overrides(os.environ if environ is None else environ))
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ScenarioConfig.from_mapping(data).validate()
