"""Scenario files: schema, validation, and defaults.

Scenarios are JSON. Unknown keys are rejected by name; committees must
satisfy n >= 3f+1 for the declared byzantine count when safety
assertions are enabled. Token amounts are decimal token values and must
be exact multiples of 0.001 (one millitoken, the fee unit).

Schema (defaults in parentheses):

{
  "name": str ("scenario"),
  "seed": int (1),
  "duration_ms": number (60000),
  "safety_assertions": bool (true),
  "log_payloads": bool (true),        # payload hex + block/message bytes in the log
  "domains": [
    {"zone_id": int, "validators": int (4), "byzantine": int (0),
     "block_capacity": int (1000), "round_timeout_ms": number (200),
     "block_interval_ms": number (1600), "delegates": int (2),
     "delay_min_ms": number (10), "delay_max_ms": number (200)}
  ],
  "inter": {
    "miners": int (3), "mode": "virtual"|"puzzle" ("virtual"),
    "mean_block_interval_ms": number (4500), "block_capacity": int (571),
    "confirmation_depth": int (6), "fee_tokens": number (0.001),
    "contracts": int (4), "target_bits": int (236, puzzle mode),
    "median_delay_ms": number (200), "sigma": number (1.0)
  },
  "workload": {
    "sessions": int (0), "deposit_tokens": number (10),
    "session_interval_ms": number (0), "session_start_ms": number (0),
    "payload_bytes": int (1024), "deliver_after_ms": number (0),
    "pairs": [[seller_zone, buyer_zone], ...] (round-robin over domains),
    "intra_rate_per_s": number (0), "intra_offset_ms": number (0),
    "intra_until_ms": number (duration), "intra_payload_bytes": int (64),
    "intra_probe_times_ms": [numbers] ([]),
    "inter_rate_per_s": number (0), "inter_offset_ms": number (0),
    "inter_until_ms": number (duration)
  },
  "protocol": {
    "ack_timeout_ms": number (5x mean inter one-way delay),
    "op_timeout_ms": number (120000), "intra_timeout_ms": number (20000)
  },
  "funding": {
    "member_tokens": number (100), "delegate_intra_tokens": number (1000),
    "delegate_inter_tokens": number (2000), "miner_tokens": number (100),
    "admin_tokens": number (100), "loadgen_tokens": number (1000)
  },
  "faults": [
    {"at_ms": number, "fault": "crash"|"recover", "node": str} |
    {"at_ms": number, "fault": "byzantine", "node": str,
     "behavior": "equivocate"|"silent"|"delay"} |
    {"at_ms": number, "fault": "partition", "groups": [[node...], [node...]]} |
    {"at_ms": number, "fault": "heal"}
  ],
  "reference": {...}   # optional expected values echoed into batch reports
}

Node names: "val:<zone>:<i>", "dlg:<zone>:<i>", "miner:<i>", "admin",
"seller:<sid>", "buyer:<sid>", "load:<zone>", "load:inter".
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field


class ParseError(Exception):
    pass


class ValidationError(Exception):
    pass


def _tokens_to_units(value, where: str) -> int:
    units = value * 1000
    if abs(units - round(units)) > 1e-6:
        raise ValidationError(f"{where}: token amount {value} is not a multiple of 0.001")
    return int(round(units))


def _take(d: dict, key: str, default, where: str):
    return d[key] if key in d else default


def _check_keys(d: dict, allowed: set, where: str) -> None:
    for k in d:
        if k not in allowed:
            raise ParseError(f"unknown key {k!r} in {where}")


@dataclass
class DomainSpec:
    zone_id: int
    validators: int = 4
    byzantine: int = 0
    block_capacity: int = 1000
    round_timeout_ms: float = 200.0
    block_interval_ms: float = 1600.0
    delegates: int = 2
    delay_min_ms: float = 10.0
    delay_max_ms: float = 200.0


@dataclass
class InterSpec:
    miners: int = 3
    mode: str = "virtual"
    mean_block_interval_ms: float = 4500.0
    block_capacity: int = 571
    confirmation_depth: int = 6
    fee_units: int = 1
    contracts: int = 4
    target_bits: int = 236
    median_delay_ms: float = 200.0
    sigma: float = 1.0
    block_reward_units: int = 0  # subsidy minted per block; 0 keeps supply exact

    def mean_delay_ms(self) -> float:
        return self.median_delay_ms * math.exp(self.sigma ** 2 / 2.0)


@dataclass
class WorkloadSpec:
    sessions: int = 0
    deposit_units: int = 10_000
    session_interval_ms: float = 0.0
    session_start_ms: float = 0.0
    payload_bytes: int = 1024
    deliver_after_ms: float = 0.0
    pairs: list = field(default_factory=list)
    intra_rate_per_s: float = 0.0
    intra_offset_ms: float = 0.0
    intra_until_ms: float | None = None
    intra_payload_bytes: int = 64
    intra_probe_times_ms: list = field(default_factory=list)
    inter_rate_per_s: float = 0.0
    inter_offset_ms: float = 0.0
    inter_until_ms: float | None = None
    inter_probe_times_ms: list = field(default_factory=list)


@dataclass
class ProtocolSpec:
    ack_timeout_ms: float | None = None  # default derived from link model
    op_timeout_ms: float = 120_000.0
    intra_timeout_ms: float = 20_000.0


@dataclass
class FundingSpec:
    member_units: int = 100_000
    delegate_intra_units: int = 1_000_000
    delegate_inter_units: int = 2_000_000
    miner_units: int = 100_000
    admin_units: int = 100_000
    loadgen_units: int = 1_000_000


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 1
    duration_ms: float = 60_000.0
    safety_assertions: bool = True
    log_payloads: bool = True
    domains: list = field(default_factory=lambda: [DomainSpec(zone_id=1)])
    inter: InterSpec = field(default_factory=InterSpec)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    protocol: ProtocolSpec = field(default_factory=ProtocolSpec)
    funding: FundingSpec = field(default_factory=FundingSpec)
    faults: list = field(default_factory=list)
    reference: dict = field(default_factory=dict)

    def ack_timeout_ms(self) -> float:
        if self.protocol.ack_timeout_ms is not None:
            return self.protocol.ack_timeout_ms
        return 5.0 * self.inter.mean_delay_ms()

    def validate(self) -> None:
        zones = set()
        byz_nodes: dict[int, set] = {}
        for f in self.faults:
            if f.get("fault") == "byzantine":
                node = f.get("node", "")
                if node.startswith("val:"):
                    zone = int(node.split(":")[1])
                    byz_nodes.setdefault(zone, set()).add(node)
        for d in self.domains:
            if d.zone_id in zones or d.zone_id < 1:
                raise ValidationError(f"bad or duplicate zone_id {d.zone_id}")
            zones.add(d.zone_id)
            if self.safety_assertions and d.validators < 3 * d.byzantine + 1:
                raise ValidationError(
                    f"zone {d.zone_id}: {d.validators} validators cannot tolerate "
                    f"{d.byzantine} byzantine (need n >= 3f+1)")
            injected = len(byz_nodes.get(d.zone_id, ()))
            if self.safety_assertions and injected > d.byzantine:
                raise ValidationError(
                    f"zone {d.zone_id}: fault schedule injects {injected} byzantine "
                    f"validators but the domain declares at most {d.byzantine}")
            if d.delegates < 1:
                raise ValidationError(f"zone {d.zone_id}: at least one delegate required")
        if self.inter.mode not in ("virtual", "puzzle"):
            raise ValidationError(f"unknown inter mode {self.inter.mode!r}")
        if self.inter.confirmation_depth < 1:
            raise ValidationError("confirmation_depth must be >= 1")
        for sz, bz in self.workload.pairs:
            if sz not in zones or bz not in zones:
                raise ValidationError(f"workload pair ({sz},{bz}) names an unknown zone")
        if self.workload.sessions and len(self.domains) < 2 and not self.workload.pairs:
            if len(self.domains) < 2:
                raise ValidationError("cross-domain sessions need at least two domains")


_DOMAIN_KEYS = {"zone_id", "validators", "byzantine", "block_capacity", "round_timeout_ms",
                "block_interval_ms", "delegates", "delay_min_ms", "delay_max_ms"}
_INTER_KEYS = {"miners", "mode", "mean_block_interval_ms", "block_capacity", "confirmation_depth",
               "fee_tokens", "contracts", "target_bits", "median_delay_ms", "sigma",
               "block_reward_tokens"}
_WORKLOAD_KEYS = {"sessions", "deposit_tokens", "session_interval_ms", "session_start_ms",
                  "payload_bytes", "deliver_after_ms", "pairs", "intra_rate_per_s",
                  "intra_offset_ms", "intra_until_ms", "intra_payload_bytes",
                  "intra_probe_times_ms", "inter_rate_per_s", "inter_offset_ms", "inter_until_ms",
                  "inter_probe_times_ms"}
_PROTOCOL_KEYS = {"ack_timeout_ms", "op_timeout_ms", "intra_timeout_ms"}
_FUNDING_KEYS = {"member_tokens", "delegate_intra_tokens", "delegate_inter_tokens",
                 "miner_tokens", "admin_tokens", "loadgen_tokens"}
_FAULT_KEYS = {"at_ms", "fault", "node", "behavior", "groups"}
_TOP_KEYS = {"name", "seed", "duration_ms", "safety_assertions", "log_payloads", "domains",
             "inter", "workload", "protocol", "funding", "faults", "reference"}


def scenario_from_dict(raw: dict) -> Scenario:
    _check_keys(raw, _TOP_KEYS, "scenario")
    sc = Scenario(
        name=_take(raw, "name", "scenario", ""),
        seed=int(_take(raw, "seed", 1, "")),
        duration_ms=float(_take(raw, "duration_ms", 60_000, "")),
        safety_assertions=bool(_take(raw, "safety_assertions", True, "")),
        log_payloads=bool(_take(raw, "log_payloads", True, "")),
        reference=dict(_take(raw, "reference", {}, "")),
    )
    if "domains" in raw:
        sc.domains = []
        for i, d in enumerate(raw["domains"]):
            _check_keys(d, _DOMAIN_KEYS, f"domains[{i}]")
            if "zone_id" not in d:
                raise ParseError(f"domains[{i}]: missing zone_id")
            sc.domains.append(DomainSpec(
                zone_id=int(d["zone_id"]),
                validators=int(d.get("validators", 4)),
                byzantine=int(d.get("byzantine", 0)),
                block_capacity=int(d.get("block_capacity", 1000)),
                round_timeout_ms=float(d.get("round_timeout_ms", 200)),
                block_interval_ms=float(d.get("block_interval_ms", 1600)),
                delegates=int(d.get("delegates", 2)),
                delay_min_ms=float(d.get("delay_min_ms", 10)),
                delay_max_ms=float(d.get("delay_max_ms", 200)),
            ))
    if "inter" in raw:
        d = raw["inter"]
        _check_keys(d, _INTER_KEYS, "inter")
        sc.inter = InterSpec(
            miners=int(d.get("miners", 3)),
            mode=d.get("mode", "virtual"),
            mean_block_interval_ms=float(d.get("mean_block_interval_ms", 4500)),
            block_capacity=int(d.get("block_capacity", 571)),
            confirmation_depth=int(d.get("confirmation_depth", 6)),
            fee_units=_tokens_to_units(d.get("fee_tokens", 0.001), "inter.fee_tokens"),
            contracts=int(d.get("contracts", 4)),
            target_bits=int(d.get("target_bits", 236)),
            median_delay_ms=float(d.get("median_delay_ms", 200)),
            sigma=float(d.get("sigma", 1.0)),
            block_reward_units=_tokens_to_units(d.get("block_reward_tokens", 0),
                                                "inter.block_reward_tokens"),
        )
    if "workload" in raw:
        d = raw["workload"]
        _check_keys(d, _WORKLOAD_KEYS, "workload")
        sc.workload = WorkloadSpec(
            sessions=int(d.get("sessions", 0)),
            deposit_units=_tokens_to_units(d.get("deposit_tokens", 10), "workload.deposit_tokens"),
            session_interval_ms=float(d.get("session_interval_ms", 0)),
            session_start_ms=float(d.get("session_start_ms", 0)),
            payload_bytes=int(d.get("payload_bytes", 1024)),
            deliver_after_ms=float(d.get("deliver_after_ms", 0)),
            pairs=[list(p) for p in d.get("pairs", [])],
            intra_rate_per_s=float(d.get("intra_rate_per_s", 0)),
            intra_offset_ms=float(d.get("intra_offset_ms", 0)),
            intra_until_ms=(float(d["intra_until_ms"]) if "intra_until_ms" in d else None),
            intra_payload_bytes=int(d.get("intra_payload_bytes", 64)),
            intra_probe_times_ms=list(d.get("intra_probe_times_ms", [])),
            inter_rate_per_s=float(d.get("inter_rate_per_s", 0)),
            inter_offset_ms=float(d.get("inter_offset_ms", 0)),
            inter_until_ms=(float(d["inter_until_ms"]) if "inter_until_ms" in d else None),
            inter_probe_times_ms=list(d.get("inter_probe_times_ms", [])),
        )
    if "protocol" in raw:
        d = raw["protocol"]
        _check_keys(d, _PROTOCOL_KEYS, "protocol")
        sc.protocol = ProtocolSpec(
            ack_timeout_ms=(float(d["ack_timeout_ms"]) if "ack_timeout_ms" in d else None),
            op_timeout_ms=float(d.get("op_timeout_ms", 120_000)),
            intra_timeout_ms=float(d.get("intra_timeout_ms", 20_000)),
        )
    if "funding" in raw:
        d = raw["funding"]
        _check_keys(d, _FUNDING_KEYS, "funding")
        sc.funding = FundingSpec(
            member_units=_tokens_to_units(d.get("member_tokens", 100), "funding.member_tokens"),
            delegate_intra_units=_tokens_to_units(d.get("delegate_intra_tokens", 1000), "funding"),
            delegate_inter_units=_tokens_to_units(d.get("delegate_inter_tokens", 2000), "funding"),
            miner_units=_tokens_to_units(d.get("miner_tokens", 100), "funding.miner_tokens"),
            admin_units=_tokens_to_units(d.get("admin_tokens", 100), "funding.admin_tokens"),
            loadgen_units=_tokens_to_units(d.get("loadgen_tokens", 1000), "funding.loadgen_tokens"),
        )
    for i, f in enumerate(raw.get("faults", [])):
        _check_keys(f, _FAULT_KEYS, f"faults[{i}]")
        if "fault" not in f or "at_ms" not in f:
            raise ParseError(f"faults[{i}]: needs at_ms and fault")
        sc.faults.append(dict(f))
    sc.validate()
    return sc


def load_scenario(path: str) -> Scenario:
    with open(path) as f:
        text = f.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: scenario must be a JSON object")
    try:
        return scenario_from_dict(raw)
    except (ParseError, ValidationError):
        raise
    except (TypeError, ValueError) as e:
        raise ParseError(f"{path}: {e}") from None
