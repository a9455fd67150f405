"""Scenario configuration: YAML documents validated against a JSON schema.

A scenario bundles a network document, a demand specification (deterministic
spawn entries plus seeded Poisson streams), learner and protocol settings, an
optional attack block, and the held-out evaluation settings.  Loading is
strict: unknown keys, missing references, and non-contiguous routes are all
rejected before any simulation starts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import yaml

from .adversary import AttackConfig, NoiseSpec, RoutePlan, attacker_route_policy
from .learner import Hyperparameters, Normalizer
from .network import RoadNetwork, parse_network, DEFAULT_JAM_SPACING_M
from .protocol import ProtocolConfig
from .traffic import (
    IdmParams,
    SpawnRequest,
    ROLE_ATTACKER_SINGLE,
    ROLE_ATTACKER_SYBIL,
    ROLE_HONEST,
    ROUTE_LOOP,
    ROUTE_PATH,
    ROUTE_SHUTTLE,
)

ATTACKER_ID = "atk0"

ATTACK_NONE = "none"


class ScenarioError(ValueError):
    """A scenario document failed validation."""


_ROUTE_ITEM = {
    "type": "array",
    "items": {"type": "string", "minLength": 1},
    "minItems": 1,
}

SCENARIO_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "network", "seed", "demand", "protocol"],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "network": {"type": "string", "minLength": 1},
        "seed": {"type": "integer", "minimum": 0},
        "jam_spacing_m": {"type": "number", "exclusiveMinimum": 0},
        "idm": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "a_max": {"type": "number", "exclusiveMinimum": 0},
                "b_comf": {"type": "number", "exclusiveMinimum": 0},
                "T_headway": {"type": "number", "exclusiveMinimum": 0},
                "s0": {"type": "number", "exclusiveMinimum": 0},
                "delta": {"type": "number", "minimum": 1},
            },
        },
        "demand": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "density": {"enum": ["low", "high"]},
                "entries": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["route"],
                        "properties": {
                            "time": {"type": "number", "minimum": 0},
                            "route": _ROUTE_ITEM,
                            "mode": {"enum": [ROUTE_LOOP, ROUTE_PATH, ROUTE_SHUTTLE]},
                            "count": {"type": "integer", "minimum": 1},
                            "spacing_s": {"type": "number", "exclusiveMinimum": 0},
                        },
                    },
                },
                "poisson": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["route", "rate_per_min"],
                        "properties": {
                            "route": _ROUTE_ITEM,
                            "mode": {"enum": [ROUTE_LOOP, ROUTE_PATH, ROUTE_SHUTTLE]},
                            "rate_per_min": {"type": "number", "exclusiveMinimum": 0},
                        },
                    },
                },
            },
        },
        "learner": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1},
                           "minItems": 1},
                "window": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "lr_drop": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "lr_drop_period": {"type": "integer", "minimum": 1},
                "max_local_samples": {"type": "integer", "minimum": 1},
            },
        },
        "protocol": {
            "type": "object",
            "additionalProperties": False,
            "required": ["rounds"],
            "properties": {
                "workers": {"type": "integer", "minimum": 1},
                "quorum_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "deadline_s": {"type": "integer", "minimum": 1},
                "rounds": {"type": "integer", "minimum": 1},
                "warmup_s": {"type": "integer", "minimum": 0},
                "min_samples": {"type": "integer", "minimum": 1},
                "weighted_average": {"type": "boolean"},
                "convergence_rmse_kmh": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "required": ["mode", "vehicle"],
            "properties": {
                "mode": {"enum": [ATTACK_NONE, "single", "sybil"]},
                "vehicle": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["start_link"],
                    "properties": {
                        "time": {"type": "number", "minimum": 0},
                        "start_link": {"type": "string", "minLength": 1},
                    },
                },
                "sybils": {"type": "integer", "minimum": 1},
                "noise": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "family": {"enum": ["gaussian", "uniform"]},
                        "location": {"type": "number"},
                        "scale": {"type": ["number", "null"], "minimum": 0},
                    },
                },
                "trigger": {"enum": ["always", "at_convergence"]},
                "trigger_threshold": {"type": "number", "exclusiveMinimum": 0},
                "claimed_count": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "duration_s": {"type": "integer", "minimum": 10},
                "seed_offset": {"type": "integer", "minimum": 0},
                "warmup_s": {"type": "integer", "minimum": 0},
            },
        },
    },
}


@dataclass(frozen=True)
class DemandEntry:
    route: tuple[str, ...]
    time: float = 0.0
    mode: str = ROUTE_LOOP
    count: int = 1
    spacing_s: float = 10.0


@dataclass(frozen=True)
class PoissonStream:
    route: tuple[str, ...]
    rate_per_min: float
    mode: str = ROUTE_PATH


@dataclass(frozen=True)
class DemandSpec:
    entries: tuple[DemandEntry, ...] = ()
    streams: tuple[PoissonStream, ...] = ()
    density: str | None = None


@dataclass(frozen=True)
class LearnerSettings:
    hidden: tuple[int, ...] = (16, 16, 16, 16, 16)
    window: int = 3
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    max_local_samples: int = 300


@dataclass(frozen=True)
class EvalSettings:
    duration_s: int = 420
    seed_offset: int = 101
    warmup_s: int = 120  # replica seconds discarded before sampling


@dataclass(frozen=True)
class AttackSettings:
    mode: str
    spawn_time: float
    start_link: str
    route_plan: RoutePlan
    config: AttackConfig | None  # None when mode == "none" (honest twin)


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    network: RoadNetwork
    network_text: str
    demand: DemandSpec
    learner: LearnerSettings
    protocol: ProtocolConfig
    rounds: int
    warmup_s: int
    convergence_rmse_kmh: float | None
    attack: AttackSettings | None
    eval: EvalSettings
    idm: IdmParams
    jam_spacing_m: float

    @property
    def duration_s(self) -> int:
        return self.warmup_s + self.rounds * self.protocol.deadline_s

    @property
    def normalizer(self) -> Normalizer:
        return Normalizer(
            speed_scale_kmh=self.network.max_speed_limit_kmh,
            density_scale=self.network.jam_density)


def _validate_route(net: RoadNetwork, route, mode: str, context: str) -> None:
    for lid in route:
        if lid not in net.links:
            raise ScenarioError(f"{context}: route references unknown link {lid!r}")
    if mode == ROUTE_SHUTTLE:
        return  # shuttles respawn at the route start; adjacency not required
    hops = list(zip(route, route[1:]))
    if mode == ROUTE_LOOP and len(route) > 1:
        hops.append((route[-1], route[0]))
    for src, dst in hops:
        if src not in net.in_links(dst):
            raise ScenarioError(
                f"{context}: route hop {src!r} -> {dst!r} is not a declared adjacency")
    if mode == ROUTE_LOOP and len(route) == 1 and route[0] not in net.in_links(route[0]):
        raise ScenarioError(
            f"{context}: single-link loop {route[0]!r} needs a self adjacency")


def parse_scenario(doc: dict, base_dir: Path | None = None,
                   network_text: str | None = None) -> Scenario:
    """Validate a scenario document and resolve it into a Scenario."""
    try:
        jsonschema.validate(doc, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ScenarioError(f"scenario invalid at {path}: {exc.message}") from None

    jam = float(doc.get("jam_spacing_m", DEFAULT_JAM_SPACING_M))
    if network_text is None:
        net_path = Path(doc["network"])
        if not net_path.is_absolute() and base_dir is not None:
            net_path = base_dir / net_path
        try:
            network_text = net_path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ScenarioError(f"cannot read network file {net_path}: {exc}") from None
    network = parse_network(network_text, jam_spacing_m=jam)

    idm_doc = doc.get("idm", {})
    idm = IdmParams(
        a_max=idm_doc.get("a_max", 1.5), b_comf=idm_doc.get("b_comf", 2.0),
        T_headway=idm_doc.get("T_headway", 1.5), s0=idm_doc.get("s0", 2.0),
        delta=idm_doc.get("delta", 4.0))

    d = doc.get("demand", {})
    entries = tuple(
        DemandEntry(
            route=tuple(e["route"]), time=float(e.get("time", 0)),
            mode=e.get("mode", ROUTE_LOOP), count=int(e.get("count", 1)),
            spacing_s=float(e.get("spacing_s", 10.0)))
        for e in d.get("entries", []))
    streams = tuple(
        PoissonStream(
            route=tuple(s["route"]), rate_per_min=float(s["rate_per_min"]),
            mode=s.get("mode", ROUTE_PATH))
        for s in d.get("poisson", []))
    demand = DemandSpec(entries=entries, streams=streams, density=d.get("density"))
    for i, e in enumerate(entries):
        _validate_route(network, e.route, e.mode, f"demand.entries[{i}]")
    for i, s in enumerate(streams):
        _validate_route(network, s.route, s.mode, f"demand.poisson[{i}]")

    ldoc = doc.get("learner", {})
    learner = LearnerSettings(
        hidden=tuple(ldoc.get("hidden", [16] * 5)),
        window=int(ldoc.get("window", 3)),
        hyper=Hyperparameters(
            lr=ldoc.get("lr", 0.05), batch_size=ldoc.get("batch_size", 8),
            epochs=ldoc.get("epochs", 3), momentum=ldoc.get("momentum", 0.9),
            lr_drop=ldoc.get("lr_drop", 0.5),
            lr_drop_period=ldoc.get("lr_drop_period", 50)),
        max_local_samples=int(ldoc.get("max_local_samples", 300)))

    p = doc["protocol"]
    protocol = ProtocolConfig(
        workers_k=int(p.get("workers", 10)),
        quorum_fraction=float(p.get("quorum_fraction", 0.5)),
        deadline_s=int(p.get("deadline_s", 60)),
        min_samples=int(p.get("min_samples", 5)),
        weighted_average=bool(p.get("weighted_average", True)))
    rounds = int(p["rounds"])
    warmup_s = int(p.get("warmup_s", 60))
    convergence = p.get("convergence_rmse_kmh")
    convergence = float(convergence) if convergence is not None else None

    attack = None
    a = doc.get("attack")
    if a is not None:
        start_link = a["vehicle"]["start_link"]
        if start_link not in network.links:
            raise ScenarioError(f"attack.vehicle.start_link {start_link!r} is unknown")
        plan = attacker_route_policy(start_link, network)
        mode = a["mode"]
        cfg = None
        if mode != ATTACK_NONE:
            ndoc = a.get("noise", {})
            cfg = AttackConfig(
                mode=mode,
                noise=NoiseSpec(
                    family=ndoc.get("family", "gaussian"),
                    location=float(ndoc.get("location", 0.0)),
                    scale=ndoc.get("scale")),
                sybil_count=int(a.get("sybils", 5)) if mode == "sybil" else 1,
                trigger=a.get("trigger", "always"),
                trigger_threshold=float(a.get("trigger_threshold", 0.01)),
                claimed_count=a.get("claimed_count"))
        attack = AttackSettings(
            mode=mode, spawn_time=float(a["vehicle"].get("time", 0.0)),
            start_link=start_link, route_plan=plan, config=cfg)

    edoc = doc.get("eval", {})
    ev = EvalSettings(
        duration_s=int(edoc.get("duration_s", 420)),
        seed_offset=int(edoc.get("seed_offset", 101)),
        warmup_s=int(edoc.get("warmup_s", 120)))

    return Scenario(
        name=doc["name"], seed=int(doc["seed"]), network=network,
        network_text=network_text, demand=demand, learner=learner,
        protocol=protocol, rounds=rounds, warmup_s=warmup_s,
        convergence_rmse_kmh=convergence, attack=attack, eval=ev, idm=idm,
        jam_spacing_m=jam)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ScenarioError(f"cannot parse scenario {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ScenarioError(f"scenario {path} must be a mapping document")
    return parse_scenario(doc, base_dir=path.parent)


# ----------------------------------------------------------------------
# spawn schedule

def _attacker_role(mode: str) -> str:
    if mode == "single":
        return ROLE_ATTACKER_SINGLE
    if mode == "sybil":
        return ROLE_ATTACKER_SYBIL
    return ROLE_HONEST


def build_schedule(sc: Scenario, *, duration_s: int, demand_seed: int,
                   honest_only: bool = False) -> list[SpawnRequest]:
    """Expand the demand spec into concrete spawn requests.

    Deterministic per seed; vehicle ids are assigned in spawn-time order.
    Seeded Poisson streams are thinned per second at rate/60.  The attacker
    vehicle (when an attack block exists) always drives the same route, so
    traffic is identical across attack modes with the same seed.
    """
    from .seeds import derived_rng

    events: list[tuple[float, tuple[str, ...], str]] = []
    for e in sc.demand.entries:
        for k in range(e.count):
            events.append((e.time + k * e.spacing_s, e.route, e.mode))
    for idx, stream in enumerate(sc.demand.streams):
        rng = derived_rng(demand_seed, "poisson", idx)
        per_second = stream.rate_per_min / 60.0
        for t in range(duration_s):
            for _ in range(int(rng.poisson(per_second))):
                events.append((float(t), stream.route, stream.mode))
    events.sort(key=lambda ev: ev[0])  # stable: ties keep declaration order

    schedule = [
        SpawnRequest(time=time, vehicle_id=f"veh{i:04d}", route=route,
                     route_mode=mode, role=ROLE_HONEST)
        for i, (time, route, mode) in enumerate(events)]

    if sc.attack is not None:
        role = ROLE_HONEST if honest_only else _attacker_role(sc.attack.mode)
        schedule.append(SpawnRequest(
            time=sc.attack.spawn_time, vehicle_id=ATTACKER_ID,
            route=sc.attack.route_plan.links,
            route_mode=ROUTE_LOOP if sc.attack.route_plan.mode == "loop" else ROUTE_SHUTTLE,
            role=role))
    return schedule


# ----------------------------------------------------------------------
# fingerprints

def _digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _demand_payload(sc: Scenario) -> dict:
    return {
        "entries": [[e.time, list(e.route), e.mode, e.count, e.spacing_s]
                    for e in sc.demand.entries],
        "poisson": [[list(s.route), s.rate_per_min, s.mode] for s in sc.demand.streams],
        "attacker": None if sc.attack is None else
            [sc.attack.spawn_time, list(sc.attack.route_plan.links),
             sc.attack.route_plan.mode],
    }


def eval_fingerprint(sc: Scenario, seed: int) -> str:
    """Hash of everything that determines the held-out evaluation set."""
    return _digest({
        "network": sc.network_text,
        "jam": sc.jam_spacing_m,
        "idm": [sc.idm.a_max, sc.idm.b_comf, sc.idm.T_headway, sc.idm.s0, sc.idm.delta],
        "demand": _demand_payload(sc),
        "seed": seed,
        "eval": [sc.eval.duration_s, sc.eval.seed_offset, sc.eval.warmup_s],
        "window": sc.learner.window,
    })


def scenario_fingerprint(sc: Scenario, seed: int) -> str:
    """Hash of the full run configuration (attack included) plus the seed."""
    attack = None
    if sc.attack is not None:
        cfg = sc.attack.config
        attack = {
            "mode": sc.attack.mode,
            "spawn": [sc.attack.spawn_time, sc.attack.start_link],
            "config": None if cfg is None else [
                cfg.mode, cfg.noise.family, cfg.noise.location, cfg.noise.scale,
                cfg.sybil_count, cfg.trigger, cfg.trigger_threshold,
                cfg.claimed_count],
        }
    return _digest({
        "eval_fp": eval_fingerprint(sc, seed),
        "name": sc.name,
        "learner": [list(sc.learner.hidden), sc.learner.window,
                    sc.learner.hyper.lr, sc.learner.hyper.batch_size,
                    sc.learner.hyper.epochs, sc.learner.hyper.momentum,
                    sc.learner.hyper.lr_drop, sc.learner.hyper.lr_drop_period,
                    sc.learner.max_local_samples],
        "protocol": [sc.protocol.workers_k, sc.protocol.quorum_fraction,
                     sc.protocol.deadline_s, sc.protocol.min_samples,
                     sc.protocol.weighted_average, sc.rounds, sc.warmup_s,
                     sc.convergence_rmse_kmh],
        "attack": attack,
        "seed": seed,
    })
