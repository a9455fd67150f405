"""Per-second microscopic traffic: IDM car following on a link graph.

Vehicles are points on directed links.  Each step computes accelerations from
a read-only snapshot, commits speeds and positions link by link from front to
back, then resolves link transitions and due spawns in a deterministic order,
so two runs of the same scenario and seed produce bit-identical trajectories.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace

from .network import Link, RoadNetwork, UnknownLinkError, MPS_TO_KMH

# Sentinel gap for vehicles with an empty road ahead.  Large enough that the
# interaction term contributes < 1e-14 m/s^2 at any legal speed.
FREE_ROAD_GAP_M = 1e9

# Hard floor kept between a follower and its committed leader.  Well below the
# IDM standstill gap s0, so it only binds in emergency braking at dt = 1 s.
COLLISION_MARGIN_M = 0.5

ROLE_HONEST = "honest"
ROLE_ATTACKER_SINGLE = "attacker_single"
ROLE_ATTACKER_SYBIL = "attacker_sybil"
ROLES = (ROLE_HONEST, ROLE_ATTACKER_SINGLE, ROLE_ATTACKER_SYBIL)

ROUTE_LOOP = "loop"       # wraps to the first link; links must be adjacent
ROUTE_PATH = "path"       # vehicle is removed after its last link
ROUTE_SHUTTLE = "shuttle"  # wraps like a loop but re-enters by respawn


class CollisionError(RuntimeError):
    """A follower reached non-positive gap; indicates a simulation defect."""


@dataclass(frozen=True)
class IdmParams:
    """Intelligent Driver Model parameters; v0 is per link (speed limit)."""

    v0: float = 80.0 / 3.6  # m/s
    a_max: float = 1.5      # m/s^2
    b_comf: float = 2.0     # m/s^2
    T_headway: float = 1.5  # s
    s0: float = 2.0         # m
    delta: float = 4.0

    def __post_init__(self):
        for name in ("v0", "a_max", "b_comf", "T_headway", "s0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"IDM parameter {name} must be > 0")
        if self.delta < 1:
            raise ValueError("IDM exponent delta must be >= 1")

    def for_link(self, link: Link) -> "IdmParams":
        return replace(self, v0=link.speed_limit_mps)


def idm_acceleration(v: float, v_lead: float, gap: float, p: IdmParams) -> float:
    """IDM acceleration a_max[1 - (v/v0)^delta - (s*/gap)^2].

    s* = s0 + v*T + v*(v - v_lead) / (2*sqrt(a_max*b_comf)).  Callers pass a
    large sentinel gap (and v_lead = v) for vehicles with a free road ahead.
    """
    if gap <= 0:
        raise CollisionError(f"non-positive gap {gap} at speed {v}")
    s_star = p.s0 + v * p.T_headway + v * (v - v_lead) / (2.0 * math.sqrt(p.a_max * p.b_comf))
    return p.a_max * (1.0 - (v / p.v0) ** p.delta - (s_star / gap) ** 2)


def idm_equilibrium_gap(v: float, p: IdmParams) -> float:
    """Closed-form gap at which a follower at speed v holds zero acceleration."""
    if not 0 < v < p.v0:
        raise ValueError("equilibrium gap exists only for 0 < v < v0")
    s_star = p.s0 + v * p.T_headway
    return s_star / math.sqrt(1.0 - (v / p.v0) ** p.delta)


@dataclass
class Vehicle:
    """Kinematic state of one vehicle."""

    id: str
    link: str
    position: float           # meters from link start
    speed: float              # m/s
    route: tuple[str, ...]
    route_index: int = 0
    route_mode: str = ROUTE_LOOP
    role: str = ROLE_HONEST
    controller: str = "idm"   # "idm" or "constant" (externally held speed)

    def next_link(self) -> str | None:
        """Link after the current one, or None when a path route ends."""
        if self.route_index + 1 < len(self.route):
            return self.route[self.route_index + 1]
        if self.route_mode in (ROUTE_LOOP, ROUTE_SHUTTLE):
            return self.route[0]
        return None


@dataclass(frozen=True)
class SpawnRequest:
    time: float
    vehicle_id: str
    route: tuple[str, ...]
    route_mode: str = ROUTE_LOOP
    role: str = ROLE_HONEST
    speed: float | None = None   # None: min(v0, leader-safe speed)


@dataclass(frozen=True)
class LinkObservation:
    """Space-mean indicators for one link at one instant."""

    time: float
    link: str
    mean_speed_kmh: float
    density: float      # veh/km/lane
    in_speed_kmh: float  # mean over in-links' mean speeds


class World:
    """Mutable simulation state: one road network plus its vehicles.

    A single logical writer advances the world via :meth:`step`; everything
    else only reads.
    """

    def __init__(self, net: RoadNetwork, idm: IdmParams | None = None):
        self.net = net
        self.idm = idm if idm is not None else IdmParams()
        self.time = 0.0
        self.vehicles: dict[str, Vehicle] = {}
        self.spawned = 0
        self.arrived = 0
        self.deferred_spawns = 0
        self._pending: deque[SpawnRequest] = deque()
        self._schedule: list[SpawnRequest] = []  # not-yet-due entries, sorted
        self._all_ids: set[str] = set()
        self._params = {lid: self.idm.for_link(link) for lid, link in net.links.items()}

    # ------------------------------------------------------------------
    # demand

    def add_demand(self, schedule) -> None:
        """Queue spawn requests; entries are validated against the network."""
        incoming = sorted(schedule, key=lambda r: (r.time, r.vehicle_id))
        for req in incoming:
            for lid in req.route:
                if lid not in self.net.links:
                    raise UnknownLinkError(
                        f"spawn {req.vehicle_id!r}: route references unknown link {lid!r}")
            if req.vehicle_id in self._all_ids:
                raise ValueError(f"duplicate vehicle id {req.vehicle_id!r} in demand")
            self._all_ids.add(req.vehicle_id)
        self._schedule.extend(incoming)
        self._schedule.sort(key=lambda r: (r.time, r.vehicle_id))
        self.process_spawns()

    def process_spawns(self) -> None:
        """Insert due and previously deferred vehicles where space allows."""
        due = 0
        while due < len(self._schedule) and self._schedule[due].time <= self.time:
            due += 1
        if due:
            self._pending.extend(self._schedule[:due])
            del self._schedule[:due]
        still_blocked: deque[SpawnRequest] = deque()
        while self._pending:
            req = self._pending.popleft()
            if not self._try_spawn(req):
                self.deferred_spawns += 1
                still_blocked.append(req)
        self._pending = still_blocked

    def _try_spawn(self, req: SpawnRequest) -> bool:
        link = self.net.link(req.route[0])
        p = self._params[link.id]
        occupants = self.vehicles_on(link.id)
        if occupants:
            rear = occupants[-1]
            if rear.position < p.s0:
                return False  # insufficient free space at the entry point
            safe = max(0.0, (rear.position - p.s0) / p.T_headway)
            speed = min(p.v0, safe)
        else:
            speed = p.v0
        if req.speed is not None:
            speed = min(req.speed, link.speed_limit_mps)
        self.vehicles[req.vehicle_id] = Vehicle(
            id=req.vehicle_id, link=link.id, position=0.0, speed=speed,
            route=tuple(req.route), route_index=0, route_mode=req.route_mode,
            role=req.role)
        self.spawned += 1
        return True

    # ------------------------------------------------------------------
    # queries

    def vehicles_on(self, link_id: str) -> list[Vehicle]:
        """Occupants of a link ordered front (largest position) first."""
        self.net.link(link_id)
        occ = [v for v in self.vehicles.values() if v.link == link_id]
        occ.sort(key=lambda v: (-v.position, v.id))
        return occ

    def occupancy(self, link_id: str) -> int:
        self.net.link(link_id)
        return sum(1 for v in self.vehicles.values() if v.link == link_id)

    def link_indicators(self, link_id: str) -> tuple[float, float]:
        """(mean speed km/h, density veh/km/lane) over the current snapshot.

        An empty link reports its speed limit and zero density.
        """
        link = self.net.link(link_id)
        occ = [v for v in self.vehicles.values() if v.link == link_id]
        if not occ:
            return link.speed_limit_kmh, 0.0
        mean_mps = sum(v.speed for v in sorted(occ, key=lambda v: v.id)) / len(occ)
        density = len(occ) / (link.length_km * link.lanes)
        return mean_mps * MPS_TO_KMH, density

    def build_observation(self, link_id: str, time: float | None = None) -> LinkObservation:
        """Link indicators plus the mean speed over declared in-links.

        A source link (no in-links) reports its own speed limit as in-speed.
        """
        link = self.net.link(link_id)
        mean_kmh, density = self.link_indicators(link_id)
        ins = sorted(link.in_links)
        if ins:
            in_speed = sum(self.link_indicators(i)[0] for i in ins) / len(ins)
        else:
            in_speed = link.speed_limit_kmh
        return LinkObservation(
            time=self.time if time is None else time, link=link_id,
            mean_speed_kmh=mean_kmh, density=density, in_speed_kmh=in_speed)

    # ------------------------------------------------------------------
    # stepping

    def step(self, dt: float = 1.0) -> None:
        """Advance every vehicle by one time step.

        Phase 1 computes accelerations from the pre-step snapshot; phase 2
        commits speeds/positions per link front to back (with a hard
        anti-collision cap); phase 3 resolves link transitions; finally due
        spawns are processed at the new time.
        """
        by_link: dict[str, list[Vehicle]] = {}
        for veh in self.vehicles.values():
            by_link.setdefault(veh.link, []).append(veh)
        for occ in by_link.values():
            occ.sort(key=lambda v: (-v.position, v.id))

        accel: dict[str, float] = {}
        for link_id in sorted(by_link):
            p = self._params[link_id]
            occ = by_link[link_id]
            for i, veh in enumerate(occ):
                if veh.controller == "constant":
                    accel[veh.id] = 0.0
                    continue
                if i == 0:
                    accel[veh.id] = idm_acceleration(veh.speed, veh.speed, FREE_ROAD_GAP_M, p)
                else:
                    leader = occ[i - 1]
                    gap = leader.position - veh.position
                    accel[veh.id] = idm_acceleration(veh.speed, leader.speed, gap, p)

        for link_id in sorted(by_link):
            p = self._params[link_id]
            ahead_x: float | None = None
            for veh in by_link[link_id]:
                v_new = veh.speed + accel[veh.id] * dt
                v_new = min(max(v_new, 0.0), p.v0)
                x_new = veh.position + v_new * dt
                if ahead_x is not None and x_new > ahead_x - COLLISION_MARGIN_M:
                    x_new = max(ahead_x - COLLISION_MARGIN_M, veh.position)
                    v_new = max(0.0, (x_new - veh.position) / dt)
                veh.speed = v_new
                veh.position = x_new
                ahead_x = x_new

        movers = [v for v in self.vehicles.values()
                  if v.position > self.net.link(v.link).length_m]
        movers.sort(key=lambda v: (v.link, -v.position, v.id))
        for veh in movers:
            self._transition(veh)

        self.time += dt
        self.process_spawns()

    def _transition(self, veh: Vehicle) -> None:
        cur = self.net.link(veh.link)
        overshoot = veh.position - cur.length_m
        nxt_id = veh.next_link()
        if nxt_id is None:
            del self.vehicles[veh.id]
            self.arrived += 1
            return
        nxt = self.net.link(nxt_id)
        p = self._params[nxt_id]
        entry = min(overshoot, nxt.length_m)
        occupants = [o for o in self.vehicles_on(nxt_id) if o.id != veh.id]
        if occupants and occupants[-1].position < entry + p.s0:
            # insufficient gap at entry: wait at the link end at speed 0
            veh.position = cur.length_m
            veh.speed = 0.0
            return
        veh.link = nxt_id
        veh.position = entry
        veh.speed = min(veh.speed, nxt.speed_limit_mps)
        if veh.route_index + 1 < len(veh.route):
            veh.route_index += 1
        else:
            veh.route_index = 0

    # ------------------------------------------------------------------
    # invariant verification (debug aid; used heavily by the test suite)

    def check_invariants(self) -> None:
        for veh in self.vehicles.values():
            link = self.net.link(veh.link)
            if not 0.0 <= veh.position <= link.length_m:
                raise AssertionError(
                    f"{veh.id}: position {veh.position} outside link {veh.link}")
            if not 0.0 <= veh.speed <= link.speed_limit_mps + 1e-9:
                raise AssertionError(
                    f"{veh.id}: speed {veh.speed} outside [0, limit] on {veh.link}")
        for link_id in self.net.links:
            occ = self.vehicles_on(link_id)
            for follower, leader in zip(occ[1:], occ):
                if leader.position - follower.position <= 0:
                    raise CollisionError(
                        f"gap <= 0 between {follower.id} and {leader.id} on {link_id}")
        live = sum(1 for v in self.vehicles.values())
        if self.spawned - self.arrived != live:
            raise AssertionError(
                f"conservation violated: spawned {self.spawned} - arrived "
                f"{self.arrived} != present {live}")


# Module-level aliases matching the operation names used elsewhere.

def step(world: World, dt: float = 1.0) -> World:
    world.step(dt)
    return world


def spawn_demand(world: World, schedule) -> World:
    world.add_demand(schedule)
    return world


def link_indicators(world: World, link_id: str) -> tuple[float, float]:
    return world.link_indicators(link_id)


def build_observation(world: World, link_id: str, time: float | None = None) -> LinkObservation:
    return world.build_observation(link_id, time)
