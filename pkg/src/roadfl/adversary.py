"""Model-poisoning adversaries: single falsified-information and Sybil modes.

Both attacks are protocol compliant by construction: payloads are layout
congruent and finite, senders volunteer like any vehicle, and fabricated
parameters are drawn from a configurable noise distribution (by default a
Gaussian whose scale tracks the global model's empirical spread, which keeps
payloads statistically inconspicuous).  The Sybil variant mints extra
message-level identities, capped by the free capacity of the master vehicle's
current lane so the fabricated population stays plausible.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .learner import LocalUpdate, ModelParams
from .network import Link, RoadNetwork
from .seeds import derive_seed

log = logging.getLogger(__name__)

MODE_SINGLE = "single"
MODE_SYBIL = "sybil"

TRIGGER_ALWAYS = "always"
TRIGGER_AT_CONVERGENCE = "at_convergence"

# Fabricated identities carry a marker character that scenario vehicle ids
# never use, so they cannot collide with real vehicles.
SYBIL_ID_MARKER = "!"

_CONVERGENCE_WINDOW = 5  # rounds over which RMSE improvement is measured


@dataclass(frozen=True)
class NoiseSpec:
    """Distribution for fabricated parameters.

    ``scale=None`` tracks the empirical standard deviation of the current
    global model.  ``uniform`` draws from [location-scale, location+scale].
    """

    family: str = "gaussian"
    location: float = 0.0
    scale: float | None = None

    def __post_init__(self):
        if self.family not in ("gaussian", "uniform"):
            raise ValueError(f"unknown noise family {self.family!r}")
        if self.scale is not None and self.scale < 0:
            raise ValueError("noise scale must be >= 0")


@dataclass(frozen=True)
class AttackConfig:
    mode: str = MODE_SINGLE
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    sybil_count: int = 1
    trigger: str = TRIGGER_ALWAYS
    trigger_threshold: float = 0.01  # relative RMSE improvement
    claimed_count: int | None = None

    def __post_init__(self):
        if self.mode not in (MODE_SINGLE, MODE_SYBIL):
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.sybil_count < 1:
            raise ValueError("sybil_count must be >= 1")
        if self.mode == MODE_SINGLE and self.sybil_count != 1:
            raise ValueError("single mode implies sybil_count == 1")
        if self.trigger not in (TRIGGER_ALWAYS, TRIGGER_AT_CONVERGENCE):
            raise ValueError(f"unknown trigger {self.trigger!r}")
        if self.trigger_threshold <= 0:
            raise ValueError("trigger threshold must be > 0")
        if self.claimed_count is not None and self.claimed_count < 1:
            raise ValueError("claimed_count must be >= 1")


def fabricated_values(gm: ModelParams, noise: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw a layout-congruent fabricated parameter vector."""
    scale = noise.scale
    if scale is None:
        scale = float(np.std(gm.values))
    if noise.family == "gaussian":
        return rng.normal(noise.location, scale, gm.values.shape)
    return rng.uniform(noise.location - scale, noise.location + scale, gm.values.shape)


def attack1_update(gm: ModelParams, cfg: AttackConfig, seed: int, *,
                   sender: str, round_index: int,
                   claimed_count: int = 1) -> LocalUpdate:
    """Falsified-information payload: parameters sampled from cfg.noise.

    Deterministic per seed; the claimed sample count defaults to whatever the
    caller supplies (the orchestrator passes the median honest count unless
    the attack configures an explicit claim).
    """
    rng = np.random.default_rng(seed)
    values = fabricated_values(gm, cfg.noise, rng)
    claim = cfg.claimed_count if cfg.claimed_count is not None else claimed_count
    return LocalUpdate(
        sender=sender, round_index=round_index,
        params=ModelParams(gm.layout, values, version=round_index),
        sample_count=claim)


@dataclass(frozen=True)
class RoutePlan:
    mode: str  # "loop" or "shuttle"
    links: tuple[str, ...]


def attacker_route_policy(start_link: str, net: RoadNetwork) -> RoutePlan:
    """Closed loop through the start link staying inside RSU coverage.

    Falls back to shuttling (drive the covered stretch, respawn at its start)
    when coverage contains no cycle through the start link.
    """
    if not net.coverage:
        raise ValueError("coverage set is empty")
    net.link(start_link)

    if start_link in net.coverage:
        # BFS over covered out-links, looking for the shortest path back.
        parents: dict[str, str] = {}
        queue = deque()
        for nxt in net.out_links(start_link):
            if nxt in net.coverage and nxt not in parents:
                parents[nxt] = start_link
                queue.append(nxt)
        if start_link in parents:  # self-loop
            return RoutePlan("loop", (start_link,))
        while queue:
            cur = queue.popleft()
            for nxt in net.out_links(cur):
                if nxt == start_link:
                    path = [cur]
                    while path[-1] != start_link:
                        path.append(parents[path[-1]])
                    path.reverse()
                    return RoutePlan("loop", tuple(path))
                if nxt in net.coverage and nxt not in parents:
                    parents[nxt] = cur
                    queue.append(nxt)

    # No covered cycle: shuttle over a covered path through the start link.
    route = [start_link]
    seen = {start_link}
    cur = start_link
    while True:
        nxt = next((n for n in net.out_links(cur)
                    if n in net.coverage and n not in seen), None)
        if nxt is None:
            break
        route.append(nxt)
        seen.add(nxt)
        cur = nxt
    log.warning("no covered cycle through %s; falling back to shuttle over %s",
                start_link, route)
    return RoutePlan("shuttle", tuple(route))


def sybil_cap(link: Link, world) -> int:
    """Free capacity of the lane: fabricated identities must fit within it."""
    return max(0, link.capacity - world.occupancy(link.id))


def attack2_round(gm: ModelParams, cfg: AttackConfig, world, master_id: str,
                  seed: int, *, round_index: int = 0, selected=None,
                  claimed_count: int = 1) -> list[LocalUpdate]:
    """Sybil-attack payloads for one round.

    Admits ``min(sybil_count, free lane capacity)`` fabricated identities next
    to the master and emits one independently-seeded falsified payload per
    selected identity (all of them when ``selected`` is None).  A zero cap
    degenerates to the single falsified-information attack.
    """
    master = world.vehicles[master_id]
    link = world.net.link(master.link)
    if not world.net.coverage_contains(link.id):
        return []
    n = min(cfg.sybil_count, sybil_cap(link, world))
    identities = [master_id]
    identities += [f"syb{SYBIL_ID_MARKER}{master_id}{SYBIL_ID_MARKER}{k}" for k in range(n)]
    if selected is not None:
        chosen = [i for i in identities if i in set(selected)]
    else:
        chosen = identities
    out = []
    for identity in chosen:
        out.append(attack1_update(
            gm, cfg, derive_seed(seed, "attack", round_index, identity),
            sender=identity, round_index=round_index, claimed_count=claimed_count))
    return out


@dataclass
class ActivityRecord:
    """One row of the adversarial activity log."""

    round_index: int
    mode: str
    identities_emitted: int
    selected_count: int


class AdversaryAgent:
    """Stateful adversary bound to one master vehicle.

    The agent volunteers whenever the master is on a covered link and the
    trigger condition holds, mints and retires Sybil identities as the master
    moves in and out of coverage, and keeps the per-round activity log.
    The world view must provide ``vehicle_link(vehicle_id)``,
    ``occupancy(link_id)`` and ``net``.
    """

    def __init__(self, cfg: AttackConfig, master_id: str, master_seed: int,
                 world_view):
        self.cfg = cfg
        self.master_id = master_id
        self.master_seed = master_seed
        self.world = world_view
        self.sybil_ids: list[str] = []
        self.activity: list[ActivityRecord] = []
        self._minted = 0
        self._rmse_history: list[float] = []
        self._triggered = cfg.trigger == TRIGGER_ALWAYS
        self._claims: dict[int, int] = {}

    # -- trigger -------------------------------------------------------

    def triggered(self) -> bool:
        """Attack gate: always, or once the observed RMSE trace flattens."""
        if self._triggered:
            return True
        h = self._rmse_history
        if len(h) >= _CONVERGENCE_WINDOW + 1:
            base = h[-(_CONVERGENCE_WINDOW + 1)]
            if base > 0 and (base - h[-1]) / base < self.cfg.trigger_threshold:
                self._triggered = True  # strike and keep striking
        return self._triggered

    # -- chief-facing interface ----------------------------------------

    def volunteer_identities(self, round_index: int, gm: ModelParams) -> list[str]:
        link_id = self.world.vehicle_link(self.master_id)
        covered = link_id is not None and self.world.net.coverage_contains(link_id)
        if not covered:
            self.sybil_ids = []  # identities dissolve outside coverage
        if not covered or not self.triggered():
            self.activity.append(ActivityRecord(round_index, self.cfg.mode, 0, 0))
            return []
        identities = [self.master_id]
        if self.cfg.mode == MODE_SYBIL:
            link = self.world.net.link(link_id)
            cap = sybil_cap(link, self.world)
            want = min(self.cfg.sybil_count, cap)
            while len(self.sybil_ids) < want:
                self.sybil_ids.append(
                    f"syb{SYBIL_ID_MARKER}{self.master_id}{SYBIL_ID_MARKER}{self._minted}")
                self._minted += 1
            del self.sybil_ids[want:]
            identities += self.sybil_ids
        self.activity.append(ActivityRecord(round_index, self.cfg.mode, 0, 0))
        return identities

    def build_payloads(self, round_index: int, gm: ModelParams, selected_ids,
                       claimed_count: int) -> list[LocalUpdate]:
        claim = (self.cfg.claimed_count if self.cfg.claimed_count is not None
                 else claimed_count)
        out = []
        for identity in sorted(selected_ids):
            out.append(attack1_update(
                gm, self.cfg,
                derive_seed(self.master_seed, "attack", round_index, identity),
                sender=identity, round_index=round_index, claimed_count=claim))
        if self.activity and self.activity[-1].round_index == round_index:
            self.activity[-1].identities_emitted = len(out)
        return out

    def note_round(self, round_index: int, selected_ids) -> None:
        if self.activity and self.activity[-1].round_index == round_index:
            self.activity[-1].selected_count = len(selected_ids)

    def observe_outcome(self, outcome) -> None:
        """Track the chief's published RMSE trace for the trigger."""
        self._rmse_history.append(outcome.rmse_kmh)

    def owns(self, identity: str) -> bool:
        return identity == self.master_id or identity in set(self.sybil_ids) or (
            identity.startswith(f"syb{SYBIL_ID_MARKER}{self.master_id}{SYBIL_ID_MARKER}"))
