"""End-to-end orchestration: traffic recording, round replay, reports.

Vehicle motion never depends on the learning process (roles and model state
do not change driving), so a scenario is executed in two phases: first the
traffic simulation runs for the full horizon while per-second link
observations, vehicle positions, and occupancy are recorded; then the
federated rounds replay against the recorded trace through the environment
interface the chief expects.  The decoupling keeps runs deterministic and
lets the centralized baseline train on the pooled data before the federated
replay needs a convergence reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adversary import AdversaryAgent
from .learner import (
    ModelLayout,
    ModelParams,
    Normalizer,
    TrainingSample,
    evaluate_rmse,
    init_params,
)
from .protocol import Chief, centralized_train
from .report import AttackLogRecord, MetricsReport, RoundRecord
from .scenario import (
    ATTACKER_ID,
    ATTACK_NONE,
    Scenario,
    build_schedule,
    eval_fingerprint,
    scenario_fingerprint,
)
from .seeds import derive_seed
from .traffic import LinkObservation, ROLE_HONEST, World

N_FEATURES = 3  # speed, density, in-links speed


def samples_from_series(series, window: int, normalizer: Normalizer) -> list[TrainingSample]:
    """Sliding windows over one link's consecutive observation series."""
    rows = [normalizer.observation_row(obs) for obs in series]
    out = []
    for t in range(window, len(series)):
        out.append(TrainingSample(
            features=np.array(rows[t - window:t], dtype=np.float64),
            target=normalizer.normalize_speed(series[t].mean_speed_kmh)))
    return out


@dataclass
class TrafficLog:
    """Per-second record of one traffic run."""

    duration_s: int
    observations: list[dict[str, LinkObservation]]   # [t][link_id]
    vehicle_links: list[dict[str, str]]              # [t][vehicle_id]
    occupancy: list[dict[str, int]]                  # [t][link_id]
    samples: dict[str, list[tuple[int, TrainingSample]]]  # veh -> [(t_target, s)]
    roles: dict[str, str]
    trajectory_rows: list[tuple] | None = None


def run_traffic(sc: Scenario, *, duration_s: int, demand_seed: int,
                honest_only: bool = False,
                record_trajectories: bool = False) -> TrafficLog:
    """Run the microscopic simulation and record everything the FL side needs."""
    world = World(sc.network, sc.idm)
    world.add_demand(build_schedule(
        sc, duration_s=duration_s, demand_seed=demand_seed, honest_only=honest_only))

    link_ids = sorted(sc.network.links)
    observations: list[dict[str, LinkObservation]] = []
    vehicle_links: list[dict[str, str]] = []
    occupancy: list[dict[str, int]] = []
    roles: dict[str, str] = {}
    veh_obs: dict[str, list[tuple[int, LinkObservation]]] = {}
    trajectory: list[tuple] | None = [] if record_trajectories else None

    def record():
        t = int(world.time)
        obs = {lid: world.build_observation(lid) for lid in link_ids}
        observations.append(obs)
        links_now: dict[str, str] = {}
        occ = {lid: 0 for lid in link_ids}
        for vid in sorted(world.vehicles):
            veh = world.vehicles[vid]
            links_now[vid] = veh.link
            occ[veh.link] += 1
            roles.setdefault(vid, veh.role)
            veh_obs.setdefault(vid, []).append((t, obs[veh.link]))
            if trajectory is not None:
                trajectory.append((t, vid, veh.link, veh.position, veh.speed))
        vehicle_links.append(links_now)
        occupancy.append(occ)

    record()
    for _ in range(duration_s):
        world.step()
        record()

    window = sc.learner.window
    normalizer = sc.normalizer
    samples: dict[str, list[tuple[int, TrainingSample]]] = {}
    for vid, stream in veh_obs.items():
        per_veh: list[tuple[int, TrainingSample]] = []
        segment: list[LinkObservation] = []
        seg_times: list[int] = []

        def flush():
            for i, s in enumerate(samples_from_series(segment, window, normalizer)):
                per_veh.append((seg_times[window + i], s))

        last_link = None
        for t, obs in stream:
            if obs.link != last_link:
                flush()
                segment, seg_times = [], []
                last_link = obs.link
            segment.append(obs)
            seg_times.append(t)
        flush()
        samples[vid] = per_veh
    return TrafficLog(
        duration_s=duration_s, observations=observations,
        vehicle_links=vehicle_links, occupancy=occupancy, samples=samples,
        roles=roles, trajectory_rows=trajectory)


def build_eval_set(sc: Scenario, seed: int) -> tuple[TrainingSample, ...]:
    """Held-out samples from a clean (all-honest) simulation replica.

    The replica's spin-up phase is discarded so the evaluation set reflects
    steady-state traffic on the covered links.
    """
    replica = run_traffic(
        sc, duration_s=sc.eval.warmup_s + sc.eval.duration_s,
        demand_seed=derive_seed(seed + sc.eval.seed_offset, "eval-demand"),
        honest_only=True)
    normalizer = sc.normalizer
    out: list[TrainingSample] = []
    for lid in sorted(sc.network.coverage):
        series = [replica.observations[t][lid]
                  for t in range(sc.eval.warmup_s, len(replica.observations))]
        out.extend(samples_from_series(series, sc.learner.window, normalizer))
    return tuple(out)


class TraceEnv:
    """Environment adapter the chief drives; backed by a recorded trace.

    Also serves as the adversary's world view (``vehicle_link``,
    ``occupancy``, ``net`` reflect the current cursor time).
    """

    def __init__(self, trace: TrafficLog, sc: Scenario,
                 adversary: AdversaryAgent | None):
        self._trace = trace
        self._sc = sc
        self._t = 0
        self.adversary = adversary
        self.net = sc.network

    def time(self) -> int:
        return self._t

    def advance(self, seconds: int) -> None:
        self._t = min(self._t + int(seconds), self._trace.duration_s)

    def honest_volunteers(self, min_samples: int):
        t = self._t
        cap = self._sc.learner.max_local_samples
        out = []
        for vid in sorted(self._trace.vehicle_links[t]):
            if self._trace.roles.get(vid) != ROLE_HONEST:
                continue
            link = self._trace.vehicle_links[t][vid]
            if link not in self.net.coverage:
                continue
            history = self._trace.samples.get(vid, ())
            ready = [s for (ts, s) in history if ts <= t]
            if len(ready) >= min_samples:
                out.append((vid, tuple(ready[-cap:])))
        return out

    def connected_through(self, sender: str, t0: float, t1: float) -> bool:
        vid = sender
        if self.adversary is not None and self.adversary.owns(sender):
            vid = self.adversary.master_id
        last = self._trace.duration_s
        for t in range(int(t0), min(int(t1), last) + 1):
            link = self._trace.vehicle_links[t].get(vid)
            if link is None or link not in self.net.coverage:
                return False
        return True

    # -- adversary world view -------------------------------------------

    def vehicle_link(self, vehicle_id: str) -> str | None:
        return self._trace.vehicle_links[self._t].get(vehicle_id)

    def occupancy(self, link_id: str) -> int:
        return self._trace.occupancy[self._t].get(link_id, 0)


def pooled_samples(trace: TrafficLog, cap_per_vehicle: int) -> list[TrainingSample]:
    """All honest vehicles' datasets merged in (vehicle, time) order."""
    out: list[TrainingSample] = []
    for vid in sorted(trace.samples):
        if trace.roles.get(vid) != ROLE_HONEST:
            continue
        out.extend(s for (_t, s) in trace.samples[vid][-cap_per_vehicle:])
    return out


def run_scenario(sc: Scenario, seed: int | None = None, *,
                 trajectories_out: list | None = None,
                 compute_centralized: bool = False,
                 final_model_out: list | None = None,
                 _trace_cache: dict | None = None) -> MetricsReport:
    """Execute one scenario: traffic, federated rounds, metrics.

    Bit-deterministic for a given (scenario, seed).  ``_trace_cache`` lets
    sweeps share traffic recordings between attack arms that declare
    identical demand (motion does not depend on the attack mode).  When
    ``trajectories_out`` is given, per-second trajectory rows are appended
    to it.
    """
    seed = sc.seed if seed is None else int(seed)

    record_trajectories = trajectories_out is not None
    cache_key = (eval_fingerprint(sc, seed), record_trajectories)
    if _trace_cache is not None and cache_key in _trace_cache:
        trace, eval_set = _trace_cache[cache_key]
    else:
        trace = run_traffic(
            sc, duration_s=sc.duration_s, demand_seed=derive_seed(seed, "demand"),
            record_trajectories=record_trajectories)
        eval_set = build_eval_set(sc, seed)
        if _trace_cache is not None:
            _trace_cache[cache_key] = (trace, eval_set)
    if trajectories_out is not None:
        trajectories_out.extend(trace.trajectory_rows)

    layout = ModelLayout(input_size=N_FEATURES, hidden=sc.learner.hidden)
    model0 = init_params(layout, derive_seed(seed, "init"))

    centralized = None
    if compute_centralized:
        pool = pooled_samples(trace, sc.learner.max_local_samples)
        centralized = tuple(centralized_train(
            pool, sc.learner.hyper, epochs=sc.rounds * sc.learner.hyper.epochs,
            eval_set=eval_set, speed_scale_kmh=sc.normalizer.speed_scale_kmh,
            seed=derive_seed(seed, "centralized"), init_model=model0))

    agent = None
    attack_mode = None
    env = TraceEnv(trace, sc, None)
    if sc.attack is not None and sc.attack.mode != ATTACK_NONE:
        attack_mode = sc.attack.mode
        agent = AdversaryAgent(sc.attack.config, ATTACKER_ID,
                               derive_seed(seed, "adversary"), env)
        env.adversary = agent

    chief = Chief(model0, sc.learner.hyper, sc.protocol, eval_set,
                  sc.normalizer.speed_scale_kmh, seed)
    env.advance(sc.warmup_s)

    records: list[RoundRecord] = []
    rounds_to_convergence = None
    for _ in range(sc.rounds):
        outcome = chief.run_round(env)
        records.append(RoundRecord(
            round_index=outcome.round_index, volunteers=len(outcome.volunteers),
            selected=len(outcome.selected), received=len(outcome.received),
            status=outcome.status, rmse_kmh=outcome.rmse_kmh))
        if (sc.convergence_rmse_kmh is not None
                and rounds_to_convergence is None
                and outcome.rmse_kmh <= sc.convergence_rmse_kmh):
            rounds_to_convergence = outcome.round_index + 1
            break

    if final_model_out is not None:
        final_model_out.append(chief.model)

    attack_records = ()
    if agent is not None:
        attack_records = tuple(
            AttackLogRecord(a.round_index, a.mode, a.identities_emitted,
                            a.selected_count)
            for a in agent.activity)

    return MetricsReport(
        name=sc.name, seed=seed,
        fingerprint=scenario_fingerprint(sc, seed),
        eval_fingerprint=eval_fingerprint(sc, seed),
        records=tuple(records),
        final_rmse_kmh=records[-1].rmse_kmh,
        rounds_to_convergence=rounds_to_convergence,
        attack_mode=attack_mode,
        attack_records=attack_records,
        centralized_trace=centralized)


def run_sweep(sc: Scenario, seeds, *, compute_centralized: bool = False,
              share_traffic: bool = False) -> list[MetricsReport]:
    """Run one scenario across a seed list."""
    cache: dict | None = {} if share_traffic else None
    return [run_scenario(sc, seed, compute_centralized=compute_centralized,
                         _trace_cache=cache)
            for seed in seeds]
