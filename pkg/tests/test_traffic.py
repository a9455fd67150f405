import pytest

from roadfl.network import parse_network
from roadfl.traffic import (
    CollisionError,
    FREE_ROAD_GAP_M,
    IdmParams,
    SpawnRequest,
    Vehicle,
    World,
    idm_acceleration,
    idm_equilibrium_gap,
    spawn_demand,
    step,
)

from conftest import RING_NET

LONG_NET = "link L length=8000.0 lanes=1 limit=80.0 in=\ncoverage L\n"


def bisect_equilibrium_gap(v, p, lo=1e-3, hi=1e6, tol=1e-12):
    """Independent root finder for idm_acceleration(v, v, g) = 0 in g."""
    f = lambda g: idm_acceleration(v, v, g, p)
    assert f(lo) < 0 < f(hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


# ----------------------------------------------------------------------
# idm_acceleration

def test_standstill_free_road_accelerates_at_a_max():
    p = IdmParams()
    a = idm_acceleration(0.0, 0.0, 1e6, p)
    assert a == pytest.approx(p.a_max * (1 - (p.s0 / 1e6) ** 2), abs=1e-12)
    assert a == pytest.approx(p.a_max, abs=1e-8)


def test_free_flow_fixed_point():
    p = IdmParams()
    a = idm_acceleration(p.v0, p.v0, 1e6, p)
    assert abs(a) < 1e-6


def test_collision_state_raises():
    with pytest.raises(CollisionError):
        idm_acceleration(5.0, 5.0, 0.0, IdmParams())


@pytest.mark.parametrize("v_frac", [0.3, 0.5, 0.8, 0.95])
def test_equilibrium_gap_matches_bisection_oracle(v_frac):
    p = IdmParams()
    v = v_frac * p.v0
    g_oracle = bisect_equilibrium_gap(v, p)
    g_closed = idm_equilibrium_gap(v, p)
    assert g_closed == pytest.approx(g_oracle, rel=1e-9)
    assert idm_acceleration(v, v, g_closed, p) == pytest.approx(0.0, abs=1e-9)


# ----------------------------------------------------------------------
# step

def _world(text=LONG_NET, idm=None):
    return World(parse_network(text), idm)


def test_free_vehicle_advances_ballistically():
    w = _world()
    p = w.idm.for_link(w.net.link("L"))
    w.vehicles["v"] = Vehicle(id="v", link="L", position=100.0, speed=p.v0,
                              route=("L",), route_mode="path")
    step(w)
    veh = w.vehicles["v"]
    assert abs(veh.speed - p.v0) < 1e-9
    assert veh.position == pytest.approx(100.0 + p.v0, abs=1e-6)


def test_empty_world_step_is_identity():
    w = _world()
    step(w)
    assert w.vehicles == {}
    assert w.time == 1.0


def test_colliding_snapshot_raises():
    w = _world()
    w.vehicles["a"] = Vehicle(id="a", link="L", position=50.0, speed=10.0, route=("L",))
    w.vehicles["b"] = Vehicle(id="b", link="L", position=50.0, speed=10.0, route=("L",))
    with pytest.raises(CollisionError):
        step(w)


def test_two_vehicle_platoon_holds_equilibrium_gap():
    p = IdmParams()
    w = _world()
    v = 0.6 * p.v0
    gap = bisect_equilibrium_gap(v, p)
    w.vehicles["lead"] = Vehicle(id="lead", link="L", position=1000.0 + gap,
                                 speed=v, route=("L",), controller="constant")
    w.vehicles["tail"] = Vehicle(id="tail", link="L", position=1000.0, speed=v,
                                 route=("L",))
    for _ in range(100):
        step(w)
    drift = (w.vehicles["lead"].position - w.vehicles["tail"].position) - gap
    assert abs(drift) < 1e-6


def test_speed_clamped_to_link_limit():
    w = _world()
    p = w.idm.for_link(w.net.link("L"))
    w.vehicles["v"] = Vehicle(id="v", link="L", position=0.0, speed=0.0, route=("L",))
    for _ in range(60):
        step(w)
        assert 0.0 <= w.vehicles["v"].speed <= p.v0 + 1e-9


def test_loop_vehicle_wraps_and_path_vehicle_arrives(ring_net):
    w = World(ring_net)
    w.vehicles["loop"] = Vehicle(id="loop", link="R1", position=295.0, speed=20.0,
                                 route=("R1", "R2", "R3"), route_index=0)
    w.vehicles["path"] = Vehicle(id="path", link="R3", position=295.0, speed=20.0,
                                 route=("R3",), route_index=0, route_mode="path")
    w.spawned = 2
    step(w)
    assert w.vehicles["loop"].link == "R2"
    assert w.vehicles["loop"].position == pytest.approx(15.0, abs=1.0)
    assert "path" not in w.vehicles
    assert w.arrived == 1


def test_blocked_transition_waits_at_link_end(ring_net):
    w = World(ring_net)
    w.vehicles["mover"] = Vehicle(id="mover", link="R1", position=298.0, speed=15.0,
                                  route=("R1", "R2", "R3"))
    # stationary queue right at the entry of R2
    w.vehicles["block"] = Vehicle(id="block", link="R2", position=1.0, speed=0.0,
                                  route=("R2",), controller="constant")
    step(w)
    assert w.vehicles["mover"].link == "R1"
    assert w.vehicles["mover"].position == 300.0
    assert w.vehicles["mover"].speed == 0.0


# ----------------------------------------------------------------------
# spawning

def test_spawn_onto_empty_link():
    w = _world()
    spawn_demand(w, [SpawnRequest(time=0.0, vehicle_id="v", route=("L",),
                                  route_mode="path")])
    assert "v" in w.vehicles
    assert w.vehicles["v"].position == 0.0
    assert w.vehicles["v"].speed == pytest.approx(80.0 / 3.6)


def test_spawn_blocked_by_occupied_entry_defers():
    w = _world()
    w.vehicles["squat"] = Vehicle(id="squat", link="L", position=1.0, speed=0.0,
                                  route=("L",), controller="constant")
    w.spawned = 1
    spawn_demand(w, [SpawnRequest(time=0.0, vehicle_id="v", route=("L",))])
    assert "v" not in w.vehicles  # deferred, not dropped
    w.vehicles["squat"].position = 50.0
    step(w)
    assert "v" in w.vehicles


def test_spawn_speed_is_leader_safe():
    w = _world()
    w.vehicles["lead"] = Vehicle(id="lead", link="L", position=10.0, speed=3.0,
                                 route=("L",))
    w.spawned = 1
    spawn_demand(w, [SpawnRequest(time=0.0, vehicle_id="v", route=("L",))])
    p = w.idm.for_link(w.net.link("L"))
    expected = min(p.v0, (10.0 - p.s0) / p.T_headway)
    assert w.vehicles["v"].speed == pytest.approx(expected)


def test_duplicate_vehicle_id_rejected():
    w = _world()
    spawn_demand(w, [SpawnRequest(time=0.0, vehicle_id="v", route=("L",))])
    with pytest.raises(ValueError, match="duplicate"):
        spawn_demand(w, [SpawnRequest(time=5.0, vehicle_id="v", route=("L",))])


def test_unknown_route_link_rejected_at_load():
    w = _world()
    with pytest.raises(Exception, match="unknown link"):
        spawn_demand(w, [SpawnRequest(time=0.0, vehicle_id="v", route=("L", "Q"))])


# ----------------------------------------------------------------------
# indicators and observations

def test_empty_link_indicators():
    w = _world()
    assert w.link_indicators("L") == (80.0, 0.0)


def test_three_vehicle_indicators():
    doc = "link A length=450.0 lanes=1 limit=120.0 in=\ncoverage A\n"
    w = _world(doc)
    for i, speed in enumerate([10.0, 20.0, 30.0]):
        w.vehicles[f"v{i}"] = Vehicle(id=f"v{i}", link="A", position=50.0 * (i + 1),
                                      speed=speed, route=("A",))
    mean_kmh, density = w.link_indicators("A")
    assert mean_kmh == pytest.approx(72.0)
    assert density == pytest.approx(3 / 0.45)


def test_indicators_match_full_scan_oracle(ring_net, rng):
    w = World(ring_net)
    links = list(ring_net.links)
    for i in range(25):
        lid = links[int(rng.integers(len(links)))]
        w.vehicles[f"v{i}"] = Vehicle(
            id=f"v{i}", link=lid, position=float(rng.uniform(0, 290)) + i * 1e-4,
            speed=float(rng.uniform(0, 22)), route=(lid,))
    for lid in links:
        speeds = [v.speed for v in w.vehicles.values() if v.link == lid]
        if speeds:
            want_speed = sum(sorted(speeds)) / len(speeds) * 3.6
            want_density = len(speeds) / (0.3 * 1)
        else:
            want_speed, want_density = 80.0, 0.0
        got_speed, got_density = w.link_indicators(lid)
        assert got_speed == pytest.approx(want_speed, abs=1e-9)
        assert got_density == pytest.approx(want_density, abs=1e-12)


def test_observation_source_link_conventions():
    doc = "link A length=400.0 lanes=1 limit=80.0 in=\ncoverage A\n"
    w = _world(doc)
    obs = w.build_observation("A")
    assert (obs.mean_speed_kmh, obs.density, obs.in_speed_kmh) == (80.0, 0.0, 80.0)


def test_observation_single_in_link(chain_net_text=None):
    doc = ("link A length=400.0 lanes=1 limit=80.0 in=\n"
           "link B length=400.0 lanes=1 limit=80.0 in=A\ncoverage A,B\n")
    w = _world(doc)
    w.vehicles["x"] = Vehicle(id="x", link="A", position=10.0,
                              speed=40.0 / 3.6, route=("A",))
    obs = w.build_observation("B")
    assert obs.in_speed_kmh == pytest.approx(40.0)


def test_observation_three_in_merge(merge_net):
    w = World(merge_net)
    for lid, speed_kmh in [("M1", 30.0), ("M2", 50.0), ("M3", 70.0)]:
        w.vehicles[lid] = Vehicle(id=lid, link=lid, position=10.0,
                                  speed=speed_kmh / 3.6, route=(lid,))
    obs = w.build_observation("S")
    direct_mean = (30.0 + 50.0 + 70.0) / 3
    assert obs.in_speed_kmh == pytest.approx(direct_mean)


# ----------------------------------------------------------------------
# determinism and conservation

def _demand(n_loops=4, n_paths=6):
    reqs = [SpawnRequest(time=3.0 * i, vehicle_id=f"loop{i}",
                         route=("R1", "R2", "R3"), route_mode="loop")
            for i in range(n_loops)]
    reqs += [SpawnRequest(time=5.0 * i + 1, vehicle_id=f"path{i}",
                          route=("R1", "R2", "R3"), route_mode="path")
             for i in range(n_paths)]
    return reqs


def _run_ring(steps=120):
    net = parse_network(RING_NET)
    w = World(net)
    spawn_demand(w, _demand())
    states = []
    for _ in range(steps):
        step(w)
        w.check_invariants()
        states.append(tuple((v.id, v.link, v.position, v.speed)
                            for v in w.vehicles.values()))
    return w, states


def test_trajectories_bit_deterministic():
    _, first = _run_ring()
    _, second = _run_ring()
    assert first == second


def test_conservation_of_path_vehicles():
    w, _ = _run_ring()
    assert w.spawned - w.arrived == len(w.vehicles)


def test_observation_bounds_hold_on_random_worlds(ring_net, rng):
    w = World(ring_net)
    spawn_demand(w, _demand())
    for _ in range(80):
        step(w)
        for lid in ring_net.links:
            obs = w.build_observation(lid)
            link = ring_net.link(lid)
            assert 0.0 <= obs.mean_speed_kmh <= link.speed_limit_kmh + 1e-9
            assert 0.0 <= obs.density <= link.jam_density + 1e-9
            limits = [ring_net.link(i).speed_limit_kmh for i in link.in_links]
            cap = max(limits) if limits else link.speed_limit_kmh
            assert 0.0 <= obs.in_speed_kmh <= cap + 1e-9
