"""Shared fixtures: tiny networks and a fast end-to-end scenario."""

from __future__ import annotations

import textwrap
from pathlib import Path

import numpy as np
import pytest

from roadfl.network import parse_network
from roadfl.scenario import load_scenario


CHAIN_NET = textwrap.dedent("""\
    # two-link chain
    link A length=450.0 lanes=1 limit=80.0 in=
    link B length=450.0 lanes=1 limit=80.0 in=A
    coverage A,B
    """)

RING_NET = textwrap.dedent("""\
    link R1 length=300.0 lanes=1 limit=80.0 in=R3
    link R2 length=300.0 lanes=1 limit=80.0 in=R1
    link R3 length=300.0 lanes=1 limit=80.0 in=R2
    coverage R1,R2,R3
    """)

MERGE_NET = textwrap.dedent("""\
    link M1 length=400.0 lanes=1 limit=60.0 in=
    link M2 length=400.0 lanes=1 limit=70.0 in=
    link M3 length=400.0 lanes=1 limit=80.0 in=
    link S length=450.0 lanes=2 limit=80.0 in=M1,M2,M3
    coverage S
    """)

TINY_SCENARIO = textwrap.dedent("""\
    name: tiny
    network: ring.net
    seed: 3
    demand:
      density: low
      entries:
        - {time: 0, route: [R1, R2, R3], mode: loop, count: 3, spacing_s: 6}
      poisson:
        - {route: [R1, R2, R3], mode: path, rate_per_min: 2.0}
    learner:
      hidden: [4]
      window: 2
      lr: 0.05
      epochs: 1
      batch_size: 8
      momentum: 0.9
      lr_drop: 0.5
      lr_drop_period: 10
      max_local_samples: 80
    protocol:
      workers: 3
      quorum_fraction: 0.5
      deadline_s: 20
      rounds: 3
      warmup_s: 20
      min_samples: 3
      weighted_average: true
    eval:
      duration_s: 60
      seed_offset: 11
      warmup_s: 20
    """)

TINY_ATTACK_BLOCK = textwrap.dedent("""\
    attack:
      mode: {mode}
      vehicle: {{time: 0, start_link: R1}}
      sybils: 3
      noise: {{family: gaussian, location: 0.0, scale: null}}
      trigger: always
    """)


@pytest.fixture
def chain_net():
    return parse_network(CHAIN_NET)


@pytest.fixture
def ring_net():
    return parse_network(RING_NET)


@pytest.fixture
def merge_net():
    return parse_network(MERGE_NET)


def write_tiny_scenario(tmp_path: Path, attack_mode: str | None = None,
                        **overrides) -> Path:
    """Write the fast ring scenario (optionally with an attack block)."""
    doc = TINY_SCENARIO
    for key, value in overrides.items():
        doc = doc.replace(key, value)
    if attack_mode is not None:
        doc += TINY_ATTACK_BLOCK.format(mode=attack_mode)
    tmp_path.mkdir(parents=True, exist_ok=True)
    (tmp_path / "ring.net").write_text(RING_NET)
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(doc)
    return cfg


@pytest.fixture
def tiny_scenario(tmp_path):
    return load_scenario(write_tiny_scenario(tmp_path))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
