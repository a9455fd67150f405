"""roadfl: microscopic traffic + federated learning co-simulation with
pluggable model-poisoning adversaries."""

from .network import (
    Link,
    RoadNetwork,
    load_network,
    parse_network,
    format_network,
    save_network,
)
from .traffic import (
    IdmParams,
    LinkObservation,
    SpawnRequest,
    Vehicle,
    World,
    idm_acceleration,
    idm_equilibrium_gap,
)
from .learner import (
    Gradient,
    Hyperparameters,
    LocalUpdate,
    ModelLayout,
    ModelParams,
    Normalizer,
    TrainingSample,
    init_params,
    forward,
    predict,
    grad,
    sgd_step,
    local_train,
    rmse,
    evaluate_rmse,
    save_model,
    load_model,
)
from .protocol import (
    Chief,
    FlTask,
    ProtocolConfig,
    RoundOutcome,
    centralized_train,
    federated_average,
    select_workers,
)
from .adversary import (
    AdversaryAgent,
    AttackConfig,
    NoiseSpec,
    attack1_update,
    attack2_round,
    attacker_route_policy,
    sybil_cap,
)
from .scenario import Scenario, ScenarioError, load_scenario, parse_scenario
from .harness import run_scenario, run_sweep, samples_from_series
from .report import MetricsReport, compare, load_report, save_report

__version__ = "0.1.0"
