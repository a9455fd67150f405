"""Chief-side round state machine for federated training at the RSU.

Each round: broadcast the task to vehicles in coverage, collect volunteers,
select at most K workers, hand out the current global model, gather the
updates that arrive before the deadline from workers that stayed connected,
and either fold them in by federated averaging (quorum met) or abandon the
round leaving the global model untouched.

The chief talks to the world through a small environment interface (see
:class:`Chief`), which keeps the state machine independent of how the traffic
underneath is produced (live stepping, recorded traces, or test fakes).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .learner import (
    DivergenceError,
    Hyperparameters,
    LocalUpdate,
    ModelLayout,
    ModelParams,
    evaluate_rmse,
    local_train,
    run_sgd_epochs,
)
from .seeds import derive_seed

log = logging.getLogger(__name__)

STATUS_COMPLETED = "completed"
STATUS_ABANDONED = "abandoned"


class ProtocolError(RuntimeError):
    """A received update violates the protocol (layout or finiteness)."""

    def __init__(self, sender: str, reason: str):
        super().__init__(f"update from {sender!r} rejected: {reason}")
        self.sender = sender


@dataclass(frozen=True)
class ProtocolConfig:
    workers_k: int = 10
    quorum_fraction: float = 0.5
    deadline_s: int = 60
    min_samples: int = 5
    weighted_average: bool = True

    def __post_init__(self):
        if self.workers_k < 1:
            raise ValueError("workers_k must be >= 1")
        if not 0.0 < self.quorum_fraction <= 1.0:
            raise ValueError("quorum_fraction must be in (0, 1]")
        if self.deadline_s < 1:
            raise ValueError("deadline_s must be >= 1")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")


@dataclass(frozen=True)
class FlTask:
    """One round's broadcast: hyperparameters, timing plan, global model."""

    round_index: int
    hyper: Hyperparameters
    announce_time: float
    deadline_time: float
    model: ModelParams

    def __post_init__(self):
        if self.deadline_time <= self.announce_time:
            raise ValueError("deadline must be after the announcement")


@dataclass(frozen=True)
class RoundOutcome:
    round_index: int
    volunteers: tuple[str, ...]
    selected: tuple[str, ...]
    received: tuple[LocalUpdate, ...]
    status: str
    rmse_kmh: float


def quorum_size(n_selected: int, fraction: float) -> int:
    """ceil(fraction * selected), but never below one update."""
    return max(1, math.ceil(fraction * n_selected))


def select_workers(volunteers, k: int, seed: int) -> tuple[str, ...]:
    """All volunteers when there are at most k, else a uniform k-subset."""
    if k < 1:
        raise ValueError("k must be >= 1")
    pool = sorted(volunteers)
    if len(pool) <= k:
        return tuple(pool)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(pool), size=k, replace=False)
    return tuple(sorted(pool[i] for i in chosen))


def federated_average(updates, weighted: bool = True,
                      reference: ModelLayout | None = None) -> ModelParams:
    """Coordinate-wise (sample-count weighted) mean of the updates.

    Updates are folded in sender-id order around the first sender's payload
    as the anchor, which makes the result independent of arrival order and
    bit-exact when every payload is identical.  ``reference`` is the layout
    updates must match (the chief passes its global model's); it defaults to
    the first sender's layout.
    """
    updates = sorted(updates, key=lambda u: u.sender)
    if not updates:
        raise ValueError("cannot average an empty update list")
    ref = updates[0].params
    ref_layout = reference if reference is not None else ref.layout
    if ref.layout != ref_layout:
        raise ProtocolError(updates[0].sender, "parameter layout mismatch")
    for u in updates:
        if u.params.layout != ref_layout:
            raise ProtocolError(u.sender, "parameter layout mismatch")
        if not np.isfinite(u.params.values).all():
            raise ProtocolError(u.sender, "non-finite parameter payload")
        if u.sample_count < 1:
            raise ProtocolError(u.sender, "non-positive sample count")
    if weighted:
        total = float(sum(u.sample_count for u in updates))
        weights = [u.sample_count / total for u in updates]
    else:
        weights = [1.0 / len(updates)] * len(updates)
    anchor = ref.values
    acc = np.zeros_like(anchor)
    for u, w in zip(updates, weights):
        acc += w * (u.params.values - anchor)
    return ModelParams(ref.layout, anchor + acc, version=updates[0].round_index + 1)


class Chief:
    """Sequential round coordinator hosted at the roadside unit.

    The environment object must provide:

    - ``time()``: current simulation second.
    - ``advance(seconds)``: move the simulation forward.
    - ``honest_volunteers(min_samples)``: list of ``(sender_id, samples)``
      for honest vehicles currently in coverage holding enough data.
    - ``adversary``: ``None`` or an agent with ``volunteer_identities(round,
      model)``, ``build_payloads(round, model, selected_ids, claimed_count)``
      and ``note_round(round, selected_ids)``.
    - ``connected_through(sender_id, t0, t1)``: whether the sender's vehicle
      stayed inside RSU coverage over the whole window.
    """

    def __init__(self, model: ModelParams, hyper: Hyperparameters,
                 cfg: ProtocolConfig, eval_set, speed_scale_kmh: float,
                 master_seed: int):
        self.model = model
        self.hyper = hyper
        self.cfg = cfg
        self.eval_set = tuple(eval_set)
        self.speed_scale_kmh = speed_scale_kmh
        self.master_seed = master_seed
        self.round_index = 0
        self.outcomes: list[RoundOutcome] = []
        self.quarantined: list[str] = []
        self._open = False

    # ------------------------------------------------------------------

    def announce_task(self, env) -> tuple[FlTask, dict]:
        """Broadcast the task; vehicles in coverage may volunteer.

        Returns the task and a map sender -> ("honest", samples) or
        ("adversary", None).
        """
        if self._open:
            raise RuntimeError("a round is already open")
        self._open = True
        now = env.time()
        task = FlTask(
            round_index=self.round_index, hyper=self.hyper, announce_time=now,
            deadline_time=now + self.cfg.deadline_s, model=self.model)
        volunteers: dict[str, tuple] = {}
        for sender, samples in env.honest_volunteers(self.cfg.min_samples):
            volunteers[sender] = ("honest", samples)
        agent = getattr(env, "adversary", None)
        if agent is not None:
            for identity in agent.volunteer_identities(self.round_index, self.model):
                volunteers[identity] = ("adversary", None)
        return task, volunteers

    def run_round(self, env) -> RoundOutcome:
        """Execute one full round against the environment."""
        task, volunteers = self.announce_task(env)
        t0 = task.announce_time
        selected = select_workers(
            volunteers, self.cfg.workers_k,
            derive_seed(self.master_seed, "select", self.round_index))

        honest_counts = sorted(
            len(samples) for kind, samples in volunteers.values() if kind == "honest")
        claimed = int(np.median(honest_counts)) if honest_counts else 1

        updates: list[LocalUpdate] = []
        adversarial_selected = []
        for sender in selected:
            kind, samples = volunteers[sender]
            if kind != "honest":
                adversarial_selected.append(sender)
                continue
            try:
                updates.append(local_train(
                    self.model, samples, self.hyper, sender=sender,
                    round_index=self.round_index,
                    seed=derive_seed(self.master_seed, "train", self.round_index, sender)))
            except DivergenceError as exc:
                log.warning("worker %s dropped out of round %d: %s",
                            sender, self.round_index, exc)
        agent = getattr(env, "adversary", None)
        if agent is not None:
            if adversarial_selected:
                updates.extend(agent.build_payloads(
                    self.round_index, self.model, adversarial_selected, max(1, claimed)))
            agent.note_round(self.round_index, adversarial_selected)

        env.advance(self.cfg.deadline_s)

        by_sender: dict[str, LocalUpdate] = {}
        for u in updates:
            if env.connected_through(u.sender, t0, task.deadline_time):
                by_sender.setdefault(u.sender, u)
        received = []
        for sender in sorted(by_sender):
            u = by_sender[sender]
            try:
                self._validate(u)
            except ProtocolError as exc:
                self.quarantined.append(sender)
                log.warning("round %d: %s", self.round_index, exc)
                continue
            received.append(u)

        quorum = quorum_size(len(selected), self.cfg.quorum_fraction)
        if len(received) >= quorum:
            self.model = federated_average(received, weighted=self.cfg.weighted_average,
                                           reference=self.model.layout)
            status = STATUS_COMPLETED
        else:
            status = STATUS_ABANDONED  # global model left untouched
        rmse_kmh = evaluate_rmse(self.model, self.eval_set, self.speed_scale_kmh)

        outcome = RoundOutcome(
            round_index=self.round_index, volunteers=tuple(sorted(volunteers)),
            selected=selected, received=tuple(received), status=status,
            rmse_kmh=rmse_kmh)
        self.outcomes.append(outcome)
        if agent is not None:
            agent.observe_outcome(outcome)
        self.round_index += 1
        self._open = False
        return outcome

    def _validate(self, update: LocalUpdate) -> None:
        if update.params.layout != self.model.layout:
            raise ProtocolError(update.sender, "parameter layout mismatch")
        if not np.isfinite(update.params.values).all():
            raise ProtocolError(update.sender, "non-finite parameter payload")
        if update.round_index != self.round_index:
            raise ProtocolError(
                update.sender,
                f"stale round index {update.round_index} (open round {self.round_index})")


def centralized_train(samples, hyper: Hyperparameters, epochs: int, eval_set,
                      speed_scale_kmh: float, seed: int,
                      init_model: ModelParams) -> list[float]:
    """Train one model on the pooled dataset; per-epoch held-out RMSE trace.

    Uses the same epoch engine as worker-side training, so with identical
    data, seed, and epoch count the trace matches a lone worker bit for bit.
    """
    if not samples:
        raise ValueError("pooled dataset must be nonempty")
    trace: list[float] = []

    def record(_epoch, params):
        trace.append(evaluate_rmse(params, eval_set, speed_scale_kmh))

    rng = np.random.default_rng(seed)
    run_sgd_epochs(
        init_model, samples, epochs=epochs, batch_size=hyper.batch_size,
        lr=hyper.lr, momentum=hyper.momentum, rng=rng, after_epoch=record)
    return trace
