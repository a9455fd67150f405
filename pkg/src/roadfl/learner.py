"""Recurrent link-speed predictor: stacked LSTM plus a linear head.

Parameters live in one flat float64 array so that model exchange, averaging,
and poisoning all operate on a single vector.  The forward pass and the
backward pass (backpropagation through time) are written directly in numpy;
training is plain SGD with momentum over seeded-shuffled mini batches.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass

import numpy as np

# Gate order inside each 4H block: input, forget, candidate, output.
_GATES = 4


class DivergenceError(RuntimeError):
    """A parameter update produced a non-finite value."""


@dataclass(frozen=True)
class ModelLayout:
    """Shapes of the stacked LSTM layers and the linear output head.

    Flat packing order, per LSTM layer l (input size n_in, hidden size H):
    W_x (4H x n_in, row major), W_h (4H x H), bias (4H); after the last layer
    come the head weights (H) and the head bias (1).
    """

    input_size: int
    hidden: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_size < 1:
            raise ValueError("input size must be >= 1")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError("every hidden layer size must be >= 1")

    @property
    def n_layers(self) -> int:
        return len(self.hidden)

    def layer_input_size(self, layer: int) -> int:
        return self.input_size if layer == 0 else self.hidden[layer - 1]

    @property
    def n_params(self) -> int:
        total = 0
        for l, h in enumerate(self.hidden):
            n_in = self.layer_input_size(l)
            total += _GATES * h * (n_in + h + 1)
        return total + self.hidden[-1] + 1


class _Views:
    """Read/write numpy views of one flat parameter (or gradient) array."""

    __slots__ = ("Wx", "Wh", "b", "head_w", "head_b")

    def __init__(self, layout: ModelLayout, values: np.ndarray):
        self.Wx, self.Wh, self.b = [], [], []
        off = 0
        for l, h in enumerate(layout.hidden):
            n_in = layout.layer_input_size(l)
            self.Wx.append(values[off:off + _GATES * h * n_in].reshape(_GATES * h, n_in))
            off += _GATES * h * n_in
            self.Wh.append(values[off:off + _GATES * h * h].reshape(_GATES * h, h))
            off += _GATES * h * h
            self.b.append(values[off:off + _GATES * h])
            off += _GATES * h
        h_last = layout.hidden[-1]
        self.head_w = values[off:off + h_last]
        off += h_last
        self.head_b = values[off:off + 1]


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Flat parameter vector plus its layout and global-model lineage."""

    layout: ModelLayout
    values: np.ndarray
    version: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.layout.n_params,):
            raise ValueError(
                f"parameter vector has length {values.shape}, layout "
                f"expects ({self.layout.n_params},)")
        if not np.isfinite(values).all():
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise DivergenceError(f"non-finite parameter at index {bad}")
        object.__setattr__(self, "values", values)

    def copy(self, version: int | None = None) -> "ModelParams":
        return ModelParams(self.layout, self.values.copy(),
                           self.version if version is None else version)


@dataclass(frozen=True, eq=False)
class Gradient:
    """Flat gradient congruent with a ModelParams layout."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(values).all():
            raise DivergenceError("non-finite gradient")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class TrainingSample:
    """One windowed observation sequence and its next-step speed target.

    Features are (window, 3) arrays of normalized (speed, density, in-speed);
    the target is the normalized mean speed one second past the window.
    """

    features: np.ndarray
    target: float

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError(f"features must be (window, n_features), got {feats.shape}")
        if not (np.isfinite(feats).all() and math.isfinite(self.target)):
            raise ValueError("sample contains non-finite values")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "target", float(self.target))


@dataclass(frozen=True)
class Normalizer:
    """Fixed, scenario-declared feature scales."""

    speed_scale_kmh: float
    density_scale: float

    def observation_row(self, obs) -> tuple[float, float, float]:
        return (obs.mean_speed_kmh / self.speed_scale_kmh,
                obs.density / self.density_scale,
                obs.in_speed_kmh / self.speed_scale_kmh)

    def normalize_speed(self, kmh: float) -> float:
        return kmh / self.speed_scale_kmh

    def denormalize_speed(self, x):
        return x * self.speed_scale_kmh


@dataclass(frozen=True)
class LocalUpdate:
    """Envelope for one participant's model upload."""

    sender: str
    round_index: int
    params: ModelParams
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


@dataclass(frozen=True)
class Hyperparameters:
    """Training hyperparameters broadcast with each task."""

    lr: float = 0.05
    batch_size: int = 8
    epochs: int = 3
    momentum: float = 0.9
    lr_drop: float = 0.5
    lr_drop_period: int = 50  # rounds between learning-rate drops

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not 0.0 < self.lr_drop <= 1.0:
            raise ValueError("lr_drop must be in (0, 1]")
        if self.lr_drop_period < 1:
            raise ValueError("lr_drop_period must be >= 1")

    def effective_lr(self, round_index: int) -> float:
        return self.lr * self.lr_drop ** (round_index // self.lr_drop_period)


# ----------------------------------------------------------------------
# initialization

def init_params(layout: ModelLayout, seed: int) -> ModelParams:
    """Seeded init: weights uniform in +-1/sqrt(fan_in), biases zero except
    forget-gate biases, which start at 1.0."""
    rng = np.random.default_rng(seed)
    values = np.zeros(layout.n_params)
    views = _Views(layout, values)
    for l, h in enumerate(layout.hidden):
        n_in = layout.layer_input_size(l)
        views.Wx[l][:] = rng.uniform(-1, 1, views.Wx[l].shape) / math.sqrt(n_in)
        views.Wh[l][:] = rng.uniform(-1, 1, views.Wh[l].shape) / math.sqrt(h)
        views.b[l][h:2 * h] = 1.0
    h_last = layout.hidden[-1]
    views.head_w[:] = rng.uniform(-1, 1, h_last) / math.sqrt(h_last)
    return ModelParams(layout, values, version=0)


def forget_gate_bias_slices(layout: ModelLayout) -> list[slice]:
    """Flat-array slices holding each layer's forget-gate biases."""
    slices = []
    off = 0
    for l, h in enumerate(layout.hidden):
        n_in = layout.layer_input_size(l)
        off += _GATES * h * (n_in + h)
        slices.append(slice(off + h, off + 2 * h))
        off += _GATES * h
    return slices


# ----------------------------------------------------------------------
# forward / backward

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _forward(layout: ModelLayout, values: np.ndarray, X: np.ndarray,
             keep_cache: bool):
    """Run the stacked LSTM over X of shape (batch, time, features).

    Returns (predictions, caches); caches is None unless requested.  Hidden
    and cell states start at zero; the head reads the top layer's final
    hidden state.
    """
    B, T, F = X.shape
    if F != layout.input_size:
        raise ValueError(
            f"feature size {F} does not match layout input size {layout.input_size}")
    views = _Views(layout, values)
    caches = [[None] * T for _ in range(layout.n_layers)] if keep_cache else None
    layer_in = X
    for l, H in enumerate(layout.hidden):
        Wx, Wh, b = views.Wx[l], views.Wh[l], views.b[l]
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        outputs = np.empty((B, T, H))
        for t in range(T):
            x_t = layer_in[:, t, :]
            z = x_t @ Wx.T + h @ Wh.T + b
            i = _sigmoid(z[:, :H])
            f = _sigmoid(z[:, H:2 * H])
            g = np.tanh(z[:, 2 * H:3 * H])
            o = _sigmoid(z[:, 3 * H:])
            c_new = f * c + i * g
            tanh_c = np.tanh(c_new)
            h_new = o * tanh_c
            if keep_cache:
                caches[l][t] = (x_t, h, c, i, f, g, o, tanh_c)
            h, c = h_new, c_new
            outputs[:, t, :] = h
        layer_in = outputs
    preds = layer_in[:, T - 1, :] @ views.head_w + views.head_b[0]
    return preds, caches


def _loss_grad(layout: ModelLayout, values: np.ndarray, X: np.ndarray,
               y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean-squared-error loss and its exact gradient via BPTT."""
    B, T, _ = X.shape
    preds, caches = _forward(layout, values, X, keep_cache=True)
    err = preds - y
    loss = float(np.mean(err * err))
    dpred = 2.0 * err / B

    views = _Views(layout, values)
    grad = np.zeros_like(values)
    gviews = _Views(layout, grad)

    top = layout.n_layers - 1
    # caches store the pre-step hidden state; the final one is o * tanh(c)
    _, _, _, _, _, _, o_last, tanh_c_last = caches[top][T - 1]
    h_last = o_last * tanh_c_last
    gviews.head_w[:] += h_last.T @ dpred
    gviews.head_b[0] += dpred.sum()

    dh_above = [np.zeros((B, layout.hidden[top])) for _ in range(T)]
    dh_above[T - 1] = np.outer(dpred, views.head_w)

    for l in range(layout.n_layers - 1, -1, -1):
        H = layout.hidden[l]
        Wx, Wh = views.Wx[l], views.Wh[l]
        dX_seq = [None] * T
        dh_carry = np.zeros((B, H))
        dc = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            x_t, h_prev, c_prev, i, f, g, o, tanh_c = caches[l][t]
            dh = dh_above[t] + dh_carry
            do = dh * tanh_c
            dc = dc + dh * o * (1.0 - tanh_c * tanh_c)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dc = dc * f
            dz = np.concatenate([
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ], axis=1)
            gviews.Wx[l] += dz.T @ x_t
            gviews.Wh[l] += dz.T @ h_prev
            gviews.b[l] += dz.sum(axis=0)
            dX_seq[t] = dz @ Wx
            dh_carry = dz @ Wh
        dh_above = dX_seq
    return loss, grad


def forward(params: ModelParams, features: np.ndarray) -> float:
    """Prediction for a single (window, features) sequence."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"features must be 2-D (window, n_features), got {feats.shape}")
    preds, _ = _forward(params.layout, params.values, feats[None, :, :], keep_cache=False)
    return float(preds[0])


def predict(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Batched predictions for X of shape (batch, window, features)."""
    preds, _ = _forward(params.layout, params.values, np.asarray(X, dtype=np.float64),
                        keep_cache=False)
    return preds


def grad(params: ModelParams, batch) -> tuple[float, Gradient]:
    """MSE loss over the batch and its exact BPTT gradient."""
    if not batch:
        raise ValueError("gradient of an empty batch is undefined")
    X = np.stack([s.features for s in batch])
    y = np.array([s.target for s in batch])
    loss, g = _loss_grad(params.layout, params.values, X, y)
    return loss, Gradient(g)


# ----------------------------------------------------------------------
# optimization

def sgd_step(params: ModelParams, g: Gradient, lr: float, momentum: float,
             velocity: np.ndarray) -> tuple[ModelParams, np.ndarray]:
    """One momentum-SGD update: v <- momentum*v - lr*g; p <- p + v."""
    if lr <= 0:
        raise ValueError("lr must be > 0")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must be in [0, 1)")
    with np.errstate(over="ignore", invalid="ignore"):
        new_velocity = momentum * velocity - lr * g.values
        new_values = params.values + new_velocity
    finite = np.isfinite(new_values)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise DivergenceError(f"divergence: non-finite parameter at index {bad}")
    return ModelParams(params.layout, new_values, params.version), new_velocity


def run_sgd_epochs(params: ModelParams, data, *, epochs: int, batch_size: int,
                   lr: float, momentum: float, rng: np.random.Generator,
                   after_epoch=None) -> ModelParams:
    """Shared epoch loop: seeded shuffles, ceil(n/batch) steps per epoch."""
    if not data:
        raise ValueError("training data must be nonempty")
    X_all = np.stack([s.features for s in data])
    y_all = np.array([s.target for s in data])
    n = len(data)
    velocity = np.zeros(params.layout.n_params)
    current = params
    for epoch in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            _, g = _loss_grad(current.layout, current.values, X_all[idx], y_all[idx])
            current, velocity = sgd_step(current, Gradient(g), lr, momentum, velocity)
        if after_epoch is not None:
            after_epoch(epoch, current)
    return current


def local_train(params: ModelParams, data, hp: Hyperparameters, *, sender: str,
                round_index: int = 0, seed: int = 0) -> LocalUpdate:
    """Train a private copy of the global model on local data.

    Runs ``epochs x ceil(n/batch_size)`` momentum-SGD steps over seeded,
    per-epoch shuffles and wraps the result in a LocalUpdate.  The learning
    rate decays by ``lr_drop`` every ``lr_drop_period`` rounds.
    """
    rng = np.random.default_rng(seed)
    trained = run_sgd_epochs(
        params, data, epochs=hp.epochs, batch_size=hp.batch_size,
        lr=hp.effective_lr(round_index), momentum=hp.momentum, rng=rng)
    return LocalUpdate(
        sender=sender, round_index=round_index,
        params=ModelParams(trained.layout, trained.values, version=round_index),
        sample_count=len(data))


# ----------------------------------------------------------------------
# evaluation

def rmse(preds, targets) -> float:
    """Root mean square error, in the same (km/h) units as the inputs."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1 or p.size == 0:
        raise ValueError(
            f"predictions and targets must be equal nonzero-length vectors, "
            f"got {p.shape} and {t.shape}")
    d = p - t
    return float(np.sqrt(np.mean(d * d)))


def evaluate_rmse(params: ModelParams, samples, speed_scale_kmh: float) -> float:
    """Held-out RMSE in km/h (predictions denormalized before scoring)."""
    if not samples:
        raise ValueError("evaluation set must be nonempty")
    X = np.stack([s.features for s in samples])
    y = np.array([s.target for s in samples])
    preds = predict(params, X)
    return rmse(preds * speed_scale_kmh, y * speed_scale_kmh)


# ----------------------------------------------------------------------
# checkpoint io

_CHECKPOINT_FORMAT = "roadfl-model/1"


def save_model(params: ModelParams, path) -> None:
    """Write a bit-exact checkpoint (JSON header + base64 float64 payload)."""
    doc = {
        "format": _CHECKPOINT_FORMAT,
        "input_size": params.layout.input_size,
        "hidden": list(params.layout.hidden),
        "version": params.version,
        "dtype": "<f8",
        "values_b64": base64.b64encode(
            np.ascontiguousarray(params.values, dtype="<f8").tobytes()).decode("ascii"),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_model(path) -> ModelParams:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != _CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    layout = ModelLayout(doc["input_size"], tuple(doc["hidden"]))
    values = np.frombuffer(base64.b64decode(doc["values_b64"]), dtype="<f8").copy()
    return ModelParams(layout, values, version=int(doc["version"]))
