"""Imitation training: MSE loss, ADAM, seeded minibatching."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, TrainingError
from .graph_signal import Gso
from .models import Model, ModelSpec, Standardizer, backward, forward, init_params


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 100
    batch_size: int = 128
    split_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("betas must lie in [0, 1)")
        if not 0 < self.split_fraction < 1:
            raise ContractError("split_fraction must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


@dataclass
class TrainHistory:
    initial_train_loss: float = float("nan")
    train_loss: list = field(default_factory=list)
    test_metric: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "test_metric", "seconds"])
            writer.writerow([0, repr(self.initial_train_loss), "", ""])
            for epoch, row in enumerate(zip(self.train_loss, self.test_metric, self.seconds), start=1):
                writer.writerow([epoch] + [repr(float(v)) for v in row])

    def numeric_equal(self, other: "TrainHistory") -> bool:
        """Equality of all fields except wall-clock time."""
        return (self.initial_train_loss == other.initial_train_loss and self.train_loss == other.train_loss
                and self.test_metric == other.test_metric)


def mse_loss(p_hat, p_star):
    """Mean squared error over all entries and its gradient ``2 (p_hat - p*) / size``."""
    p_hat = np.asarray(p_hat, dtype=float)
    p_star = np.asarray(p_star, dtype=float)
    if p_hat.shape != p_star.shape:
        raise ContractError(f"shape mismatch {p_hat.shape} vs {p_star.shape}")
    diff = p_hat - p_star
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def split_dataset(n: int, split_fraction: float, seed: int):
    """Disjoint train/test index arrays of sizes ``floor(f n)`` and the rest."""
    if n < 1:
        raise ContractError("dataset is empty")
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(np.floor(split_fraction * n))
    return perm[:cut], perm[cut:]


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig, batch_index=None):
    """Bias-corrected ADAM update, applied in place. Returns ``(params, state)``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k!r} at batch {batch_index}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[k] -= config.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + config.epsilon)
    return params, state


def batch_gradients(spec: ModelSpec, params: dict, X, Y, gso: Gso | None):
    """Loss and parameter gradients for one standardized minibatch."""
    out, trace = forward(spec, params, X, gso, return_trace=True)
    loss, d_out = mse_loss(out, Y)
    return loss, backward(spec, params, trace, d_out)


def _sqrt_relative_error(pred, target):
    num = np.linalg.norm(target - pred, axis=1)
    den = np.linalg.norm(target, axis=1)
    ok = den > 0
    return float(np.mean(np.sqrt(num[ok] / den[ok])))


def _full_loss(spec, params, X, Y, gso, chunk=512):
    total = 0.0
    for s in range(0, len(X), chunk):
        out = forward(spec, params, X[s:s + chunk], gso)
        total += float(np.sum((out - Y[s:s + chunk]) ** 2))
    return total / Y.size


def _predict(spec, params, X, gso, chunk=512):
    return np.concatenate([forward(spec, params, X[s:s + chunk], gso) for s in range(0, len(X), chunk)])


def train(X, P, spec: ModelSpec, config: TrainConfig, gso: Gso | None = None,
          test_indices=None, train_indices=None, standardizer: Standardizer | None = None):
    """Fit ``spec`` to states ``X`` (n, N, 4) and targets ``P`` (n, M).

    Unless indices are given, the data is split ``split_fraction``/rest with
    the config seed. Inputs and targets are standardized with training-set
    statistics. Each epoch visits the training set in a fresh seeded order in
    minibatches of ``batch_size`` (the last one may be partial).

    Returns ``(model, history)``.
    """
    X = np.asarray(X, dtype=float)
    P = np.asarray(P, dtype=float)
    if X.ndim != 3 or X.shape[1:] != (spec.n_buses, 4) or P.shape != (len(X), spec.n_generators):
        raise ContractError("dataset shapes do not match the model spec")
    if train_indices is None:
        train_indices, split_test = split_dataset(len(X), config.split_fraction, config.seed)
        if test_indices is None:
            test_indices = split_test
    train_indices = np.asarray(train_indices, dtype=np.intp)

    std = standardizer or Standardizer.fit(X[train_indices], P[train_indices])
    Xs, Ys = std.inputs(X), std.targets(P)
    Xtr, Ytr = Xs[train_indices], Ys[train_indices]
    have_test = test_indices is not None and len(test_indices) > 0
    if have_test:
        Xte, Pte = Xs[test_indices], P[test_indices]

    seeds = np.random.SeedSequence(config.seed).spawn(2)
    params = init_params(spec, int(seeds[0].generate_state(1)[0]))
    shuffle_rng = np.random.default_rng(seeds[1])
    state = AdamState.zeros_like(params)
    history = TrainHistory(initial_train_loss=_full_loss(spec, params, Xtr, Ytr, gso))
    if not np.isfinite(history.initial_train_loss):
        raise TrainingError("initial loss is not finite")

    batch_index = 0
    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = shuffle_rng.permutation(len(Xtr))
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            loss, grads = batch_gradients(spec, params, Xtr[idx], Ytr[idx], gso)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {batch_index}")
            adam_step(params, grads, state, config, batch_index)
            batch_index += 1
        history.train_loss.append(_full_loss(spec, params, Xtr, Ytr, gso))
        if have_test:
            pred = std.outputs(_predict(spec, params, Xte, gso))
            history.test_metric.append(_sqrt_relative_error(pred, Pte))
        else:
            history.test_metric.append(float("nan"))
        history.seconds.append(time.perf_counter() - start)
        if not np.isfinite(history.train_loss[-1]):
            raise TrainingError(f"non-finite training loss after epoch {epoch + 1}")
    return Model(spec, params, std, gso if spec.uses_graph else None), history
