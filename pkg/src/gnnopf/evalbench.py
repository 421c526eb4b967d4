"""Evaluation metrics, architecture comparison and inference timing."""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .electrical import build_admittance
from .graph_signal import Gso, build_gso
from .models import ARCHITECTURES, Model, ModelSpec
from .opf import solve_acopf, solve_dcopf
from .training import TrainConfig, split_dataset, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricResult:
    """``sqrt_form``: mean of sqrt(|p* - p_hat| / |p*|). ``standard``: mean of |p* - p_hat| / |p*|."""

    sqrt_form: float
    standard: float
    n_samples: int
    skipped: int = 0


def relative_rmse(predictions, targets) -> MetricResult:
    """Both relative-error forms averaged over samples; zero-norm targets are skipped."""
    pred = np.atleast_2d(np.asarray(predictions, dtype=float))
    target = np.atleast_2d(np.asarray(targets, dtype=float))
    if pred.shape != target.shape or len(target) == 0:
        raise ValueError("predictions and targets must be nonempty and of equal shape")
    num = np.linalg.norm(target - pred, axis=1)
    den = np.linalg.norm(target, axis=1)
    ok = den > 0
    skipped = int(np.count_nonzero(~ok))
    if skipped:
        warnings.warn(f"skipped {skipped} samples with zero-norm targets", RuntimeWarning, stacklevel=2)
    if not np.any(ok):
        raise ValueError("every target has zero norm")
    ratio = num[ok] / den[ok]
    return MetricResult(float(np.mean(np.sqrt(ratio))), float(np.mean(ratio)), int(np.count_nonzero(ok)), skipped)


def evaluate_model(model: Model, X, P) -> MetricResult:
    preds = np.concatenate([model.predict(X[s:s + 512]) for s in range(0, len(X), 512)])
    return relative_rmse(preds, P)


def compile_predictor(model: Model, dtype=np.float64):
    """Single-sample inference closure ``X (N, 4) -> p_hat (M,)`` for ``model``.

    Local two-layer architectures get a specialised path. Layer 2 is only
    evaluated at the generators, through the rows ``G W^k``, so layer 1 is
    only needed on the buses those rows touch. The shifted inputs for those
    buses come from one product with the stacked rows of ``W^k``, ordered so
    that the result reshapes directly into ``[X, WX, ...]`` feature blocks.
    Input standardization is folded into the layer-1 taps and a constant
    offset. ``dtype=np.float32`` trades about 1e-6 relative accuracy for
    speed. Other architectures fall back to :meth:`Model.predict`.
    """
    spec = model.spec
    if spec.is_global or spec.bias or len(spec.layer_features) != 3:
        return model.predict
    params, std = model.params, model.standardizer
    n, gens = spec.n_buses, list(spec.generator_buses)
    m = len(gens)
    w = model.gso.w if spec.uses_graph else np.zeros((n, n))
    taps1, taps2 = params["conv1"], params["conv2"]
    k1, f0, f1 = taps1.shape
    k2, _, f2 = taps2.shape

    powers = [np.eye(n)]
    for _ in range(max(k1, k2) - 1):
        powers.append(powers[-1] @ w)

    rows = np.stack([powers[k][gens] for k in range(k2)], axis=1).reshape(m * k2, n)
    support = np.flatnonzero(np.any(rows != 0, axis=0))
    rows = rows[:, support]
    stacked = np.stack([powers[k][support] for k in range(k1)], axis=1).reshape(len(support) * k1, n)

    h1 = (taps1 / std.x_std[None, :, None]).reshape(k1 * f0, f1)
    centre = std.x_mean / std.x_std
    offset = sum(np.outer(powers[k][support].sum(axis=1), centre @ taps1[k]) for k in range(k1))
    h2 = taps2.reshape(k2 * f1, f2)
    readout = params["readout"][:, 0] * std.y_std

    cast = [np.ascontiguousarray(a, dtype=dtype) for a in (stacked, h1, offset, rows, h2, readout)]
    stacked, h1, offset, rows, h2, readout = cast
    y_mean = std.y_mean
    n_support = len(support)
    act = (lambda z: np.maximum(z, 0.0, out=z)) if spec.activation == "relu" else (lambda z: np.tanh(z, out=z))

    def predict(X):
        S = (stacked @ np.asarray(X, dtype=dtype)).reshape(n_support, k1 * f0)
        A1 = S @ h1
        A1 -= offset
        act(A1)
        A2 = (rows @ A1).reshape(m, k2 * f1) @ h2
        act(A2)
        return A2 @ readout + y_mean

    return predict


@dataclass(frozen=True)
class TimingSummary:
    model_median: float
    model_iqr: float
    oracle_median: float
    oracle_iqr: float
    repetitions: int

    @property
    def speedup(self) -> float:
        return self.oracle_median / self.model_median

    def to_dict(self) -> dict:
        return {**asdict(self), "speedup": self.speedup}


def _iqr(values):
    q1, q3 = np.percentile(values, [25, 75])
    return float(q3 - q1)


def time_calls(fn, inputs, repetitions: int):
    """Wall-clock seconds of ``fn(x)``, one entry per call, ``repetitions`` passes over ``inputs``."""
    out = []
    for _ in range(repetitions):
        for x in inputs:
            start = time.perf_counter()
            fn(x)
            out.append(time.perf_counter() - start)
    return np.array(out)


def timing_bench(model_fn, oracle_fn, model_inputs, oracle_inputs, repetitions: int = 10,
                 oracle_repetitions: int | None = None) -> TimingSummary:
    """Median and IQR per-call time of the model and the oracle on paired inputs."""
    if repetitions < 10:
        raise ValueError("repetitions must be at least 10")
    for x in model_inputs[:3]:
        model_fn(x)
    model_times = time_calls(model_fn, model_inputs, repetitions)
    oracle_times = time_calls(oracle_fn, oracle_inputs, oracle_repetitions or 1)
    return TimingSummary(float(np.median(model_times)), _iqr(model_times),
                         float(np.median(oracle_times)), _iqr(oracle_times), repetitions)


def acopf_oracle(case):
    """``(p_load, q_load) -> p*`` through DCOPF warm start and ACOPF."""
    Y = build_admittance(case)

    def solve(loads):
        p_load, q_load = loads
        dc = solve_dcopf(case, p_load)
        return solve_acopf(case, p_load, q_load, dc, Y=Y).p_star

    return solve


@dataclass
class ArchitectureResult:
    architecture: str
    metric_sqrt: float
    metric_standard: float
    initial_train_loss: float | None
    final_train_loss: float | None
    n_params: int
    timing: dict | None = None


@dataclass
class EvalReport:
    case_id: str
    n_samples: int
    n_test: int
    seed: int
    rows: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, "n_samples": self.n_samples, "n_test": self.n_test, "seed": self.seed,
                "settings": self.settings, "rows": [asdict(r) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        return cls(d["case_id"], d["n_samples"], d["n_test"], d["seed"],
                   [ArchitectureResult(**r) for r in d["rows"]], d.get("settings", {}))

    @classmethod
    def from_json(cls, text) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def row(self, architecture) -> ArchitectureResult:
        return next(r for r in self.rows if r.architecture == architecture)

    def table(self) -> str:
        """Aligned text table: one row per architecture, both metric forms."""
        names = {"global_gnn": "Global GNN", "global_mlp": "Global MLP",
                 "local_gnn": "Local GNN", "local_mlp": "Local MLP"}
        head = f"{'Architecture':<14}{'mean sqrt ratio':>20}{'rel. error':>14}"
        lines = [f"{self.case_id}: {self.n_test} test samples", head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{names.get(r.architecture, r.architecture):<14}"
                         f"{r.metric_sqrt:>20.5f}{r.metric_standard:>14.5f}")
        return "\n".join(lines)


def run_comparison(dataset, config: TrainConfig, architectures=ARCHITECTURES, gso: Gso | None = None,
                   activation: str = "relu", models_out: dict | None = None) -> EvalReport:
    """Train every architecture on one shared split and evaluate both metric forms."""
    case = dataset.case
    gso = gso or build_gso(case)
    train_idx, test_idx = split_dataset(len(dataset), config.split_fraction, config.seed)
    report = EvalReport(case.name, len(dataset), len(test_idx), config.seed,
                        settings={"train": asdict(config), "gso": {"kernel_k": gso.kernel_k,
                                  "threshold_omega": gso.threshold_omega, "normalized": gso.normalized},
                                  "activation": activation})
    for arch in architectures:
        spec = ModelSpec(arch, case.n_buses, case.selection.generator_buses, activation=activation)
        try:
            model, history = train(dataset.x, dataset.p_star, spec, config, gso,
                                   train_indices=train_idx, test_indices=test_idx)
        except Exception as exc:
            raise RuntimeError(f"[{arch}] training failed: {exc}") from exc
        metric = evaluate_model(model, dataset.x[test_idx], dataset.p_star[test_idx])
        final = history.train_loss[-1] if len(history) else history.initial_train_loss
        report.rows.append(ArchitectureResult(arch, metric.sqrt_form, metric.standard, history.initial_train_loss,
                                              final, int(sum(p.size for p in model.params.values()))))
        log.info("%s: sqrt-form metric %.5f, standard %.5f", arch, metric.sqrt_form, metric.standard)
        if models_out is not None:
            models_out[arch] = (model, history)
    return report
