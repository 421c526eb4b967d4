"""Imitation dataset synthesis.

Each sample draws loads uniformly within +-10% of the case reference, fixes
generator setpoints with DCOPF, computes the resulting steady state ``X`` by
power flow, and labels it with the ACOPF dispatch ``p*``. Attempts whose
DCOPF, power flow or ACOPF fail are rejected. Attempt ``i`` always uses the
random stream seeded by ``(seed, i)``, so the accepted set does not depend on
how attempts are spread over worker processes.
"""

from __future__ import annotations

import csv
import logging
import multiprocessing
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import container
from .electrical import StateMatrix, build_admittance, injections, solve_power_flow
from .errors import DatasetError
from .graph_signal import default_kernel_k
from .grid_case import GridCase, parse_case
from .opf import AcopfOptions, check_feasibility, solve_acopf, solve_dcopf

log = logging.getLogger(__name__)

SCHEMA = "gnnopf.dataset/1"
STAGES = ("dcopf", "power_flow", "acopf")
DESK_SCALE = {"ieee30": 2000, "ieee118": 4000}
FULL_SCALE = {"ieee30": 8016, "ieee118": 13129}


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    p_star: np.ndarray
    p_load: np.ndarray
    q_load: np.ndarray
    meta: dict


@dataclass(frozen=True)
class Rejection:
    stage: str
    detail: str = ""


def sample_loads(case: GridCase, rng: np.random.Generator):
    """Loads drawn componentwise from ``Uniform(0.9 ref, 1.1 ref)``."""
    n = case.n_buses
    p = case.p_load_ref * rng.uniform(0.9, 1.1, size=n)
    q = case.q_load_ref * rng.uniform(0.9, 1.1, size=n)
    return p, q


def generate_sample(case: GridCase, rng: np.random.Generator, Y=None, acopf_options=None):
    """Run the load -> DCOPF -> power flow -> ACOPF pipeline once.

    Returns a :class:`Sample`, or a :class:`Rejection` naming the failing stage.
    """
    if Y is None:
        Y = build_admittance(case)
    p_load, q_load = sample_loads(case, rng)
    dc = solve_dcopf(case, p_load)
    if not dc.ok:
        return Rejection("dcopf", dc.status)
    gen_v = np.ones(case.n_generators)
    pf = solve_power_flow(case, p_load, q_load, dc.gen_p, gen_v, Y=Y)
    if not pf.converged:
        return Rejection("power_flow", f"mismatch {pf.max_mismatch:.3g} after {pf.iterations} iterations")
    ac = solve_acopf(case, p_load, q_load, dc, acopf_options, Y=Y)
    if not ac.ok:
        return Rejection("acopf", ac.status)

    # scheduled injections are exact; the slack row and generator q come from the solve
    gen = case.selection.array
    x = pf.state.matrix
    scheduled_p = -p_load.copy()
    scheduled_p[gen] += dc.gen_p
    fixed_p = np.ones(case.n_buses, dtype=bool)
    fixed_p[case.slack] = False
    x[fixed_p, 2] = scheduled_p[fixed_p]
    load_bus = np.ones(case.n_buses, dtype=bool)
    load_bus[gen] = False
    x[load_bus, 3] = -q_load[load_bus]

    meta = {"dc_cost": dc.cost, "ac_cost": ac.cost, "pf_iterations": pf.iterations,
            "acopf_iterations": ac.iterations, "gen_v_setpoints": gen_v, "q_gen": ac.q_gen,
            "acopf_v": ac.state.v, "acopf_delta": ac.state.delta}
    return Sample(x, ac.p_star, p_load, q_load, meta)


def attempt_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


@dataclass
class Dataset:
    """Accepted samples stored column-wise."""

    case_json: str
    case_name: str
    seed: int
    x: np.ndarray
    p_star: np.ndarray
    p_load: np.ndarray
    q_load: np.ndarray
    q_gen: np.ndarray
    gen_v_setpoints: np.ndarray
    acopf_v: np.ndarray
    acopf_delta: np.ndarray
    dc_cost: np.ndarray
    ac_cost: np.ndarray
    pf_iterations: np.ndarray
    acopf_iterations: np.ndarray
    config: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.p_star)

    @property
    def n_buses(self) -> int:
        return self.x.shape[1]

    @property
    def n_generators(self) -> int:
        return self.p_star.shape[1]

    @property
    def case(self) -> GridCase:
        return parse_case(self.case_json, name=self.case_name)

    def __getitem__(self, i) -> Sample:
        meta = {"dc_cost": float(self.dc_cost[i]), "ac_cost": float(self.ac_cost[i]),
                "pf_iterations": int(self.pf_iterations[i]), "acopf_iterations": int(self.acopf_iterations[i]),
                "gen_v_setpoints": self.gen_v_setpoints[i], "q_gen": self.q_gen[i],
                "acopf_v": self.acopf_v[i], "acopf_delta": self.acopf_delta[i]}
        return Sample(self.x[i], self.p_star[i], self.p_load[i], self.q_load[i], meta)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        arrays = {name: getattr(self, name)[idx] for name in _ARRAY_FIELDS}
        return Dataset(self.case_json, self.case_name, self.seed, config=dict(self.config),
                       stats=dict(self.stats), **arrays)

    @classmethod
    def from_samples(cls, case: GridCase, samples, seed: int, config=None, stats=None) -> "Dataset":
        def stack(get, shape):
            return np.array([get(s) for s in samples], dtype=float).reshape((len(samples),) + shape)
        n, m = case.n_buses, case.n_generators
        return cls(
            case.to_json(), case.name, int(seed),
            x=stack(lambda s: s.x, (n, 4)), p_star=stack(lambda s: s.p_star, (m,)),
            p_load=stack(lambda s: s.p_load, (n,)), q_load=stack(lambda s: s.q_load, (n,)),
            q_gen=stack(lambda s: s.meta["q_gen"], (m,)),
            gen_v_setpoints=stack(lambda s: s.meta["gen_v_setpoints"], (m,)),
            acopf_v=stack(lambda s: s.meta["acopf_v"], (n,)),
            acopf_delta=stack(lambda s: s.meta["acopf_delta"], (n,)),
            dc_cost=stack(lambda s: s.meta["dc_cost"], ()), ac_cost=stack(lambda s: s.meta["ac_cost"], ()),
            pf_iterations=stack(lambda s: s.meta["pf_iterations"], ()),
            acopf_iterations=stack(lambda s: s.meta["acopf_iterations"], ()),
            config=dict(config or {}), stats=dict(stats or {}),
        )


_ARRAY_FIELDS = ("x", "p_star", "p_load", "q_load", "q_gen", "gen_v_setpoints", "acopf_v", "acopf_delta",
                 "dc_cost", "ac_cost", "pf_iterations", "acopf_iterations")


def _record_layout(n, m):
    widths = {"x": 4 * n, "p_star": m, "p_load": n, "q_load": n, "q_gen": m, "gen_v_setpoints": m,
              "acopf_v": n, "acopf_delta": n,
              "dc_cost": 1, "ac_cost": 1, "pf_iterations": 1, "acopf_iterations": 1}
    layout, offset = [], 0
    for name in _ARRAY_FIELDS:
        layout.append([name, offset, widths[name]])
        offset += widths[name]
    return layout, offset


def save_dataset(dataset: Dataset, path) -> None:
    """Write the header plus one fixed-width float64 record per sample."""
    n, m, count = dataset.n_buses, dataset.n_generators, len(dataset)
    layout, width = _record_layout(n, m)
    records = np.empty((count, width))
    for name, offset, w in layout:
        records[:, offset:offset + w] = getattr(dataset, name).reshape(count, w)
    meta = {"case_id": dataset.case_name, "case": dataset.case_json, "n_buses": n, "n_generators": m,
            "n_samples": count, "seed": dataset.seed, "config": dataset.config, "stats": dataset.stats,
            "record_layout": layout}
    container.write(path, SCHEMA, meta, {"records": records})


def load_dataset(path) -> Dataset:
    meta, arrays = container.read(path, SCHEMA)
    n, m = meta["n_buses"], meta["n_generators"]
    layout, width = _record_layout(n, m)
    if meta["record_layout"] != layout:
        raise DatasetError("record layout does not match this version")
    records = arrays["records"]
    if records.shape != (meta["n_samples"], width):
        raise DatasetError("record table has the wrong shape")
    count = len(records)
    shapes = {"x": (n, 4), "p_star": (m,), "p_load": (n,), "q_load": (n,), "q_gen": (m,),
              "gen_v_setpoints": (m,), "acopf_v": (n,), "acopf_delta": (n,)}
    fields = {name: records[:, off:off + w].reshape((count,) + shapes.get(name, ()))
              for name, off, w in layout}
    return Dataset(meta["case"], meta["case_id"], meta["seed"], config=meta["config"], stats=meta["stats"],
                   **{k: np.ascontiguousarray(v) for k, v in fields.items()})


def acopf_state(dataset: Dataset, i: int, Y=None) -> StateMatrix:
    """Full ACOPF state of sample ``i``, rebuilt from its stored voltages."""
    Y = Y if Y is not None else build_admittance(dataset.case)
    v, delta = dataset.acopf_v[i], dataset.acopf_delta[i]
    p, q = injections(v, delta, Y)
    return StateMatrix(v, delta, p, q)


def invariant_violations(dataset: Dataset) -> dict:
    """Per-sample worst violation of each datagen invariant (arrays of length n).

    ``pf_residual``: power-flow mismatch of ``x``. ``acopf_feasibility``: worst
    entry of the feasibility report of the ACOPF state. ``p_star_bounds``:
    distance of ``p*`` outside the generator box. ``injection``: deviation of
    ``x.p`` from ``-p_load`` at load buses.
    ``load_bounds``: distance of the loads outside ``[0.9, 1.1] * ref``.
    """
    case = dataset.case
    Y = build_admittance(case)
    gen = case.selection.array
    p_min, p_max = case.gen_array("p_min"), case.gen_array("p_max")
    ref_p, ref_q = case.p_load_ref, case.q_load_ref
    load_bus = np.ones(case.n_buses, dtype=bool)
    load_bus[gen] = False
    out = {k: np.zeros(len(dataset)) for k in
           ("pf_residual", "acopf_feasibility", "p_star_bounds", "injection", "load_bounds")}
    for i in range(len(dataset)):
        x = dataset.x[i]
        p, q = injections(x[:, 0], x[:, 1], Y)
        out["pf_residual"][i] = max(np.max(np.abs(p - x[:, 2])), np.max(np.abs(q - x[:, 3])))
        report = check_feasibility(case, acopf_state(dataset, i, Y), tol=0.0,
                                   p_load=dataset.p_load[i], q_load=dataset.q_load[i], Y=Y)
        out["acopf_feasibility"][i] = report.worst_violation
        ps = dataset.p_star[i]
        out["p_star_bounds"][i] = max(np.max(p_min - ps), np.max(ps - p_max), 0.0)
        out["injection"][i] = np.max(np.abs(x[load_bus, 2] + dataset.p_load[i][load_bus]), initial=0.0)
        lo_p, hi_p = np.minimum(0.9 * ref_p, 1.1 * ref_p), np.maximum(0.9 * ref_p, 1.1 * ref_p)
        lo_q, hi_q = np.minimum(0.9 * ref_q, 1.1 * ref_q), np.maximum(0.9 * ref_q, 1.1 * ref_q)
        out["load_bounds"][i] = max(np.max(lo_p - dataset.p_load[i]), np.max(dataset.p_load[i] - hi_p),
                                    np.max(lo_q - dataset.q_load[i]), np.max(dataset.q_load[i] - hi_q), 0.0)
    return out


def export_csv(dataset: Dataset, path) -> None:
    """Flat CSV view: one row per sample."""
    n, m = dataset.n_buses, dataset.n_generators
    header = ([f"{f}_{i}" for i in range(n) for f in ("v", "delta", "p", "q")]
              + [f"p_star_{j}" for j in range(m)] + [f"p_load_{i}" for i in range(n)]
              + [f"q_load_{i}" for i in range(n)] + ["dc_cost", "ac_cost"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(len(dataset)):
            row = np.concatenate([dataset.x[k].ravel(), dataset.p_star[k], dataset.p_load[k],
                                  dataset.q_load[k], [dataset.dc_cost[k], dataset.ac_cost[k]]])
            writer.writerow([repr(float(v)) for v in row])


_WORKER = {}


def _init_worker(case_json, case_name, seed, acopf_options):
    case = parse_case(case_json, name=case_name)
    _WORKER.update(case=case, Y=build_admittance(case), seed=seed, opts=acopf_options)


def _attempt(index):
    w = _WORKER
    return index, generate_sample(w["case"], attempt_rng(w["seed"], index), w["Y"], w["opts"])


def generate_dataset(case: GridCase, n_samples: int, seed: int, workers: int = 1,
                     acopf_options: AcopfOptions | None = None, block: int | None = None) -> Dataset:
    """Draw attempts ``0, 1, 2, ...`` until ``n_samples`` are accepted.

    Raises :class:`DatasetError` if ``10 * n_samples`` attempts do not suffice
    (acceptance rate below 10%).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    acopf_options = acopf_options or AcopfOptions()
    max_attempts = 10 * n_samples
    block = block or max(64, 16 * workers)
    accepted = []
    rejected = Counter()
    attempts = 0

    init_args = (case.to_json(), case.name, seed, acopf_options)
    pool = None
    if workers > 1:
        pool = multiprocessing.get_context("fork").Pool(workers, _init_worker, init_args)
    else:
        _init_worker(*init_args)
    try:
        while len(accepted) < n_samples and attempts < max_attempts:
            need = n_samples - len(accepted)
            indices = range(attempts, min(attempts + max(need, block), max_attempts))
            results = pool.imap(_attempt, indices, chunksize=4) if pool else map(_attempt, indices)
            for index, result in results:
                attempts = index + 1
                if isinstance(result, Rejection):
                    rejected[result.stage] += 1
                else:
                    accepted.append(result)
                if len(accepted) == n_samples:
                    break
    finally:
        if pool is not None:
            pool.terminate()
            pool.join()

    stats = {"attempts": attempts, "accepted": len(accepted),
             "rejected": {stage: rejected.get(stage, 0) for stage in STAGES},
             "acceptance_rate": len(accepted) / max(attempts, 1)}
    log.info("generated %d/%d samples in %d attempts; rejections %s",
             len(accepted), n_samples, attempts, stats["rejected"])
    if len(accepted) < n_samples:
        raise DatasetError(f"acceptance rate {stats['acceptance_rate']:.1%} too low after {attempts} attempts; "
                           f"rejections by stage: {stats['rejected']}")
    config = {"kernel_k": default_kernel_k(case), "threshold_omega": 0.01,
              "pf_tol": 1e-8, "acopf": {"feas_tol": acopf_options.feas_tol, "opt_tol": acopf_options.opt_tol,
                                        "mu_min": acopf_options.mu_min, "max_iter": acopf_options.max_iter}}
    return Dataset.from_samples(case, accepted, seed, config=config, stats=stats)
