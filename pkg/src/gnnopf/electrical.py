"""Bus admittance matrix, power injections and Newton-Raphson power flow."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .grid_case import GridCase


@dataclass(frozen=True)
class AdmittanceMatrix:
    g_bus: np.ndarray
    b_bus: np.ndarray

    @property
    def complex(self) -> np.ndarray:
        return self.g_bus + 1j * self.b_bus

    @property
    def n(self) -> int:
        return self.g_bus.shape[0]


@dataclass(frozen=True)
class StateMatrix:
    """Per-bus grid state; ``matrix`` is the N x 4 signal ``[v, delta, p, q]``."""

    v: np.ndarray
    delta: np.ndarray
    p: np.ndarray
    q: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return np.column_stack([self.v, self.delta, self.p, self.q])

    @classmethod
    def from_matrix(cls, X) -> "StateMatrix":
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != 4:
            raise ContractError(f"state matrix must be N x 4, got {X.shape}")
        return cls(X[:, 0].copy(), X[:, 1].copy(), X[:, 2].copy(), X[:, 3].copy())

    @property
    def n(self) -> int:
        return len(self.v)


@dataclass(frozen=True)
class PowerFlowResult:
    state: StateMatrix
    converged: bool
    iterations: int
    max_mismatch: float
    mismatch_history: tuple = field(default=(), repr=False)


def build_admittance(case: GridCase) -> AdmittanceMatrix:
    """Pi-model bus admittance matrix; series impedance only, no tap ratios."""
    n = case.n_buses
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        z = complex(br.r, br.x)
        if z == 0:
            raise ContractError(f"zero-impedance branch {br.from_bus}-{br.to_bus}")
        y = 1.0 / z
        i, j = br.from_bus, br.to_bus
        Y[i, j] -= y
        Y[j, i] -= y
        Y[i, i] += y + 0.5j * br.b_shunt
        Y[j, j] += y + 0.5j * br.b_shunt
    Y[np.diag_indices(n)] += case.bus_array("g_shunt") + 1j * case.bus_array("b_shunt")
    return AdmittanceMatrix(Y.real.copy(), Y.imag.copy())


def injections(v, delta, Y: AdmittanceMatrix):
    """Net active and reactive injections ``(p, q)`` at every bus.

    ``p_n = v_n sum_j v_j (G_nj cos d_nj + B_nj sin d_nj)`` and
    ``q_n = v_n sum_j v_j (G_nj sin d_nj - B_nj cos d_nj)`` with
    ``d_nj = delta_n - delta_j``.
    """
    v = np.asarray(v, dtype=float)
    delta = np.asarray(delta, dtype=float)
    diff = delta[:, None] - delta[None, :]
    cos, sin = np.cos(diff), np.sin(diff)
    G, B = Y.g_bus, Y.b_bus
    vv = v[:, None] * v[None, :]
    p = np.sum(vv * (G * cos + B * sin), axis=1)
    q = np.sum(vv * (G * sin - B * cos), axis=1)
    return p, q


def power_derivatives(V, Ybus):
    """Complex power sensitivities ``(dS/dv, dS/ddelta)`` at complex voltages ``V``."""
    I = Ybus @ V
    Vnorm = V / np.abs(V)
    dS_dv = V[:, None] * np.conj(Ybus * Vnorm[None, :])
    dS_dv[np.diag_indices_from(dS_dv)] += np.conj(I) * Vnorm
    dS_dd = -1j * V[:, None] * np.conj(Ybus * V[None, :])
    dS_dd[np.diag_indices_from(dS_dd)] += 1j * V * np.conj(I)
    return dS_dv, dS_dd


def _mismatch(p_calc, q_calc, p_spec, q_spec, pvpq, pq):
    return np.concatenate([p_calc[pvpq] - p_spec[pvpq], q_calc[pq] - q_spec[pq]])


def solve_power_flow(case: GridCase, p_load, q_load, gen_p_setpoints, gen_v_setpoints=None,
                     Y: AdmittanceMatrix | None = None, tol: float = 1e-8, max_iter: int = 30,
                     max_halvings: int = 4) -> PowerFlowResult:
    """Steady state for given loads and generator setpoints, from a flat start.

    The slack bus holds ``delta = 0`` and its voltage setpoint; other generator
    buses are PV (fixed p and v); all remaining buses are PQ. A Newton step is
    accepted only if it lowers the mismatch 2-norm, halving it up to
    ``max_halvings`` times; otherwise the solve is declared divergent.
    """
    n, m = case.n_buses, case.n_generators
    p_load = np.asarray(p_load, dtype=float)
    q_load = np.asarray(q_load, dtype=float)
    gen_p = np.asarray(gen_p_setpoints, dtype=float)
    gen_v = np.ones(m) if gen_v_setpoints is None else np.asarray(gen_v_setpoints, dtype=float)
    if p_load.shape != (n,) or q_load.shape != (n,):
        raise ContractError("loads must have length N")
    if gen_p.shape != (m,) or gen_v.shape != (m,):
        raise ContractError("generator setpoints must have length M")
    if Y is None:
        Y = build_admittance(case)
    Ybus = Y.complex

    gen_buses = case.selection.array
    slack = case.slack
    is_gen = np.zeros(n, dtype=bool)
    is_gen[gen_buses] = True
    pv = np.array([b for b in gen_buses if b != slack], dtype=np.intp)
    pq = np.flatnonzero(~is_gen)
    pvpq = np.sort(np.concatenate([pv, pq]))

    p_spec = -p_load.copy()
    p_spec[gen_buses] += gen_p
    q_spec = -q_load

    v = np.ones(n)
    v[gen_buses] = gen_v
    delta = np.zeros(n)

    p_calc, q_calc = injections(v, delta, Y)
    F = _mismatch(p_calc, q_calc, p_spec, q_spec, pvpq, pq)
    norm = np.linalg.norm(F)
    history = [norm]
    iterations = 0
    converged = np.max(np.abs(F), initial=0.0) <= tol
    n_a = len(pvpq)
    while not converged and iterations < max_iter:
        V = v * np.exp(1j * delta)
        dS_dv, dS_dd = power_derivatives(V, Ybus)
        J = np.block([
            [dS_dd.real[np.ix_(pvpq, pvpq)], dS_dv.real[np.ix_(pvpq, pq)]],
            [dS_dd.imag[np.ix_(pq, pvpq)], dS_dv.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = -np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(dx)):
            break
        step = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            v_new = v.copy()
            d_new = delta.copy()
            d_new[pvpq] += step * dx[:n_a]
            v_new[pq] += step * dx[n_a:]
            p_new, q_new = injections(v_new, d_new, Y)
            F_new = _mismatch(p_new, q_new, p_spec, q_spec, pvpq, pq)
            norm_new = np.linalg.norm(F_new)
            if norm_new < norm:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        v, delta, p_calc, q_calc, F, norm = v_new, d_new, p_new, q_new, F_new, norm_new
        history.append(norm)
        iterations += 1
        converged = np.max(np.abs(F), initial=0.0) <= tol

    state = StateMatrix(v, delta, p_calc, q_calc)
    return PowerFlowResult(state, bool(converged), iterations,
                           float(np.max(np.abs(F), initial=0.0)), tuple(history))
