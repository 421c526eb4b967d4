"""DC and AC optimal power flow.

``solve_dcopf`` is the cheap lossless approximation used as a warm start.
``solve_acopf`` is a primal-dual log-barrier interior-point method over bus
voltages, angles and generator outputs, with a fixed barrier schedule
``mu = 1, 0.1, ..., 1e-8``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .electrical import AdmittanceMatrix, StateMatrix, build_admittance, injections, power_derivatives
from .errors import ContractError
from .grid_case import GridCase


def evaluate_cost(case: GridCase, p_gen) -> float:
    """Total quadratic generation cost ``sum c2 p^2 + c1 p + c0``."""
    p = np.asarray(p_gen, dtype=float)
    if p.shape != (case.n_generators,):
        raise ContractError(f"p_gen must have length M={case.n_generators}")
    total = 0.0
    for g, pm in zip(case.generators, p):
        total += g.cost_c2 * pm * pm + g.cost_c1 * pm + g.cost_c0
    return float(total)


# --------------------------------------------------------------------------
# DCOPF

@dataclass(frozen=True)
class DcSolution:
    gen_p: np.ndarray
    angles: np.ndarray
    cost: float
    status: str = "optimal"

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def dc_susceptance(case: GridCase) -> np.ndarray:
    """Lossless susceptance matrix B' with off-diagonals ``-1/x``."""
    n = case.n_buses
    B = np.zeros((n, n))
    for br in case.branches:
        if br.x == 0:
            continue
        b = 1.0 / br.x
        i, j = br.from_bus, br.to_bus
        B[i, j] -= b
        B[j, i] -= b
        B[i, i] += b
        B[j, j] += b
    return B


def _economic_dispatch(c2, c1, p_min, p_max, demand):
    """Minimise sum c2 p^2 + c1 p subject to sum p = demand and box bounds."""
    convex = c2 > 0
    linear = ~convex

    def output(lam, upper):
        p = np.empty_like(c1)
        p[convex] = np.clip((lam - c1[convex]) / (2 * c2[convex]), p_min[convex], p_max[convex])
        if upper:
            p[linear] = np.where(lam >= c1[linear], p_max[linear], p_min[linear])
        else:
            p[linear] = np.where(lam > c1[linear], p_max[linear], p_min[linear])
        return p

    marg_lo = c1 + 2 * c2 * p_min
    marg_hi = c1 + 2 * c2 * p_max
    lo, hi = float(marg_lo.min()) - 1.0, float(marg_hi.max()) + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if output(mid, upper=False).sum() < demand:
            lo = mid
        else:
            hi = mid
    lam = 0.5 * (lo + hi)
    p = output(lam, upper=False)
    scale = max(1.0, abs(lam))
    marginal_linear = np.flatnonzero(linear & (np.abs(c1 - lam) <= 1e-9 * scale))
    residual = demand - p.sum()
    if len(marginal_linear):
        for m in sorted(marginal_linear, key=lambda k: (c1[k], k)):
            take = np.clip(residual, p_min[m] - p[m], p_max[m] - p[m])
            p[m] += take
            residual -= take
    else:
        free = np.flatnonzero(convex & (p > p_min) & (p < p_max))
        if len(free):
            dlam = residual / np.sum(1.0 / (2 * c2[free]))
            p[free] += dlam / (2 * c2[free])
    return np.clip(p, p_min, p_max)


def solve_dcopf(case: GridCase, p_load) -> DcSolution:
    """Lossless unit-voltage OPF: economic dispatch plus DC angles.

    Branch flows are unconstrained, so the dispatch reduces to equalising
    marginal costs under the generator bounds. Returns ``status="infeasible"``
    when total demand is outside ``[sum p_min, sum p_max]``.
    """
    n, m = case.n_buses, case.n_generators
    p_load = np.asarray(p_load, dtype=float)
    if p_load.shape != (n,):
        raise ContractError("p_load must have length N")
    c2, c1 = case.gen_array("cost_c2"), case.gen_array("cost_c1")
    p_min, p_max = case.gen_array("p_min"), case.gen_array("p_max")
    demand = float(p_load.sum())
    tol = 1e-9 * max(1.0, abs(demand))
    if demand > p_max.sum() + tol or demand < p_min.sum() - tol:
        return DcSolution(np.full(m, np.nan), np.full(n, np.nan), math.inf, "infeasible")
    p = _economic_dispatch(c2, c1, p_min, p_max, demand)

    injection = -p_load.copy()
    injection[case.selection.array] += p
    keep = np.array([b for b in range(n) if b != case.slack])
    B = dc_susceptance(case)
    angles = np.zeros(n)
    angles[keep] = np.linalg.solve(B[np.ix_(keep, keep)], injection[keep])
    return DcSolution(p, angles, evaluate_cost(case, p))


# --------------------------------------------------------------------------
# feasibility

@dataclass
class ConstraintCheck:
    ok: bool
    worst_violation: float


@dataclass
class FeasibilityReport:
    tol: float
    checks: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return all(c.ok for c in self.checks.values())

    @property
    def worst_violation(self) -> float:
        return max((c.worst_violation for c in self.checks.values()), default=0.0)

    def to_dict(self) -> dict:
        return {"tol": self.tol, "feasible": self.feasible,
                "checks": {k: asdict(c) for k, c in self.checks.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def state_bounds(case: GridCase, p_load, q_load):
    """Elementwise ``X_min, X_max`` (N x 4) for the state ``[v, delta, p, q]``."""
    n = case.n_buses
    lo = np.empty((n, 4))
    hi = np.empty((n, 4))
    lo[:, 0], hi[:, 0] = case.bus_array("v_min"), case.bus_array("v_max")
    lo[:, 1], hi[:, 1] = case.bus_array("delta_min"), case.bus_array("delta_max")
    lo[:, 2] = hi[:, 2] = -np.asarray(p_load, dtype=float)
    lo[:, 3] = hi[:, 3] = -np.asarray(q_load, dtype=float)
    gb = case.selection.array
    lo[gb, 2] += case.gen_array("p_min")
    hi[gb, 2] += case.gen_array("p_max")
    lo[gb, 3] += case.gen_array("q_min")
    hi[gb, 3] += case.gen_array("q_max")
    return lo, hi


def check_feasibility(case: GridCase, state: StateMatrix, tol: float = 1e-6, p_load=None, q_load=None,
                      Y: AdmittanceMatrix | None = None) -> FeasibilityReport:
    """Box constraints on the state matrix plus power-balance residuals.

    ``p_load``/``q_load`` default to the case's reference loads; they fix the
    p, q bounds at every bus.
    """
    if state.n != case.n_buses:
        raise ContractError("state dimension does not match the case")
    p_load = case.p_load_ref if p_load is None else p_load
    q_load = case.q_load_ref if q_load is None else q_load
    lo, hi = state_bounds(case, p_load, q_load)
    X = state.matrix
    viol = np.maximum(lo - X, X - hi)
    report = FeasibilityReport(tol)
    for k, name in enumerate(("v_bounds", "delta_bounds", "p_bounds", "q_bounds")):
        worst = float(max(viol[:, k].max(), 0.0))
        report.checks[name] = ConstraintCheck(worst <= tol, worst)
    slack_angle = abs(float(state.delta[case.slack]))
    report.checks["slack_angle"] = ConstraintCheck(slack_angle <= tol, slack_angle)
    if Y is None:
        Y = build_admittance(case)
    p_calc, q_calc = injections(state.v, state.delta, Y)
    for name, calc, given in (("p_balance", p_calc, state.p), ("q_balance", q_calc, state.q)):
        worst = float(np.max(np.abs(calc - given)))
        report.checks[name] = ConstraintCheck(worst <= tol, worst)
    return report


# --------------------------------------------------------------------------
# ACOPF

@dataclass(frozen=True)
class AcopfOptions:
    feas_tol: float = 1e-6
    opt_tol: float = 1e-4
    mu_init: float = 1.0
    mu_factor: float = 0.1
    mu_min: float = 1e-8
    tau: float = 0.995
    max_iter: int = 100
    kappa_eps: float = 10.0


@dataclass(frozen=True)
class OpfSolution:
    p_star: np.ndarray
    q_gen: np.ndarray
    state: StateMatrix
    cost: float
    status: str
    iterations: int
    kkt_residual: float
    constraint_violation: float = math.nan
    mu_history: tuple = field(default=(), repr=False)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def lagrangian_power_hessian(Ybus, V, lam):
    """Second derivatives of ``lam^T S(V)`` in polar coordinates.

    Returns complex blocks ``(H_dd, H_dv, H_vd, H_vv)``. The real part is the
    Hessian of ``lam^T p``, the imaginary part that of ``lam^T q``.
    """
    I = Ybus @ V
    D = Ybus.conj().T * V[None, :]
    Dlam = D @ lam
    C = (lam * V)[:, None] * np.conj(Ybus * V[None, :])
    E = np.conj(V)[:, None] * (D * lam[None, :])
    E[np.diag_indices_from(E)] -= np.conj(V) * Dlam
    F = C.copy()
    F[np.diag_indices_from(F)] -= lam * V * np.conj(I)
    inv_v = 1.0 / np.abs(V)
    H_dd = E + F
    H_vd = 1j * inv_v[:, None] * (E - F)
    H_dv = H_vd.T
    H_vv = inv_v[:, None] * (C + C.T) * inv_v[None, :]
    return H_dd, H_dv, H_vd, H_vv


class _AcopfProblem:
    """Smooth NLP in x = [delta (non-slack), v, p_gen, q_gen]."""

    def __init__(self, case: GridCase, p_load, q_load, Y: AdmittanceMatrix):
        n, m = case.n_buses, case.n_generators
        self.case, self.n, self.m = case, n, m
        self.Ybus = Y.complex
        self.Y = Y
        self.p_load = np.asarray(p_load, dtype=float)
        self.q_load = np.asarray(q_load, dtype=float)
        self.ang = np.array([b for b in range(n) if b != case.slack], dtype=np.intp)
        self.na = len(self.ang)
        self.iv = slice(self.na, self.na + n)
        self.ip = slice(self.na + n, self.na + n + m)
        self.iq = slice(self.na + n + m, self.na + n + 2 * m)
        self.nx = self.na + n + 2 * m
        self.Cg = np.zeros((n, m))
        self.Cg[case.selection.array, np.arange(m)] = 1.0
        self.c2, self.c1 = case.gen_array("cost_c2"), case.gen_array("cost_c1")
        self.c0 = case.gen_array("cost_c0")
        lo = np.concatenate([case.bus_array("delta_min")[self.ang], case.bus_array("v_min"),
                             case.gen_array("p_min"), case.gen_array("q_min")])
        hi = np.concatenate([case.bus_array("delta_max")[self.ang], case.bus_array("v_max"),
                             case.gen_array("p_max"), case.gen_array("q_max")])
        tight = hi - lo < 1e-8
        lo[tight] -= 1e-8
        hi[tight] += 1e-8
        self.lo, self.hi = lo, hi

    def unpack(self, x):
        delta = np.zeros(self.n)
        delta[self.ang] = x[:self.na]
        return delta, x[self.iv], x[self.ip], x[self.iq]

    def objective(self, x):
        pg = x[self.ip]
        return float(np.sum(self.c2 * pg * pg + self.c1 * pg + self.c0))

    def gradient(self, x):
        grad = np.zeros(self.nx)
        grad[self.ip] = 2 * self.c2 * x[self.ip] + self.c1
        return grad

    def constraints(self, x):
        delta, v, pg, qg = self.unpack(x)
        p, q = injections(v, delta, self.Y)
        return np.concatenate([p - self.Cg @ pg + self.p_load, q - self.Cg @ qg + self.q_load])

    def jacobian(self, x):
        delta, v, _, _ = self.unpack(x)
        V = v * np.exp(1j * delta)
        dS_dv, dS_dd = power_derivatives(V, self.Ybus)
        n, m = self.n, self.m
        J = np.zeros((2 * n, self.nx))
        J[:n, :self.na] = dS_dd.real[:, self.ang]
        J[n:, :self.na] = dS_dd.imag[:, self.ang]
        J[:n, self.iv] = dS_dv.real
        J[n:, self.iv] = dS_dv.imag
        J[:n, self.ip] = -self.Cg
        J[n:, self.iq] = -self.Cg
        return J

    def lagrangian_hessian(self, x, lam):
        delta, v, _, _ = self.unpack(x)
        V = v * np.exp(1j * delta)
        n = self.n
        Hp = lagrangian_power_hessian(self.Ybus, V, lam[:n].astype(complex))
        Hq = lagrangian_power_hessian(self.Ybus, V, lam[n:].astype(complex))
        dd, dv, vd, vv = (a.real + b.imag for a, b in zip(Hp, Hq))
        H = np.zeros((self.nx, self.nx))
        a = self.ang
        H[:self.na, :self.na] = dd[np.ix_(a, a)]
        H[:self.na, self.iv] = dv[a, :]
        H[self.iv, :self.na] = vd[:, a]
        H[self.iv, self.iv] = vv
        ip = np.arange(self.ip.start, self.ip.stop)
        H[ip, ip] += 2 * self.c2
        return H

    def initial_point(self, warm: DcSolution):
        x = np.empty(self.nx)
        angles = warm.angles if np.all(np.isfinite(warm.angles)) else np.zeros(self.n)
        x[:self.na] = angles[self.ang]
        x[self.iv] = 1.0
        x[self.ip] = warm.gen_p if np.all(np.isfinite(warm.gen_p)) else 0.5 * (self.lo + self.hi)[self.ip]
        x[self.iq] = 0.0
        width = self.hi - self.lo
        push_lo = np.minimum(1e-2 * np.maximum(1.0, np.abs(self.lo)), 1e-2 * width)
        push_hi = np.minimum(1e-2 * np.maximum(1.0, np.abs(self.hi)), 1e-2 * width)
        return np.clip(x, self.lo + push_lo, self.hi - push_hi)


def _fraction_to_boundary(values, steps, tau):
    neg = steps < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * values[neg] / steps[neg])))


def solve_acopf(case: GridCase, p_load, q_load, warm: DcSolution, options: AcopfOptions | None = None,
                Y: AdmittanceMatrix | None = None) -> OpfSolution:
    """Interior-point ACOPF warm-started from a DC solution.

    For each barrier value ``mu`` the perturbed KKT conditions are solved by
    Newton steps on the reduced primal-dual system, with a fraction-to-boundary
    rule and backtracking on an l1 barrier merit function. ``mu`` is divided by
    ten once the barrier error drops below ``kappa_eps * mu``; the solve ends
    after the ``mu_min`` subproblem converges.
    """
    opts = options or AcopfOptions()
    if Y is None:
        Y = build_admittance(case)
    prob = _AcopfProblem(case, p_load, q_load, Y)
    nx, lo, hi = prob.nx, prob.lo, prob.hi

    x = prob.initial_point(warm)
    mu = opts.mu_init
    zl = mu / (x - lo)
    zu = mu / (hi - x)
    grad = prob.gradient(x)
    J = prob.jacobian(x)
    g = prob.constraints(x)
    lam = np.linalg.lstsq(J.T, -(grad - zl + zu), rcond=None)[0]
    nu = 1.0
    delta_w_last = 0.0
    mu_history = [mu]
    status = "max_iter"
    iterations = 0

    def errors(x, lam, zl, zu, grad, J, g, mu):
        rd = grad + J.T @ lam - zl + zu
        sd = max(100.0, (np.abs(lam).sum() + zl.sum() + zu.sum()) / (len(lam) + 2 * nx)) / 100.0
        sc = max(100.0, (zl.sum() + zu.sum()) / (2 * nx)) / 100.0
        comp = max(np.max(np.abs((x - lo) * zl - mu)), np.max(np.abs((hi - x) * zu - mu)))
        return max(np.max(np.abs(rd)) / sd, np.max(np.abs(g)), comp / sc), rd

    def merit(x, mu, nu):
        s_lo, s_hi = x - lo, hi - x
        if np.any(s_lo <= 0) or np.any(s_hi <= 0):
            return math.inf, None
        g = prob.constraints(x)
        return (prob.objective(x) - mu * np.sum(np.log(s_lo)) - mu * np.sum(np.log(s_hi))
                + nu * np.sum(np.abs(g)), g)

    while True:
        err, rd = errors(x, lam, zl, zu, grad, J, g, mu)
        while err <= opts.kappa_eps * mu:
            if mu <= opts.mu_min * (1 + 1e-12):
                err0, rd = errors(x, lam, zl, zu, grad, J, g, 0.0)
                if np.max(np.abs(rd)) <= opts.opt_tol and np.max(np.abs(g)) <= opts.feas_tol:
                    status = "optimal"
                break
            mu = max(mu * opts.mu_factor, opts.mu_min)
            mu_history.append(mu)
            err, rd = errors(x, lam, zl, zu, grad, J, g, mu)
        if status == "optimal" or iterations >= opts.max_iter:
            break

        s_lo, s_hi = x - lo, hi - x
        sigma = zl / s_lo + zu / s_hi
        W = prob.lagrangian_hessian(x, lam)
        W[np.diag_indices(nx)] += sigma
        r1 = -(grad - mu / s_lo + mu / s_hi)
        rhs = np.concatenate([r1, -g])
        m_eq = len(g)

        delta_w = 0.0
        delta_c = 0.0
        solved = None
        for _ in range(12):
            K = np.zeros((nx + m_eq, nx + m_eq))
            K[:nx, :nx] = W
            K[np.arange(nx), np.arange(nx)] += delta_w
            K[:nx, nx:] = J.T
            K[nx:, :nx] = J
            K[np.arange(nx, nx + m_eq), np.arange(nx, nx + m_eq)] = -delta_c
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                delta_c = 1e-8 * max(mu, 1e-8) ** 0.25
                continue
            dx = sol[:nx]
            if np.all(np.isfinite(sol)) and dx @ (W @ dx) + delta_w * (dx @ dx) >= 1e-12 * (dx @ dx):
                solved = sol
                break
            if delta_w == 0.0:
                delta_w = 1e-4 if delta_w_last == 0.0 else max(1e-20, delta_w_last / 3.0)
            else:
                delta_w *= 8.0
        if solved is None:
            status = "infeasible"
            break
        delta_w_last = delta_w
        dx, lam_plus = solved[:nx], solved[nx:]
        dlam = lam_plus - lam
        dzl = mu / s_lo - zl - (zl / s_lo) * dx
        dzu = mu / s_hi - zu + (zu / s_hi) * dx

        tau = max(opts.tau, 1.0 - mu)
        alpha_max = min(_fraction_to_boundary(s_lo, dx, tau), _fraction_to_boundary(s_hi, -dx, tau))
        alpha_z = min(_fraction_to_boundary(zl, dzl, tau), _fraction_to_boundary(zu, dzu, tau))

        nu = max(nu, 1.1 * np.max(np.abs(lam_plus)) + 1.0)
        phi0, _ = merit(x, mu, nu)
        slope = (grad - mu / s_lo + mu / s_hi) @ dx - nu * np.sum(np.abs(g))
        alpha = alpha_max
        accepted = False
        trial = None
        for _ in range(40):
            x_try = x + alpha * dx
            phi, g_try = merit(x_try, mu, nu)
            if phi <= phi0 + 1e-4 * alpha * min(slope, 0.0):
                accepted = True
                trial = (x_try, g_try)
                break
            if g_try is not None:
                grad_t = prob.gradient(x_try)
                J_t = prob.jacobian(x_try)
                lam_t = lam + alpha * dlam
                zl_t, zu_t = zl + alpha_z * dzl, zu + alpha_z * dzu
                err_t, _ = errors(x_try, lam_t, zl_t, zu_t, grad_t, J_t, g_try, mu)
                if err_t < 0.9 * err:
                    accepted = True
                    trial = (x_try, g_try)
                    break
            alpha *= 0.5
        if not accepted:
            if np.max(np.abs(g)) > opts.feas_tol:
                status = "infeasible"
                break
            x_try = x + alpha * dx
            trial = (x_try, prob.constraints(x_try))

        x, g = trial
        lam = lam + alpha * dlam
        zl = zl + alpha_z * dzl
        zu = zu + alpha_z * dzu
        s_lo, s_hi = x - lo, hi - x
        kappa = 1e10
        zl = np.clip(zl, mu / (kappa * s_lo), kappa * mu / s_lo)
        zu = np.clip(zu, mu / (kappa * s_hi), kappa * mu / s_hi)
        grad = prob.gradient(x)
        J = prob.jacobian(x)
        iterations += 1

    delta, v, pg, qg = prob.unpack(x)
    p, q = injections(v, delta, Y)
    rd = grad + J.T @ lam - zl + zu
    return OpfSolution(
        p_star=pg.copy(), q_gen=qg.copy(), state=StateMatrix(v.copy(), delta, p, q),
        cost=prob.objective(x), status=status, iterations=iterations,
        kkt_residual=float(np.max(np.abs(rd))), constraint_violation=float(np.max(np.abs(g))),
        mu_history=tuple(mu_history),
    )
