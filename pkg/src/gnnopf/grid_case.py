"""Grid test cases: JSON parsing, validation and generator selection.

All quantities are per-unit on ``base_mva``. A case file looks like::

    {"base_mva": 100.0,
     "buses": [{"id": 0, "kind": "slack", "v_min": 0.95, "v_max": 1.05,
                "p_load_ref": 0.0, "q_load_ref": 0.0}, ...],
     "branches": [{"from": 0, "to": 1, "r": 0.02, "x": 0.06, "b_shunt": 0.03}, ...],
     "generators": [{"bus": 0, "p_min": 0.0, "p_max": 0.8, "q_min": -0.2,
                     "q_max": 1.5, "cost": [200.0, 200.0, 0.0]}, ...]}

Buses may additionally carry ``delta_min``/``delta_max`` (radians, default
+-pi/2) and fixed shunt admittance ``g_shunt``/``b_shunt``. Any other key is
rejected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import CaseParseError, CaseValidationError, ContractError

BUS_KINDS = ("slack", "generator", "load")
DEFAULT_ANGLE_BOUND = math.pi / 2

_TOP_KEYS = {"base_mva", "buses", "branches", "generators"}
_BUS_REQUIRED = {"id", "kind", "v_min", "v_max", "p_load_ref", "q_load_ref"}
_BUS_OPTIONAL = {"delta_min", "delta_max", "g_shunt", "b_shunt"}
_BRANCH_KEYS = {"from", "to", "r", "x", "b_shunt"}
_GEN_KEYS = {"bus", "p_min", "p_max", "q_min", "q_max", "cost"}


@dataclass(frozen=True)
class BusRecord:
    id: int
    kind: str
    v_min: float
    v_max: float
    delta_min: float = -DEFAULT_ANGLE_BOUND
    delta_max: float = DEFAULT_ANGLE_BOUND
    g_shunt: float = 0.0
    b_shunt: float = 0.0


@dataclass(frozen=True)
class BranchRecord:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0

    @property
    def z_squared(self) -> float:
        return self.r * self.r + self.x * self.x


@dataclass(frozen=True)
class GeneratorRecord:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost_c2: float
    cost_c1: float
    cost_c0: float = 0.0


@dataclass(frozen=True)
class SelectionIndex:
    """Ordered generator bus indices; the index form of the selection matrix."""

    generator_buses: tuple

    def __post_init__(self):
        buses = tuple(int(b) for b in self.generator_buses)
        if len(set(buses)) != len(buses):
            raise ContractError("generator bus indices must be unique")
        if any(b < 0 for b in buses):
            raise ContractError("generator bus indices must be nonnegative")
        object.__setattr__(self, "generator_buses", buses)

    def __len__(self):
        return len(self.generator_buses)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.generator_buses, dtype=np.intp)

    def check(self, n: int) -> None:
        if any(b >= n for b in self.generator_buses):
            raise ContractError(f"generator index out of range for N={n}: {self.generator_buses}")

    def mask(self, n: int) -> np.ndarray:
        """Selection vector g: 1.0 at generator buses, 0.0 elsewhere."""
        self.check(n)
        g = np.zeros(n)
        g[self.array] = 1.0
        return g


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GridCase:
    buses: tuple
    branches: tuple
    generators: tuple
    p_load_ref: np.ndarray
    q_load_ref: np.ndarray
    base_mva: float = 100.0
    name: str = field(default="case", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "p_load_ref", _frozen(self.p_load_ref))
        object.__setattr__(self, "q_load_ref", _frozen(self.q_load_ref))
        validate_case(self)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_generators(self) -> int:
        return len(self.generators)

    @property
    def slack(self) -> int:
        return next(b.id for b in self.buses if b.kind == "slack")

    @property
    def selection(self) -> SelectionIndex:
        return SelectionIndex(tuple(g.bus for g in self.generators))

    def gen_array(self, attr: str) -> np.ndarray:
        return np.array([getattr(g, attr) for g in self.generators], dtype=float)

    def bus_array(self, attr: str) -> np.ndarray:
        return np.array([getattr(b, attr) for b in self.buses], dtype=float)

    def to_dict(self) -> dict:
        buses = []
        for b, pl, ql in zip(self.buses, self.p_load_ref, self.q_load_ref):
            rec = {"id": b.id, "kind": b.kind, "v_min": b.v_min, "v_max": b.v_max,
                   "p_load_ref": float(pl), "q_load_ref": float(ql),
                   "delta_min": b.delta_min, "delta_max": b.delta_max}
            if b.g_shunt:
                rec["g_shunt"] = b.g_shunt
            if b.b_shunt:
                rec["b_shunt"] = b.b_shunt
            buses.append(rec)
        branches = [{"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x, "b_shunt": br.b_shunt}
                    for br in self.branches]
        gens = [{"bus": g.bus, "p_min": g.p_min, "p_max": g.p_max, "q_min": g.q_min, "q_max": g.q_max,
                 "cost": [g.cost_c2, g.cost_c1, g.cost_c0]} for g in self.generators]
        return {"base_mva": self.base_mva, "buses": buses, "branches": branches, "generators": gens}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def __eq__(self, other):
        if not isinstance(other, GridCase):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(self.to_json())


def validate_case(case: GridCase) -> None:
    """Raise :class:`CaseValidationError` naming the first broken rule."""
    n = len(case.buses)
    if n < 2:
        raise CaseValidationError("min_buses", f"need N >= 2 buses, got {n}")
    if [b.id for b in case.buses] != list(range(n)):
        raise CaseValidationError("bus_ids", "bus ids must be 0..N-1 in order")
    slacks = [b.id for b in case.buses if b.kind == "slack"]
    if len(slacks) != 1:
        raise CaseValidationError("single_slack", f"exactly one slack bus required, found {slacks}")
    for b in case.buses:
        if b.kind not in BUS_KINDS:
            raise CaseValidationError("bus_kind", f"bus {b.id}: unknown kind {b.kind!r}")
        bounds = (b.v_min, b.v_max, b.delta_min, b.delta_max)
        if not all(math.isfinite(v) for v in bounds):
            raise CaseValidationError("finite_bounds", f"bus {b.id}: bounds must be finite")
        if b.v_min > b.v_max:
            raise CaseValidationError("v_bounds", f"bus {b.id}: v_min > v_max")
        if b.delta_min > b.delta_max:
            raise CaseValidationError("delta_bounds", f"bus {b.id}: delta_min > delta_max")
    if case.p_load_ref.shape != (n,) or case.q_load_ref.shape != (n,):
        raise CaseValidationError("load_shape", "reference loads must have length N")
    if np.any(case.p_load_ref < 0) or np.any(case.q_load_ref < 0):
        raise CaseValidationError("nonnegative_load", "reference loads must be nonnegative")
    pairs = set()
    for k, br in enumerate(case.branches):
        if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
            raise CaseValidationError("branch_index", f"branch {k}: bus index out of range")
        if br.from_bus == br.to_bus:
            raise CaseValidationError("branch_self_loop", f"branch {k}: from == to")
        if br.r == 0 and br.x == 0:
            raise CaseValidationError("branch_impedance", f"branch {k}: zero impedance")
        key = frozenset((br.from_bus, br.to_bus))
        if key in pairs:
            raise CaseValidationError("branch_duplicate", f"branch {k}: duplicate bus pair")
        pairs.add(key)
    if len(case.generators) < 1:
        raise CaseValidationError("min_generators", "need at least one generator")
    gen_buses = [g.bus for g in case.generators]
    if len(set(gen_buses)) != len(gen_buses):
        raise CaseValidationError("generator_bus_unique", "generator buses must be distinct")
    for m, g in enumerate(case.generators):
        if not 0 <= g.bus < n:
            raise CaseValidationError("generator_bus_index", f"generator {m}: bus out of range")
        if g.p_min > g.p_max:
            raise CaseValidationError("p_bounds", f"generator {m}: p_min > p_max")
        if g.q_min > g.q_max:
            raise CaseValidationError("q_bounds", f"generator {m}: q_min > q_max")
        if g.cost_c2 < 0:
            raise CaseValidationError("convex_cost", f"generator {m}: cost_c2 < 0")
    if case.slack not in gen_buses:
        raise CaseValidationError("slack_generator", "the slack bus must host a generator")


def _get(obj, key, path, kind=float):
    if key not in obj:
        raise CaseParseError(f"{path}.{key}", "missing field")
    value = obj[key]
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise CaseParseError(f"{path}.{key}", f"expected integer, got {value!r}")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise CaseParseError(f"{path}.{key}", f"expected string, got {value!r}")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CaseParseError(f"{path}.{key}", f"expected number, got {value!r}")
    return float(value)


def _check_keys(obj, path, required, optional=frozenset()):
    if not isinstance(obj, dict):
        raise CaseParseError(path, "expected an object")
    unknown = set(obj) - set(required) - set(optional)
    if unknown:
        raise CaseParseError(f"{path}.{sorted(unknown)[0]}", "unknown key")
    for key in sorted(required):
        if key not in obj:
            raise CaseParseError(f"{path}.{key}", "missing field")


def _merge_parallel(branches):
    """Combine branches sharing an unordered bus pair into one equivalent branch."""
    merged = {}
    order = []
    for br in branches:
        key = frozenset((br.from_bus, br.to_bus))
        if key not in merged or br.from_bus == br.to_bus:
            merged[key] = br
            order.append(key)
            continue
        old = merged[key]
        z1, z2 = complex(old.r, old.x), complex(br.r, br.x)
        if z1 == 0 or z2 == 0:
            raise CaseValidationError("branch_impedance", "zero-impedance parallel branch")
        z = z1 * z2 / (z1 + z2)
        merged[key] = BranchRecord(old.from_bus, old.to_bus, z.real, z.imag, old.b_shunt + br.b_shunt)
    return [merged[k] for k in order]


def parse_case(text, name: str = "case") -> GridCase:
    """Parse JSON case text into a validated :class:`GridCase`.

    Raises :class:`CaseParseError` for malformed input (with the field path)
    and :class:`CaseValidationError` for rule violations.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseParseError("$", f"invalid JSON: {exc}") from None
    _check_keys(data, "$", _TOP_KEYS)
    base_mva = _get(data, "base_mva", "$")
    if base_mva <= 0:
        raise CaseParseError("$.base_mva", "must be positive")

    raw_buses = data["buses"]
    if not isinstance(raw_buses, list):
        raise CaseParseError("$.buses", "expected an array")
    buses, p_ref, q_ref = [], [], []
    for i, b in enumerate(raw_buses):
        path = f"$.buses[{i}]"
        _check_keys(b, path, _BUS_REQUIRED, _BUS_OPTIONAL)
        kind = _get(b, "kind", path, str)
        buses.append(BusRecord(
            id=_get(b, "id", path, int),
            kind=kind,
            v_min=_get(b, "v_min", path),
            v_max=_get(b, "v_max", path),
            delta_min=_get(b, "delta_min", path) if "delta_min" in b else -DEFAULT_ANGLE_BOUND,
            delta_max=_get(b, "delta_max", path) if "delta_max" in b else DEFAULT_ANGLE_BOUND,
            g_shunt=_get(b, "g_shunt", path) if "g_shunt" in b else 0.0,
            b_shunt=_get(b, "b_shunt", path) if "b_shunt" in b else 0.0,
        ))
        p_ref.append(_get(b, "p_load_ref", path))
        q_ref.append(_get(b, "q_load_ref", path))

    raw_branches = data["branches"]
    if not isinstance(raw_branches, list):
        raise CaseParseError("$.branches", "expected an array")
    branches = []
    for k, br in enumerate(raw_branches):
        path = f"$.branches[{k}]"
        _check_keys(br, path, _BRANCH_KEYS)
        branches.append(BranchRecord(_get(br, "from", path, int), _get(br, "to", path, int),
                                     _get(br, "r", path), _get(br, "x", path), _get(br, "b_shunt", path)))

    raw_gens = data["generators"]
    if not isinstance(raw_gens, list):
        raise CaseParseError("$.generators", "expected an array")
    gens = []
    for m, g in enumerate(raw_gens):
        path = f"$.generators[{m}]"
        _check_keys(g, path, _GEN_KEYS)
        cost = g["cost"]
        if (not isinstance(cost, list) or len(cost) != 3
                or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in cost)):
            raise CaseParseError(f"{path}.cost", "expected [c2, c1, c0]")
        gens.append(GeneratorRecord(_get(g, "bus", path, int), _get(g, "p_min", path), _get(g, "p_max", path),
                                    _get(g, "q_min", path), _get(g, "q_max", path),
                                    float(cost[0]), float(cost[1]), float(cost[2])))

    return GridCase(buses=buses, branches=_merge_parallel(branches), generators=gens,
                    p_load_ref=p_ref, q_load_ref=q_ref, base_mva=base_mva, name=name)


def load_case(path) -> GridCase:
    path = Path(path)
    return parse_case(path.read_text(), name=path.stem)


def bundled_case(name: str) -> GridCase:
    """Load one of the shipped cases: ``"ieee30"`` or ``"ieee118"``."""
    text = resources.files("gnnopf.data").joinpath(f"{name}.json").read_text()
    return parse_case(text, name=name)


def select_generators(X, idx: SelectionIndex) -> np.ndarray:
    """Rows of ``X`` at the generator buses, in generator order (``G X``)."""
    X = np.asarray(X)
    if X.ndim < 1:
        raise ContractError("X must have a bus axis")
    idx.check(X.shape[0])
    return X[idx.array]


def scatter_generators(Y, idx: SelectionIndex, n: int) -> np.ndarray:
    """Place generator rows back on an N-row zero matrix (``G^T Y``)."""
    Y = np.asarray(Y)
    if Y.shape[0] != len(idx):
        raise ContractError(f"Y has {Y.shape[0]} rows, selection has {len(idx)}")
    idx.check(n)
    out = np.zeros((n,) + Y.shape[1:], dtype=Y.dtype)
    out[idx.array] = Y
    return out
