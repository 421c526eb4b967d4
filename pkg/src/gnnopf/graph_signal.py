"""Graph shift operator from line impedances, graph shifts and convolutions.

Signals are arrays whose first axis (or the axis right after a leading batch
axis) indexes buses. ``graph_convolution`` evaluates ``sum_k W^k X H_k`` by
repeated shifts ``W(W(...X))``; ``W^k`` is never formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .grid_case import GridCase


@dataclass(frozen=True)
class Gso:
    w: np.ndarray
    kernel_k: float = 1.0
    threshold_omega: float = 0.0
    normalized: bool = False

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ContractError(f"GSO must be square, got {w.shape}")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.w.shape[0]

    def permuted(self, perm) -> "Gso":
        """Relabel nodes: new node ``i`` is old node ``perm[i]`` (``P W P^T``)."""
        perm = np.asarray(perm)
        return Gso(self.w[np.ix_(perm, perm)], self.kernel_k, self.threshold_omega, self.normalized)


@dataclass(frozen=True)
class FilterBank:
    taps: tuple

    def __post_init__(self):
        taps = tuple(np.asarray(h, dtype=float) for h in self.taps)
        if not taps:
            raise ContractError("a filter bank needs at least one tap")
        shape = taps[0].shape
        if len(shape) != 2 or any(h.shape != shape for h in taps):
            raise ContractError("all taps must be F x G matrices of equal shape")
        object.__setattr__(self, "taps", taps)

    @property
    def k(self) -> int:
        return len(self.taps)

    @property
    def shape(self):
        return self.taps[0].shape


def default_kernel_k(case: GridCase) -> float:
    """``1 / mean |z|^2`` over branches."""
    z2 = np.array([br.z_squared for br in case.branches])
    if len(z2) == 0:
        return 1.0
    return float(1.0 / z2.mean())


def build_gso(case: GridCase, kernel_k: float | None = None, threshold_omega: float = 0.01,
              normalize: bool = False) -> Gso:
    """Gaussian-kernel adjacency ``w_ij = exp(-k |z_ij|^2)``, keeping ``w_ij > omega``.

    With ``normalize=True`` the matrix is divided by its spectral radius.
    """
    if kernel_k is None:
        kernel_k = default_kernel_k(case)
    if kernel_k <= 0:
        raise ContractError("kernel_k must be positive")
    if not 0 <= threshold_omega < 1:
        raise ContractError("threshold_omega must lie in [0, 1)")
    n = case.n_buses
    w = np.zeros((n, n))
    for br in case.branches:
        weight = float(np.exp(-kernel_k * br.z_squared))
        if weight > threshold_omega:
            w[br.from_bus, br.to_bus] = weight
            w[br.to_bus, br.from_bus] = weight
    if normalize:
        radius = float(np.max(np.abs(np.linalg.eigvalsh(w)))) if n else 0.0
        if radius > 0:
            w = w / radius
    return Gso(w, float(kernel_k), float(threshold_omega), normalize)


def _shift(w, X):
    if X.ndim == 2:
        return w @ X
    return np.matmul(w, X)


def graph_shift(gso: Gso, X) -> np.ndarray:
    """One diffusion step ``W X``. ``X`` is ``(N, F)`` or batched ``(B, N, F)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim not in (2, 3) or X.shape[-2] != gso.n:
        raise ContractError(f"signal shape {X.shape} does not match N={gso.n}")
    return _shift(gso.w, X)


def shift_sequence(gso: Gso, X, k: int) -> list:
    """``[X, W X, ..., W^(k-1) X]`` by iterated shifts."""
    out = [X]
    for _ in range(k - 1):
        out.append(_shift(gso.w, out[-1]))
    return out


def graph_convolution(gso: Gso, X, bank: FilterBank) -> np.ndarray:
    """``sum_k W^k X H_k`` for ``X`` of shape ``(N, F)`` or ``(B, N, F)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim not in (2, 3) or X.shape[-2] != gso.n:
        raise ContractError(f"signal shape {X.shape} does not match N={gso.n}")
    if X.shape[-1] != bank.shape[0]:
        raise ContractError(f"signal has {X.shape[-1]} features, taps expect {bank.shape[0]}")
    shifted = X
    out = X @ bank.taps[0]
    for h in bank.taps[1:]:
        shifted = _shift(gso.w, shifted)
        out = out + shifted @ h
    return out


def k_hop_set(gso: Gso, node: int, k: int) -> set:
    """Nodes within ``k`` edges of ``node`` in the GSO sparsity pattern."""
    if not 0 <= node < gso.n:
        raise ContractError(f"node {node} out of range")
    adj = gso.w != 0
    reached = {node}
    frontier = {node}
    for _ in range(k):
        nxt = set()
        for i in frontier:
            nxt.update(np.flatnonzero(adj[i]).tolist())
        frontier = nxt - reached
        if not frontier:
            break
        reached |= frontier
    return reached
