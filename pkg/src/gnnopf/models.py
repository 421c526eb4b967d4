"""The four imitation architectures with hand-derived reverse-mode gradients.

Architectures (``F = [4, 128, 64]``):

``global_gnn``
    two graph convolutions (4 taps each), then a dense readout ``64N -> M``.
``local_gnn``
    the same convolutions, then a per-node ``64 -> 1`` readout evaluated at
    the generator buses only.
``global_mlp``
    dense ``4N -> 128N -> 64N -> M``.
``local_mlp``
    per-node dense ``4 -> 128 -> 64 -> 1`` (graph convolutions with one tap),
    evaluated at the generator buses.

Internally batches are laid out node-major, ``(N, B, F)``, so a graph shift is
a single ``(N, N) @ (N, B*F)`` product.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError
from .graph_signal import Gso

ARCHITECTURES = ("global_gnn", "local_gnn", "global_mlp", "local_mlp")
ACTIVATIONS = ("relu", "tanh")
DEFAULT_FEATURES = (4, 128, 64)


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    n_buses: int
    generator_buses: tuple
    layer_features: tuple = DEFAULT_FEATURES
    taps_per_layer: tuple | None = None
    activation: str = "relu"
    bias: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ContractError(f"unknown architecture {self.architecture!r}; choose from {ARCHITECTURES}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "generator_buses", tuple(int(b) for b in self.generator_buses))
        object.__setattr__(self, "layer_features", tuple(int(f) for f in self.layer_features))
        if self.layer_features[0] != 4:
            raise ContractError("the input has 4 features per bus")
        if self.taps_per_layer is None:
            default = {"global_gnn": 4, "local_gnn": 4, "local_mlp": 1, "global_mlp": 1}[self.architecture]
            taps = (default,) * (len(self.layer_features) - 1)
            object.__setattr__(self, "taps_per_layer", taps)
        else:
            object.__setattr__(self, "taps_per_layer", tuple(int(k) for k in self.taps_per_layer))
        if len(self.taps_per_layer) != len(self.layer_features) - 1:
            raise ContractError("need one tap count per layer")
        if self.architecture == "local_mlp" and any(k != 1 for k in self.taps_per_layer):
            raise ContractError("local_mlp uses a single tap per layer")
        if any(not 0 <= b < self.n_buses for b in self.generator_buses):
            raise ContractError("generator bus index out of range")

    @property
    def n_generators(self) -> int:
        return len(self.generator_buses)

    @property
    def is_global(self) -> bool:
        return self.architecture.startswith("global")

    @property
    def uses_graph(self) -> bool:
        return self.architecture in ("global_gnn", "local_gnn")

    def to_dict(self) -> dict:
        return {"architecture": self.architecture, "n_buses": self.n_buses,
                "generator_buses": list(self.generator_buses), "layer_features": list(self.layer_features),
                "taps_per_layer": list(self.taps_per_layer), "activation": self.activation, "bias": self.bias}

    @classmethod
    def from_dict(cls, d) -> "ModelSpec":
        return cls(d["architecture"], d["n_buses"], tuple(d["generator_buses"]), tuple(d["layer_features"]),
                   tuple(d["taps_per_layer"]), d["activation"], d["bias"])

    def permuted(self, perm) -> "ModelSpec":
        """Spec for the relabelled grid where new bus ``i`` is old bus ``perm[i]``."""
        inverse = np.argsort(perm)
        return replace(self, generator_buses=tuple(int(inverse[b]) for b in self.generator_buses))


def param_shapes(spec: ModelSpec) -> dict:
    """Ordered mapping of parameter name to shape."""
    n, m = spec.n_buses, spec.n_generators
    feats = spec.layer_features
    shapes = {}
    if spec.architecture == "global_mlp":
        for layer in range(1, len(feats)):
            shapes[f"dense{layer}"] = (feats[layer - 1] * n, feats[layer] * n)
            if spec.bias:
                shapes[f"bias{layer}"] = (feats[layer] * n,)
    else:
        for layer in range(1, len(feats)):
            shapes[f"conv{layer}"] = (spec.taps_per_layer[layer - 1], feats[layer - 1], feats[layer])
            if spec.bias:
                shapes[f"bias{layer}"] = (feats[layer],)
    shapes["readout"] = (feats[-1] * n, m) if spec.is_global else (feats[-1], 1)
    if spec.bias:
        shapes["bias_out"] = (m,) if spec.is_global else (1,)
    return shapes


def _fan_in(name, shape):
    if name.startswith("conv"):
        return shape[0] * shape[1]
    if name.startswith("bias"):
        return None
    return shape[0]


def init_params(spec: ModelSpec, seed: int) -> dict:
    """Uniform ``[-a, a]`` weights with ``a = sqrt(1/fan_in)``; biases start at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        fan_in = _fan_in(name, shape)
        if fan_in is None:
            params[name] = np.zeros(shape)
        else:
            a = np.sqrt(1.0 / fan_in)
            params[name] = rng.uniform(-a, a, size=shape)
    return params


def count_params(params: dict, prefix: str | None = None) -> int:
    return int(sum(p.size for k, p in params.items() if prefix is None or k.startswith(prefix)))


def _activate(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(kind, z, a, upstream):
    if kind == "relu":
        return upstream * (z > 0)
    return upstream * (1.0 - a * a)


def _node_major(X, n):
    X = np.asarray(X, dtype=float)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.ndim != 3 or X.shape[1] != n or X.shape[2] != 4:
        raise ContractError(f"input must be (N, 4) or (B, N, 4) with N={n}, got {X.shape}")
    return np.ascontiguousarray(X.transpose(1, 0, 2)), single


def _stack_shifts(w, X, k):
    """Concatenate ``[X, WX, ..., W^(k-1) X]`` along features; ``X`` is (N, B, F)."""
    if k == 1:
        return X
    n, b, f = X.shape
    out = np.empty((n, b, k * f))
    out[:, :, :f] = X
    cur = X.reshape(n, b * f)
    for j in range(1, k):
        cur = w @ cur
        out[:, :, j * f:(j + 1) * f] = cur.reshape(n, b, f)
    return out


@dataclass
class ForwardTrace:
    spec: ModelSpec
    gso_w: np.ndarray | None
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)
    batch: int = 0
    single: bool = False


def forward(spec: ModelSpec, params: dict, X, gso: Gso | None = None, return_trace: bool = False):
    """Predicted generator powers for standardized input ``X``.

    ``X`` is ``(N, 4)`` or ``(B, N, 4)``; the output is ``(M,)`` or ``(B, M)``.
    With ``return_trace`` the cached layer tensors needed by :func:`backward`
    are returned as well.
    """
    n = spec.n_buses
    H, single = _node_major(X, n)
    batch = H.shape[1]
    w = None
    if spec.uses_graph:
        if gso is None or gso.n != n:
            raise ContractError("graph architectures need a GSO matching N")
        w = gso.w
    trace = ForwardTrace(spec, w, batch=batch, single=single)
    n_layers = len(spec.layer_features) - 1

    if spec.architecture == "global_mlp":
        A = H.transpose(1, 0, 2).reshape(batch, -1)
        for layer in range(1, n_layers + 1):
            Z = A @ params[f"dense{layer}"]
            if spec.bias:
                Z = Z + params[f"bias{layer}"]
            trace.inputs.append(A)
            A = _activate(spec.activation, Z)
            trace.pre.append(Z)
            trace.post.append(A)
        trace.inputs.append(A)
        out = A @ params["readout"]
    else:
        A = H
        for layer in range(1, n_layers + 1):
            taps = params[f"conv{layer}"]
            k, f_in, f_out = taps.shape
            S = _stack_shifts(w, A, k)
            Z = (S.reshape(-1, k * f_in) @ taps.reshape(k * f_in, f_out)).reshape(n, batch, f_out)
            if spec.bias:
                Z = Z + params[f"bias{layer}"]
            trace.inputs.append(S)
            A = _activate(spec.activation, Z)
            trace.pre.append(Z)
            trace.post.append(A)
        if spec.is_global:
            flat = A.transpose(1, 0, 2).reshape(batch, -1)
            trace.inputs.append(flat)
            out = flat @ params["readout"]
        else:
            gen = A[list(spec.generator_buses)]
            trace.inputs.append(gen)
            out = (gen @ params["readout"])[:, :, 0].T
    if spec.bias:
        out = out + params["bias_out"]
    if single:
        out = out[0]
    return (out, trace) if return_trace else out


def backward(spec: ModelSpec, params: dict, trace: ForwardTrace, dL_dp_hat) -> dict:
    """Gradients of a scalar loss with respect to every parameter tensor.

    ``dL_dp_hat`` has the shape of the forward output. Gradients are summed
    over the batch.
    """
    if trace.spec != spec:
        raise ContractError("trace was produced by a different model spec")
    g_out = np.asarray(dL_dp_hat, dtype=float)
    if trace.single:
        g_out = g_out[None]
    if g_out.shape != (trace.batch, spec.n_generators):
        raise ContractError(f"output gradient shape {g_out.shape} does not match the trace")
    n, batch = spec.n_buses, trace.batch
    n_layers = len(spec.layer_features) - 1
    grads = {}
    if spec.bias:
        grads["bias_out"] = g_out.sum(axis=0) if spec.is_global else np.array([g_out.sum()])

    if spec.architecture == "global_mlp":
        grads["readout"] = trace.inputs[-1].T @ g_out
        dA = g_out @ params["readout"].T
        for layer in range(n_layers, 0, -1):
            dZ = _activation_grad(spec.activation, trace.pre[layer - 1], trace.post[layer - 1], dA)
            grads[f"dense{layer}"] = trace.inputs[layer - 1].T @ dZ
            if spec.bias:
                grads[f"bias{layer}"] = dZ.sum(axis=0)
            if layer > 1:
                dA = dZ @ params[f"dense{layer}"].T
        return {k: grads[k] for k in params}

    f_last = spec.layer_features[-1]
    if spec.is_global:
        grads["readout"] = trace.inputs[-1].T @ g_out
        dA = (g_out @ params["readout"].T).reshape(batch, n, f_last).transpose(1, 0, 2)
    else:
        gen = trace.inputs[-1]
        readout = params["readout"]
        g_nodes = g_out.T[:, :, None]
        grads["readout"] = gen.reshape(-1, f_last).T @ g_nodes.reshape(-1, 1)
        dA = np.zeros((n, batch, f_last))
        dA[list(spec.generator_buses)] = g_nodes * readout[:, 0]

    w = trace.gso_w
    for layer in range(n_layers, 0, -1):
        taps = params[f"conv{layer}"]
        k, f_in, f_out = taps.shape
        dZ = _activation_grad(spec.activation, trace.pre[layer - 1], trace.post[layer - 1], dA)
        S = trace.inputs[layer - 1]
        dZ2 = dZ.reshape(-1, f_out)
        grads[f"conv{layer}"] = (S.reshape(-1, k * f_in).T @ dZ2).reshape(k, f_in, f_out)
        if spec.bias:
            grads[f"bias{layer}"] = dZ2.sum(axis=0)
        if layer > 1:
            dS = (dZ2 @ taps.reshape(k * f_in, f_out).T).reshape(n, batch, k * f_in)
            acc = dS[:, :, (k - 1) * f_in:].reshape(n, -1)
            for j in range(k - 2, -1, -1):
                acc = w.T @ acc + dS[:, :, j * f_in:(j + 1) * f_in].reshape(n, -1)
            dA = acc.reshape(n, batch, f_in)
    return {k: grads[k] for k in params}


@dataclass
class Standardizer:
    """Per-feature input statistics and scalar target statistics."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    @classmethod
    def fit(cls, X, Y) -> "Standardizer":
        X = np.asarray(X, dtype=float).reshape(-1, 4)
        Y = np.asarray(Y, dtype=float)
        x_std = X.std(axis=0)
        x_std[x_std == 0] = 1.0
        y_std = float(Y.std()) or 1.0
        return cls(X.mean(axis=0), x_std, float(Y.mean()), y_std)

    @classmethod
    def identity(cls) -> "Standardizer":
        return cls(np.zeros(4), np.ones(4), 0.0, 1.0)

    def inputs(self, X):
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_std

    def targets(self, Y):
        return (np.asarray(Y, dtype=float) - self.y_mean) / self.y_std

    def outputs(self, Y_std):
        return np.asarray(Y_std) * self.y_std + self.y_mean

    def to_dict(self) -> dict:
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.array(d["x_mean"], dtype=float), np.array(d["x_std"], dtype=float),
                   float(d["y_mean"]), float(d["y_std"]))


@dataclass
class Model:
    """A trained predictor: spec, parameters, standardization and GSO."""

    spec: ModelSpec
    params: dict
    standardizer: Standardizer
    gso: Gso | None = None

    def predict(self, X):
        """Generator powers (per-unit) from raw state matrices."""
        out = forward(self.spec, self.params, self.standardizer.inputs(X), self.gso)
        return self.standardizer.outputs(out)


CHECKPOINT_SCHEMA = "gnnopf.checkpoint/1"


def save_model(model: Model, path, meta: dict | None = None) -> None:
    """Persist a model: spec, standardization and GSO settings in the header, tensors as arrays."""
    from . import container

    header = {"spec": model.spec.to_dict(), "standardizer": model.standardizer.to_dict(), "extra": meta or {}}
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    if model.gso is not None:
        g = model.gso
        header["gso"] = {"kernel_k": g.kernel_k, "threshold_omega": g.threshold_omega, "normalized": g.normalized}
        arrays["gso/w"] = g.w
    container.write(path, CHECKPOINT_SCHEMA, header, arrays)


def load_model(path) -> Model:
    from . import container

    header, arrays = container.read(path, CHECKPOINT_SCHEMA)
    spec = ModelSpec.from_dict(header["spec"])
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    expected = param_shapes(spec)
    if {k: tuple(v.shape) for k, v in params.items()} != {k: tuple(s) for k, s in expected.items()}:
        raise ContractError("checkpoint tensors do not match the stored spec")
    params = {k: params[k] for k in expected}
    gso = None
    if "gso" in header:
        gso = Gso(arrays["gso/w"], **header["gso"])
    return Model(spec, params, Standardizer.from_dict(header["standardizer"]), gso)
