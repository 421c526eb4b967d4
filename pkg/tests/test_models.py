import numpy as np
import pytest

from gnnopf.errors import ContractError
from gnnopf.graph_signal import Gso, build_gso, k_hop_set
from gnnopf.grid_case import bundled_case
from gnnopf.models import (ARCHITECTURES, Model, ModelSpec, Standardizer, backward, count_params, forward,
                           init_params, load_model, param_shapes, save_model)

from _helpers import fd_relative_error, naive_forward, path_with_chords, random_gso

GENS = (1, 4, 6)


def spec_for(arch, n=8, gens=GENS, **kw):
    return ModelSpec(arch, n, gens, **kw)


def test_same_seed_same_params():
    spec = spec_for("local_gnn")
    a, b = init_params(spec, 3), init_params(spec, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = init_params(spec, 4)
    assert not np.array_equal(a["conv1"], c["conv1"])


def test_local_gnn_parameter_count_is_size_independent():
    for n in (8, 30, 118):
        spec = spec_for("local_gnn", n=n)
        assert count_params(init_params(spec, 0)) == 4 * 4 * 128 + 4 * 128 * 64 + 64 * 1 == 34_880


def test_global_gnn_readout_size():
    case = bundled_case("ieee30")
    spec = ModelSpec("global_gnn", 30, case.selection.generator_buses)
    shapes = param_shapes(spec)
    assert np.prod(shapes["readout"]) == 64 * 30 * case.n_generators
    conv = 4 * 4 * 128 + 4 * 128 * 64
    assert count_params(init_params(spec, 0)) == conv + 64 * 30 * 6


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_zero_params_give_zero_output(arch):
    rng = np.random.default_rng(0)
    spec = spec_for(arch)
    params = {k: np.zeros_like(v) for k, v in init_params(spec, 0).items()}
    out = forward(spec, params, rng.normal(size=(8, 4)), random_gso(8, rng))
    assert out.shape == (3,) and not out.any()


def test_local_gnn_with_only_first_taps_is_local_mlp():
    rng = np.random.default_rng(1)
    gnn = spec_for("local_gnn")
    mlp = spec_for("local_mlp")
    p = init_params(gnn, 0)
    for name in ("conv1", "conv2"):
        p[name][1:] = 0.0
    q = {"conv1": p["conv1"][:1], "conv2": p["conv2"][:1], "readout": p["readout"]}
    X = rng.normal(size=(5, 8, 4))
    np.testing.assert_array_equal(forward(gnn, p, X, random_gso(8, rng)), forward(mlp, q, X))


@pytest.mark.parametrize("arch", ARCHITECTURES)
@pytest.mark.parametrize("bias", [False, True])
@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_forward_matches_naive_oracle(arch, bias, activation):
    rng = np.random.default_rng(2)
    spec = spec_for(arch, bias=bias, activation=activation)
    params = init_params(spec, 5)
    if bias:
        params = {k: v + rng.normal(scale=0.1, size=v.shape) if k.startswith("bias") else v
                  for k, v in params.items()}
    gso = random_gso(8, rng)
    X = rng.normal(size=(6, 8, 4))
    batch = forward(spec, params, X, gso)
    for b in range(6):
        np.testing.assert_allclose(batch[b], naive_forward(spec, params, X[b], gso.w), rtol=0, atol=1e-12)
        np.testing.assert_allclose(forward(spec, params, X[b], gso), batch[b], rtol=0, atol=1e-12)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_zero_upstream_gives_zero_gradients(arch):
    rng = np.random.default_rng(3)
    spec = spec_for(arch)
    params = init_params(spec, 0)
    _, trace = forward(spec, params, rng.normal(size=(2, 8, 4)), random_gso(8, rng), return_trace=True)
    grads = backward(spec, params, trace, np.zeros((2, 3)))
    assert set(grads) == set(params)
    assert all(not g.any() for g in grads.values())


def test_single_layer_gradient_hand_derivation():
    # 3-node graph, every node a generator, unit readout, positive pre-activations:
    # L = sum_n sum_f (sum_k W^k X H_k)[n, f]  =>  dL/dH_k = (W^k X)^T 1
    w = np.array([[0.0, 0.5, 0.0], [0.5, 0.0, 0.2], [0.0, 0.2, 0.0]])
    spec = ModelSpec("local_gnn", 3, (0, 1, 2), layer_features=(4, 2), taps_per_layer=(3,))
    X = np.abs(np.random.default_rng(4).normal(size=(3, 4))) + 0.1
    params = {"conv1": np.full((3, 4, 2), 0.3), "readout": np.ones((2, 1))}
    _, trace = forward(spec, params, X, Gso(w), return_trace=True)
    grads = backward(spec, params, trace, np.ones(3))
    for k in range(3):
        col = np.linalg.matrix_power(w, k) @ X
        expected = np.repeat((col.T @ np.ones(3))[:, None], 2, axis=1)
        np.testing.assert_allclose(grads["conv1"][k], expected, atol=1e-14)
    np.testing.assert_allclose(grads["readout"][:, 0], trace.post[0].sum(axis=(0, 1)), atol=1e-14)


@pytest.mark.parametrize("arch", ARCHITECTURES)
@pytest.mark.parametrize("bias", [False, True])
def test_gradients_match_finite_differences(arch, bias):
    rng = np.random.default_rng(5)
    spec = spec_for(arch, bias=bias, activation="tanh")
    params = init_params(spec, 1)
    X = rng.normal(size=(3, 8, 4))
    Y = rng.normal(size=(3, 3))
    assert fd_relative_error(spec, params, X, Y, random_gso(8, rng), rng, entries=8) < 1e-5


def _equivariance_error(arch, rng):
    n = 10
    gso = random_gso(n, rng)
    spec = spec_for(arch, n=n, gens=(0, 3, 7))
    params = init_params(spec, int(rng.integers(1000)))
    X = rng.normal(size=(4, n, 4))
    perm = rng.permutation(n)
    out = forward(spec, params, X, gso)
    out_perm = forward(spec.permuted(perm), params, X[:, perm], gso.permuted(perm))
    return np.max(np.abs(out - out_perm))


@pytest.mark.parametrize("arch", ["local_gnn", "local_mlp"])
def test_permutation_equivariance(arch):
    rng = np.random.default_rng(6)
    assert max(_equivariance_error(arch, rng) for _ in range(5)) <= 1e-10


def test_local_gnn_receptive_field_is_six_hops():
    rng = np.random.default_rng(7)
    n = 20
    gso = path_with_chords(n, rng, chords=0)
    spec = ModelSpec("local_gnn", n, (0, 19), activation="tanh")
    params = init_params(spec, 0)
    X = rng.normal(size=(n, 4))
    base = forward(spec, params, X, gso)
    near = k_hop_set(gso, 0, 6)
    assert near == set(range(7))
    Z = X.copy()
    Z[7:13] += 5.0  # beyond both generators' neighbourhoods
    assert np.array_equal(forward(spec, params, Z, gso), base)
    Z = X.copy()
    Z[6] += 1.0  # exactly six hops from generator 0
    changed = forward(spec, params, Z, gso)
    assert changed[0] != base[0] and changed[1] == base[1]


def test_contracts():
    with pytest.raises(ContractError):
        ModelSpec("cnn", 8, GENS)
    with pytest.raises(ContractError):
        ModelSpec("local_mlp", 8, GENS, taps_per_layer=(2, 1))
    with pytest.raises(ContractError):
        ModelSpec("local_gnn", 8, (9,))
    spec = spec_for("local_gnn")
    with pytest.raises(ContractError):
        forward(spec, init_params(spec, 0), np.zeros((8, 4)))  # missing GSO
    with pytest.raises(ContractError):
        forward(spec, init_params(spec, 0), np.zeros((7, 4)), random_gso(8, np.random.default_rng(0)))


def test_spec_round_trip():
    spec = spec_for("global_gnn", activation="tanh", bias=True)
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_standardizer():
    rng = np.random.default_rng(8)
    X = rng.normal(3.0, 2.0, size=(50, 8, 4))
    X[:, :, 1] = 0.0  # a constant feature keeps unit scale
    Y = rng.normal(1.0, 0.5, size=(50, 3))
    std = Standardizer.fit(X, Y)
    Xs = std.inputs(X)
    np.testing.assert_allclose(Xs.reshape(-1, 4).mean(axis=0), 0.0, atol=1e-12)
    assert std.x_std[1] == 1.0
    np.testing.assert_allclose(std.outputs(std.targets(Y)), Y, atol=1e-14)
    assert Standardizer.from_dict(std.to_dict()).to_dict() == std.to_dict()


def test_checkpoint_round_trip(tmp_path):
    case = bundled_case("ieee30")
    gso = build_gso(case, normalize=True)
    spec = ModelSpec("local_gnn", 30, case.selection.generator_buses)
    rng = np.random.default_rng(9)
    model = Model(spec, init_params(spec, 0), Standardizer.fit(rng.normal(size=(5, 30, 4)),
                                                             rng.normal(size=(5, 6))), gso)
    path = tmp_path / "m.ckpt"
    save_model(model, path)
    again = load_model(path)
    assert again.spec == spec
    assert all(np.array_equal(again.params[k], model.params[k]) for k in model.params)
    assert np.array_equal(again.gso.w, gso.w) and again.gso.normalized
    X = rng.normal(size=(30, 4))
    assert np.array_equal(again.predict(X), model.predict(X))
