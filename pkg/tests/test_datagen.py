import hashlib

import numpy as np
import pytest

from gnnopf import container
from gnnopf.datagen import (Rejection, Sample, acopf_state, attempt_rng, export_csv, generate_dataset,
                            generate_sample, invariant_violations, load_dataset, sample_loads, save_dataset)
from gnnopf.electrical import StateMatrix, build_admittance, injections
from gnnopf.errors import DatasetError
from gnnopf.grid_case import bundled_case
from gnnopf.opf import check_feasibility, evaluate_cost

from _helpers import bus, gen, line, make_case, two_bus


@pytest.fixture(scope="module")
def ieee30():
    return bundled_case("ieee30")


@pytest.fixture(scope="module")
def small_dataset(ieee30):
    return generate_dataset(ieee30, 12, seed=11)


def test_sample_loads_unit_reference():
    case = make_case([bus(0, "slack", p=1.0, q=0.0), bus(1, p=1.0, q=2.0)], [line(0, 1)], [gen(0)])
    rng = np.random.default_rng(0)
    draws = np.array([sample_loads(case, rng) for _ in range(200)])
    p, q = draws[:, 0], draws[:, 1]
    assert np.all((p >= 0.9) & (p <= 1.1))
    assert np.all(q[:, 0] == 0.0)
    assert np.all((q[:, 1] >= 1.8) & (q[:, 1] <= 2.2))


def test_sample_loads_uniform_law():
    case = make_case([bus(0, "slack", p=1.0), bus(1)], [line(0, 1)], [gen(0)])
    rng = np.random.default_rng(1)
    draws = np.array([sample_loads(case, rng)[0][0] for _ in range(100_000)])
    assert abs(draws.mean() - 1.0) <= 0.003
    assert draws.min() >= 0.9 and draws.max() <= 1.1


def test_tiny_case_sample_improves_on_warm_start():
    case = two_bus(r=0.02, x=0.2, p_load=0.4, q_load=0.1, cost=(2.0, 1.0, 0.0))
    sample = generate_sample(case, np.random.default_rng(2))
    assert isinstance(sample, Sample)
    x = sample.x
    dispatch = x[case.selection.array, 2] + sample.p_load[case.selection.array]
    assert sample.meta["ac_cost"] <= evaluate_cost(case, dispatch) + 1e-9


def test_insufficient_capacity_rejected_at_dcopf():
    case = two_bus(p_load=1.0, p_max=0.85)
    result = generate_sample(case, np.random.default_rng(3))
    assert isinstance(result, Rejection) and result.stage == "dcopf"


def test_accepted_samples_are_feasible(ieee30):
    Y = build_admittance(ieee30)
    accepted = 0
    for i in range(100):
        s = generate_sample(ieee30, attempt_rng(5, i), Y)
        if isinstance(s, Rejection):
            continue
        accepted += 1
        v, d = s.meta["acopf_v"], s.meta["acopf_delta"]
        p, q = injections(v, d, Y)
        report = check_feasibility(ieee30, StateMatrix(v, d, p, q), 1e-6, s.p_load, s.q_load, Y)
        assert report.feasible, report.to_json()
    assert accepted >= 90


def test_dataset_invariants(small_dataset):
    d = small_dataset
    assert len(d) == 12 and d.n_buses == 30 and d.n_generators == 6
    stats = d.stats
    assert stats["accepted"] == 12 and stats["attempts"] >= 12
    assert set(stats["rejected"]) == {"dcopf", "power_flow", "acopf"}
    v = invariant_violations(d)
    assert v["pf_residual"].max() <= 1e-8
    assert v["acopf_feasibility"].max() <= 1e-6
    assert v["p_star_bounds"].max() == 0.0
    assert v["injection"].max() <= 1e-10
    assert v["load_bounds"].max() == 0.0


def test_single_sample_dataset(ieee30):
    assert len(generate_dataset(ieee30, 1, seed=0)) == 1


def test_worker_count_does_not_change_bytes(ieee30, tmp_path):
    a = generate_dataset(ieee30, 10, seed=4, workers=1)
    b = generate_dataset(ieee30, 10, seed=4, workers=3)
    save_dataset(a, tmp_path / "a.bin")
    save_dataset(b, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_round_trip(small_dataset, tmp_path):
    path = tmp_path / "d.bin"
    save_dataset(small_dataset, path)
    again = load_dataset(path)
    assert again.case == small_dataset.case and again.seed == 11
    for name in ("x", "p_star", "p_load", "q_load", "acopf_v", "ac_cost"):
        assert np.array_equal(getattr(again, name), getattr(small_dataset, name))
    assert again.stats == small_dataset.stats
    assert again.config == small_dataset.config
    save_dataset(again, tmp_path / "e.bin")
    assert (tmp_path / "e.bin").read_bytes() == path.read_bytes()


def test_hash_is_stable(ieee30, tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "a.bin")
    save_dataset(generate_dataset(ieee30, 12, seed=11), tmp_path / "b.bin")
    digest = [hashlib.sha256((tmp_path / f).read_bytes()).hexdigest() for f in ("a.bin", "b.bin")]
    assert digest[0] == digest[1]


def test_truncated_and_corrupted_files(small_dataset, tmp_path):
    path = tmp_path / "d.bin"
    save_dataset(small_dataset, path)
    raw = path.read_bytes()
    for cut in (5, 100, len(raw) // 2, len(raw) - 1):
        (tmp_path / "t.bin").write_bytes(raw[:cut])
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "t.bin")
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0xFF
    (tmp_path / "c.bin").write_bytes(bytes(flipped))
    with pytest.raises(DatasetError, match="checksum"):
        load_dataset(tmp_path / "c.bin")
    with pytest.raises(DatasetError, match="schema"):
        container.read(path, "gnnopf.checkpoint/1")


def test_acopf_state_rebuild(small_dataset):
    state = acopf_state(small_dataset, 0)
    assert check_feasibility(small_dataset.case, state, 1e-6, small_dataset.p_load[0],
                             small_dataset.q_load[0]).feasible


def test_csv_export(small_dataset, tmp_path):
    export_csv(small_dataset, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert len(lines) == 13
    assert lines[0].startswith("v_0,delta_0,p_0,q_0")


def test_subset_and_indexing(small_dataset):
    sub = small_dataset.subset([3, 1])
    assert len(sub) == 2
    assert np.array_equal(sub.x[0], small_dataset.x[3])
    s = small_dataset[1]
    assert np.array_equal(s.p_star, small_dataset.p_star[1])


def test_low_acceptance_aborts():
    case = two_bus(p_load=1.0, p_max=0.5)
    with pytest.raises(DatasetError, match="dcopf"):
        generate_dataset(case, 2, seed=0)
