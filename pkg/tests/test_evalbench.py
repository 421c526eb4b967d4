import numpy as np
import pytest

from gnnopf.datagen import generate_dataset
from gnnopf.evalbench import (EvalReport, compile_predictor, relative_rmse, run_comparison, time_calls,
                              timing_bench)
from gnnopf.graph_signal import build_gso
from gnnopf.grid_case import bundled_case
from gnnopf.models import ARCHITECTURES, Model, ModelSpec, Standardizer, init_params
from gnnopf.training import TrainConfig


@pytest.fixture(scope="module")
def tiny():
    return generate_dataset(bundled_case("ieee30"), 40, seed=3)


def test_perfect_predictions_score_zero():
    P = np.random.default_rng(0).uniform(0.1, 1, size=(5, 3))
    m = relative_rmse(P, P)
    assert (m.sqrt_form, m.standard, m.n_samples) == (0.0, 0.0, 5)


def test_error_equal_to_norm_scores_one():
    m = relative_rmse([[0.0, 0.0]], [[3.0, 4.0]])
    assert m.sqrt_form == 1.0 and m.standard == 1.0


def test_metric_forms():
    pred = np.array([[1.0, 1.0], [2.0, 0.0]])
    target = np.array([[1.0, 2.0], [2.0, 2.0]])
    ratios = np.array([1 / np.sqrt(5), 2 / np.sqrt(8)])
    m = relative_rmse(pred, target)
    assert m.sqrt_form == pytest.approx(np.mean(np.sqrt(ratios)))
    assert m.standard == pytest.approx(np.mean(ratios))


def test_zero_norm_targets_are_skipped():
    with pytest.warns(RuntimeWarning, match="skipped 1"):
        m = relative_rmse([[1.0], [1.0]], [[0.0], [2.0]])
    assert m.skipped == 1 and m.n_samples == 1


@pytest.mark.parametrize("arch", ["local_gnn", "local_mlp", "global_gnn"])
@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_compiled_predictor_matches_model(arch, activation, tiny):
    case = tiny.case
    spec = ModelSpec(arch, 30, case.selection.generator_buses, activation=activation)
    model = Model(spec, init_params(spec, 1), Standardizer.fit(tiny.x, tiny.p_star), build_gso(case, normalize=True))
    fast = compile_predictor(model)
    for X in tiny.x[:10]:
        np.testing.assert_allclose(fast(X), model.predict(X), rtol=0, atol=1e-12)


def test_model_against_itself_has_unit_speedup():
    fn = lambda x: np.linalg.norm(x @ x.T)  # noqa: E731
    inputs = [np.random.default_rng(i).normal(size=(60, 60)) for i in range(5)]
    summary = timing_bench(fn, fn, inputs, inputs, repetitions=20, oracle_repetitions=20)
    assert 0.5 <= summary.speedup <= 2.0
    assert summary.to_dict()["speedup"] == summary.speedup


def test_repetition_count_barely_moves_the_median():
    fn = lambda x: np.sort(x)  # noqa: E731
    inputs = [np.random.default_rng(i).normal(size=2000) for i in range(5)]
    short = np.median(time_calls(fn, inputs, 10))
    long = np.median(time_calls(fn, inputs, 100))
    assert 0.5 <= short / long <= 1.5


def test_timing_requires_ten_repetitions():
    with pytest.raises(ValueError):
        timing_bench(abs, abs, [1], [1], repetitions=5)


def test_comparison_report(tiny):
    cfg = TrainConfig(epochs=1, batch_size=16, seed=2)
    report = run_comparison(tiny, cfg, gso=build_gso(tiny.case, normalize=True))
    assert [r.architecture for r in report.rows] == list(ARCHITECTURES)
    assert report.n_test == 8
    again = EvalReport.from_json(report.to_json())
    assert again.to_dict() == report.to_dict()
    table = report.table().splitlines()
    assert len(table) == 3 + 4
    assert "mean sqrt ratio" in table[1] and "rel. error" in table[1]
    twice = run_comparison(tiny, cfg, gso=build_gso(tiny.case, normalize=True))
    assert twice.to_json() == report.to_json()
