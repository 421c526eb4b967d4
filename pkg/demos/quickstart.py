"""Small end-to-end run on IEEE-30: data, one local GNN, evaluation, timing.

    python3 demos/quickstart.py [n_samples] [epochs]
"""

import sys

import numpy as np

from gnnopf import ModelSpec, TrainConfig, build_gso, bundled_case, compile_predictor, evaluate_model
from gnnopf import generate_dataset, train
from gnnopf.evalbench import acopf_oracle, timing_bench
from gnnopf.training import split_dataset


def main(n_samples=200, epochs=20):
    case = bundled_case("ieee30")
    dataset = generate_dataset(case, n_samples, seed=0)
    print(f"{len(dataset)} samples, acceptance rate {dataset.stats['acceptance_rate']:.3f}")

    gso = build_gso(case, normalize=True)
    spec = ModelSpec("local_gnn", case.n_buses, case.selection.generator_buses, activation="tanh")
    config = TrainConfig(epochs=epochs, batch_size=32, seed=0)
    model, history = train(dataset.x, dataset.p_star, spec, config, gso)
    print(f"train loss {history.initial_train_loss:.4f} -> {history.train_loss[-1]:.4f}")

    _, test = split_dataset(len(dataset), config.split_fraction, config.seed)
    metric = evaluate_model(model, dataset.x[test], dataset.p_star[test])
    print(f"test relative RMSE {metric.sqrt_form:.4f} (plain ratio {metric.standard:.4f})")

    fast = compile_predictor(model, np.float32)
    timing = timing_bench(fast, acopf_oracle(case), list(dataset.x[test[:10]]),
                          list(zip(dataset.p_load[test[:10]], dataset.q_load[test[:10]])))
    print(f"model {timing.model_median * 1e6:.1f} us, ACOPF {timing.oracle_median * 1e3:.1f} ms, "
          f"speedup {timing.speedup:.0f}x")


if __name__ == "__main__":
    main(*(int(a) for a in sys.argv[1:3]))
