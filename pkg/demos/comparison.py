"""Train the four architectures on one IEEE-30 dataset and print the comparison table.

    python3 demos/comparison.py [n_samples] [epochs]

The full setting (2000 samples, 50 epochs) takes several minutes per
architecture on one core; the global MLP is the slowest.
"""

import sys

from gnnopf import TrainConfig, build_gso, bundled_case, generate_dataset, run_comparison


def main(n_samples=2000, epochs=50):
    dataset = generate_dataset(bundled_case("ieee30"), n_samples, seed=7)
    config = TrainConfig(learning_rate=1e-3, epochs=epochs, batch_size=128, split_fraction=0.8, seed=7)
    report = run_comparison(dataset, config, gso=build_gso(dataset.case, normalize=True), activation="tanh")
    print(report.table())


if __name__ == "__main__":
    main(*(int(a) for a in sys.argv[1:3]))
