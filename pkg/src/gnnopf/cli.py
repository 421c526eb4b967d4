"""Command-line interface: ``gnnopf {datagen,train,eval,bench,case validate}``.

Every command accepts ``--config FILE`` (a JSON object of run settings) and
explicit flags; a flag given on the command line overrides the file. Output
files go to ``--output-dir`` (default ``.``), which the environment variable
``GNNOPF_OUTPUT_DIR`` overrides.

Exit codes: 0 success, 2 input error, 3 state/compatibility error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .datagen import generate_dataset, load_dataset, save_dataset, export_csv
from .errors import CaseParseError, CaseValidationError, ContractError, DatasetError, TrainingError
from .evalbench import (ArchitectureResult, EvalReport, acopf_oracle, compile_predictor, relative_rmse,
                        timing_bench)
from .graph_signal import build_gso
from .grid_case import bundled_case, load_case
from .models import ARCHITECTURES, Model, ModelSpec, load_model, save_model
from .opf import check_feasibility, solve_acopf, solve_dcopf
from .training import TrainConfig, split_dataset, train

OUTPUT_ENV = "GNNOPF_OUTPUT_DIR"
EXIT_OK, EXIT_INPUT, EXIT_STATE, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("gnnopf")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclasses.dataclass
class RunConfig:
    """Resolved settings for one invocation. Paths are absolute after :meth:`resolve`."""

    case: str | None = None
    dataset: str | None = None
    architecture: str | None = None
    n_samples: int = 2000
    workers: int = 1
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 100
    batch_size: int = 128
    split_fraction: float = 0.8
    kernel_k: float | None = None
    threshold_omega: float = 0.01
    normalize_gso: bool = False
    activation: str = "tanh"
    output_dir: str = "."
    seed: int = 0

    @classmethod
    def from_sources(cls, config_path, overrides: dict) -> "RunConfig":
        values = {}
        if config_path:
            try:
                values = json.loads(Path(config_path).read_text())
            except OSError as exc:
                raise CliError(EXIT_INPUT, f"cannot read config {config_path}: {exc.strerror}") from None
            except json.JSONDecodeError as exc:
                raise CliError(EXIT_INPUT, f"config {config_path} is not valid JSON: {exc}") from None
            if not isinstance(values, dict):
                raise CliError(EXIT_INPUT, f"config {config_path} must hold a JSON object")
            unknown = set(values) - {f.name for f in dataclasses.fields(cls)}
            if unknown:
                raise CliError(EXIT_INPUT, f"unknown config keys: {', '.join(sorted(unknown))}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        try:
            cfg = cls(**values)
        except TypeError as exc:
            raise CliError(EXIT_INPUT, str(exc)) from None
        return cfg.resolve()

    def resolve(self) -> "RunConfig":
        env = os.environ.get(OUTPUT_ENV)
        if env:
            self.output_dir = env
        self.output_dir = str(Path(self.output_dir).resolve())
        if self.case and not _is_bundled(self.case):
            self.case = str(Path(self.case).resolve())
        if self.dataset:
            self.dataset = str(Path(self.dataset).resolve())
        return self

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(self.learning_rate, self.beta1, self.beta2, self.epsilon, self.epochs,
                               self.batch_size, self.split_fraction, self.seed)
        except ContractError as exc:
            raise CliError(EXIT_INPUT, str(exc)) from None

    def output(self, name: str | None, default: str) -> Path:
        path = Path(self.output_dir) / (name or default) if not (name and Path(name).is_absolute()) else Path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path


def _is_bundled(name: str) -> bool:
    return name in ("ieee30", "ieee118")


def _load_case(cfg: RunConfig):
    if not cfg.case:
        raise CliError(EXIT_INPUT, "no case given (use --case)")
    if _is_bundled(cfg.case):
        return bundled_case(cfg.case)
    if not Path(cfg.case).is_file():
        raise CliError(EXIT_INPUT, f"case file not found: {cfg.case}")
    return load_case(cfg.case)


def _load_dataset(cfg: RunConfig):
    if not cfg.dataset:
        raise CliError(EXIT_INPUT, "no dataset given (use --dataset)")
    if not Path(cfg.dataset).is_file():
        raise CliError(EXIT_INPUT, f"dataset file not found: {cfg.dataset}")
    return load_dataset(cfg.dataset)


def _gso(cfg: RunConfig, case):
    return build_gso(case, cfg.kernel_k, cfg.threshold_omega, cfg.normalize_gso)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_datagen(args, cfg: RunConfig) -> int:
    case = _load_case(cfg)
    if cfg.n_samples < 1:
        raise CliError(EXIT_INPUT, "--n must be at least 1")
    out = cfg.output(args.out, f"{case.name}_n{cfg.n_samples}_s{cfg.seed}.bin")
    dataset = generate_dataset(case, cfg.n_samples, cfg.seed, workers=cfg.workers)
    save_dataset(dataset, out)
    if args.csv:
        export_csv(dataset, cfg.output(args.csv, "dataset.csv"))
    stats = dataset.stats
    _write_json(out.with_suffix(".log.json"), {"dataset": str(out), "case": case.name, "seed": cfg.seed, **stats})
    print(f"wrote {len(dataset)} samples to {out}")
    print(f"attempts {stats['attempts']}, acceptance rate {stats['acceptance_rate']:.4f}, "
          "rejections " + ", ".join(f"{k}={v}" for k, v in stats["rejected"].items()))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    if cfg.architecture is None:
        raise CliError(EXIT_INPUT, f"--arch is required; choose from {', '.join(ARCHITECTURES)}")
    dataset = _load_dataset(cfg)
    case = dataset.case
    if cfg.case:
        expected = _load_case(cfg)
        if expected != case:
            raise CliError(EXIT_STATE, f"dataset {cfg.dataset} was generated for a different case than {cfg.case}")
    try:
        spec = ModelSpec(cfg.architecture, case.n_buses, case.selection.generator_buses, activation=cfg.activation)
    except ContractError as exc:
        raise CliError(EXIT_STATE, str(exc)) from None
    config = cfg.train_config()
    model, history = train(dataset.x, dataset.p_star, spec, config, _gso(cfg, case))
    out = cfg.output(args.out, f"{cfg.architecture}_s{cfg.seed}.ckpt")
    save_model(model, out, {"dataset": cfg.dataset, "case_id": case.name, "train": dataclasses.asdict(config)})
    history.to_csv(out.with_suffix(".history.csv"))
    final = history.train_loss[-1] if len(history) else history.initial_train_loss
    print(f"wrote checkpoint {out}; train loss {history.initial_train_loss:.6g} -> {final:.6g}")
    if len(history):
        print(f"final test metric {history.test_metric[-1]:.6f}")
    return EXIT_OK


def _load_checkpoint(path) -> Model:
    if not Path(path).is_file():
        raise CliError(EXIT_STATE, f"checkpoint not found: {path}")
    try:
        return load_model(path)
    except (DatasetError, ContractError) as exc:
        raise CliError(EXIT_STATE, f"unusable checkpoint {path}: {exc}") from None


def _check_compatible(model: Model, dataset, path) -> None:
    case = dataset.case
    if (model.spec.n_buses, model.spec.generator_buses) != (case.n_buses, case.selection.generator_buses):
        raise CliError(EXIT_STATE, f"checkpoint {path} does not match the dataset's grid")


def cmd_eval(args, cfg: RunConfig) -> int:
    dataset = _load_dataset(cfg)
    _, test_idx = split_dataset(len(dataset), cfg.split_fraction, cfg.seed)
    X, P = dataset.x[test_idx], dataset.p_star[test_idx]
    report = EvalReport(dataset.case_name, len(dataset), len(test_idx), cfg.seed,
                        settings={"split_fraction": cfg.split_fraction})
    if args.oracle_predictions:
        metric = relative_rmse(P, P)
        report.rows.append(ArchitectureResult("oracle", metric.sqrt_form, metric.standard, 0.0, 0.0, 0))
    if not args.checkpoint and not args.oracle_predictions:
        raise CliError(EXIT_INPUT, "give at least one --checkpoint")
    for path in args.checkpoint or []:
        model = _load_checkpoint(path)
        _check_compatible(model, dataset, path)
        preds = np.concatenate([model.predict(X[s:s + 512]) for s in range(0, len(X), 512)])
        metric = relative_rmse(preds, P)
        report.rows.append(ArchitectureResult(model.spec.architecture, metric.sqrt_form, metric.standard,
                                              None, None,
                                              int(sum(p.size for p in model.params.values()))))
    out = cfg.output(args.out, "report.json")
    out.write_text(report.to_json() + "\n")
    table = report.table()
    out.with_suffix(".txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    dataset = _load_dataset(cfg)
    model = _load_checkpoint(args.checkpoint)
    _check_compatible(model, dataset, args.checkpoint)
    _, test_idx = split_dataset(len(dataset), cfg.split_fraction, cfg.seed)
    idx = test_idx[:args.samples]
    predictor = compile_predictor(model, np.float32)
    oracle = acopf_oracle(dataset.case)
    summary = timing_bench(predictor, oracle, list(dataset.x[idx]),
                           list(zip(dataset.p_load[idx], dataset.q_load[idx])), repetitions=args.repetitions)
    result = {"case_id": dataset.case_name, "architecture": model.spec.architecture, "n_inputs": len(idx),
              "predictor_dtype": "float32",
              **summary.to_dict()}
    out = cfg.output(args.out, "bench.json")
    _write_json(out, result)
    print(f"model median {summary.model_median * 1e6:.1f} us, oracle median {summary.oracle_median * 1e3:.2f} ms, "
          f"speedup {summary.speedup:.0f}x")
    return EXIT_OK


def cmd_case_validate(args, cfg: RunConfig) -> int:
    case = _load_case(cfg)
    print(f"{case.name}: {case.n_buses} buses, {len(case.branches)} branches, {case.n_generators} generators: valid")
    if args.explain:
        dc = solve_dcopf(case, case.p_load_ref)
        if not dc.ok:
            raise CliError(EXIT_NUMERIC, f"DCOPF at reference load: {dc.status}")
        sol = solve_acopf(case, case.p_load_ref, case.q_load_ref, dc)
        report = check_feasibility(case, sol.state)
        body = {"acopf_status": sol.status, "cost": sol.cost, "feasibility": report.to_dict()}
        print(json.dumps(body, indent=2, sort_keys=True))
        if not sol.ok:
            return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common(p):
    p.add_argument("--config", help="JSON file with run settings; flags override it")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--output-dir", dest="output_dir",
                   help=f"directory for outputs (default '.'; ${OUTPUT_ENV} overrides)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gnnopf", description=__doc__.split("\n\n")[0],
        epilog=f"Exit codes: 0 ok, 2 input error, 3 state/compat error, 4 numerical failure. "
               f"${OUTPUT_ENV} overrides --output-dir.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate an imitation dataset by solving ACOPF on random loads")
    _common(p)
    p.add_argument("--case", help="case JSON file or bundled name (ieee30, ieee118)")
    p.add_argument("--n", dest="n_samples", type=int, help="number of accepted samples (default 2000)")
    p.add_argument("--workers", type=int, help="parallel worker processes (default 1)")
    p.add_argument("--out", help="dataset file name (relative to the output dir)")
    p.add_argument("--csv", help="also write a flat CSV export")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train one architecture; writes a checkpoint and a history CSV")
    _common(p)
    p.add_argument("--arch", dest="architecture", choices=ARCHITECTURES, help="architecture to train")
    p.add_argument("--dataset", help="dataset file from 'datagen'")
    p.add_argument("--case", help="optional case the dataset must match")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--split", dest="split_fraction", type=float, help="training fraction (default 0.8)")
    p.add_argument("--activation", choices=("relu", "tanh"))
    p.add_argument("--kernel-k", dest="kernel_k", type=float, help="GSO kernel width (default 1/mean|z|^2)")
    p.add_argument("--omega", dest="threshold_omega", type=float, help="GSO threshold (default 0.01)")
    p.add_argument("--normalize-gso", dest="normalize_gso", action="store_const", const=True,
                   help="divide the GSO by its spectral radius (default: raw kernel weights)")
    p.add_argument("--out", help="checkpoint file name")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints on the held-out split")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--checkpoint", action="append", help="checkpoint file (repeatable)")
    p.add_argument("--split", dest="split_fraction", type=float)
    p.add_argument("--oracle-predictions", action="store_true",
                   help="add a row that scores the targets against themselves")
    p.add_argument("--out", help="report JSON name; a .txt table is written beside it")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time single-sample inference against the ACOPF oracle")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", dest="split_fraction", type=float)
    p.add_argument("--samples", type=int, default=50, help="test inputs to time (default 50)")
    p.add_argument("--repetitions", type=int, default=10, help="passes over the inputs for the model (>= 10)")
    p.add_argument("--out", help="timing JSON name")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("case", help="case utilities")
    case_sub = p.add_subparsers(dest="case_command", required=True)
    v = case_sub.add_parser("validate", help="parse and validate a case file")
    _common(v)
    v.add_argument("--case", required=True)
    v.add_argument("--explain", action="store_true",
                   help="solve ACOPF at reference load and print the feasibility report as JSON")
    v.set_defaults(func=cmd_case_validate)
    return parser


_CONFIG_FLAGS = {f.name for f in dataclasses.fields(RunConfig)}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k in _CONFIG_FLAGS}
    stage = args.command if args.command != "case" else "case validate"
    try:
        cfg = RunConfig.from_sources(args.config, overrides)
        return args.func(args, cfg)
    except CliError as exc:
        print(f"gnnopf {stage}: error: {exc}", file=sys.stderr)
        return exc.code
    except (CaseParseError, CaseValidationError) as exc:
        print(f"gnnopf {stage}: invalid case: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DatasetError as exc:
        print(f"gnnopf {stage}: dataset error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except ContractError as exc:
        print(f"gnnopf {stage}: incompatible inputs: {exc}", file=sys.stderr)
        return EXIT_STATE
    except (TrainingError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"gnnopf {stage}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
