import json

import numpy as np
import pytest

from gnnopf.cli import main
from gnnopf.datagen import load_dataset
from gnnopf.models import ModelSpec, init_params, load_model
from gnnopf.training import split_dataset


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["datagen", "--case", "ieee30", "--n", "20", "--seed", "7", "--output-dir", str(d),
                 "--out", "d.bin"]) == 0
    return d


def test_datagen_writes_dataset_and_log(workdir, capsys):
    assert (workdir / "d.bin").is_file()
    log = json.loads((workdir / "d.log.json").read_text())
    assert log["accepted"] == 20 and "acceptance_rate" in log and set(log["rejected"]) == {"dcopf", "power_flow",
                                                                                              "acopf"}


def test_datagen_is_reproducible(workdir, tmp_path):
    assert main(["datagen", "--case", "ieee30", "--n", "20", "--seed", "7", "--workers", "2",
                 "--output-dir", str(tmp_path), "--out", "d.bin"]) == 0
    assert (tmp_path / "d.bin").read_bytes() == (workdir / "d.bin").read_bytes()


def test_single_sample_datagen(tmp_path):
    assert main(["datagen", "--case", "ieee30", "--n", "1", "--output-dir", str(tmp_path), "--out", "one.bin"]) == 0
    assert len(load_dataset(tmp_path / "one.bin")) == 1


def test_missing_case_file(tmp_path, capsys):
    assert main(["datagen", "--case", str(tmp_path / "nope.json"), "--output-dir", str(tmp_path)]) == 2
    assert "nope.json" in capsys.readouterr().err


def test_invalid_case_file(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"base_mva": 100, "buses": [], "branches": [], "generators": []}')
    assert main(["case", "validate", "--case", str(bad)]) == 2
    assert "min_buses" in capsys.readouterr().err


def test_case_validate_explain(capsys):
    assert main(["case", "validate", "--case", "ieee30", "--explain"]) == 0
    out = capsys.readouterr().out
    report = json.loads(out[out.index("{"):])
    assert report["acopf_status"] == "optimal" and report["feasibility"]["feasible"]


def test_unknown_architecture_lists_choices(workdir, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--arch", "transformer", "--dataset", str(workdir / "d.bin")])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert all(name in err for name in ("global_gnn", "local_gnn", "global_mlp", "local_mlp"))


def test_zero_epochs_checkpoint_is_initialization(workdir, tmp_path):
    assert main(["train", "--arch", "local_gnn", "--dataset", str(workdir / "d.bin"), "--epochs", "0",
                 "--seed", "3", "--output-dir", str(tmp_path), "--out", "m.ckpt"]) == 0
    model = load_model(tmp_path / "m.ckpt")
    seed = int(np.random.SeedSequence(3).spawn(2)[0].generate_state(1)[0])
    init = init_params(model.spec, seed)
    assert all(np.array_equal(model.params[k], init[k]) for k in init)
    assert (tmp_path / "m.history.csv").read_text().count("\n") == 2


def test_train_eval_bench_round(workdir, tmp_path, capsys):
    common = ["--dataset", str(workdir / "d.bin"), "--seed", "7", "--output-dir", str(tmp_path)]
    for arch in ("local_gnn", "local_mlp"):
        assert main(["train", "--arch", arch, "--epochs", "2", "--batch-size", "8", "--out", f"{arch}.ckpt"]
                    + common) == 0
    again = tmp_path / "again"
    assert main(["train", "--arch", "local_gnn", "--epochs", "2", "--batch-size", "8", "--out", "local_gnn.ckpt",
                 "--dataset", str(workdir / "d.bin"), "--seed", "7", "--output-dir", str(again)]) == 0
    assert (again / "local_gnn.ckpt").read_bytes() == (tmp_path / "local_gnn.ckpt").read_bytes()

    assert main(["eval", "--checkpoint", str(tmp_path / "local_gnn.ckpt"), "--checkpoint",
                 str(tmp_path / "local_mlp.ckpt"), "--oracle-predictions", "--out", "r.json"] + common) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert [r["architecture"] for r in report["rows"]] == ["oracle", "local_gnn", "local_mlp"]
    assert report["rows"][0]["metric_sqrt"] == 0.0 and report["rows"][0]["metric_standard"] == 0.0
    _, test_idx = split_dataset(20, 0.8, 7)
    assert report["n_test"] == len(test_idx)
    assert "Local GNN" in (tmp_path / "r.txt").read_text()

    assert main(["bench", "--checkpoint", str(tmp_path / "local_gnn.ckpt"), "--samples", "3"] + common) == 0
    bench = json.loads((tmp_path / "bench.json").read_text())
    assert bench["speedup"] > 1 and bench["repetitions"] == 10


def test_missing_checkpoint_is_state_error(workdir, capsys):
    assert main(["eval", "--dataset", str(workdir / "d.bin"), "--checkpoint", "absent.ckpt"]) == 3
    assert "absent.ckpt" in capsys.readouterr().err


def test_dataset_case_mismatch(workdir, tmp_path):
    assert main(["train", "--arch", "local_mlp", "--dataset", str(workdir / "d.bin"), "--case", "ieee118",
                 "--epochs", "0", "--output-dir", str(tmp_path)]) == 3


def test_corrupt_dataset_is_state_error(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"GNNOPF\x00\x01garbage")
    assert main(["train", "--arch", "local_mlp", "--dataset", str(bad), "--epochs", "0"]) == 3


def test_config_file_and_flag_precedence(workdir, tmp_path, monkeypatch):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"architecture": "local_mlp", "dataset": str(workdir / "d.bin"), "epochs": 0,
                               "seed": 1, "output_dir": str(tmp_path / "from_config")}))
    out_env = tmp_path / "from_env"
    monkeypatch.setenv("GNNOPF_OUTPUT_DIR", str(out_env))
    assert main(["train", "--config", str(cfg), "--arch", "local_gnn", "--out", "m.ckpt"]) == 0
    model = load_model(out_env / "m.ckpt")
    assert model.spec.architecture == "local_gnn"
    assert isinstance(model.spec, ModelSpec)
    assert not (tmp_path / "from_config").exists()


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"learning_rat": 0.1}))
    assert main(["train", "--config", str(cfg), "--arch", "local_gnn"]) == 2
    assert "learning_rat" in capsys.readouterr().err


def test_help_mentions_every_command(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for cmd in ("datagen", "train", "eval", "bench", "case"):
        assert cmd in out
    assert "GNNOPF_OUTPUT_DIR" in out


def test_gso_is_raw_unless_normalisation_is_requested(workdir, tmp_path):
    common = ["--arch", "local_gnn", "--dataset", str(workdir / "d.bin"), "--epochs", "0", "--output-dir",
              str(tmp_path)]
    assert main(["train", "--out", "raw.ckpt"] + common) == 0
    assert main(["train", "--out", "norm.ckpt", "--normalize-gso"] + common) == 0
    raw, norm = load_model(tmp_path / "raw.ckpt"), load_model(tmp_path / "norm.ckpt")
    assert not raw.gso.normalized and norm.gso.normalized
    assert np.max(np.abs(np.linalg.eigvalsh(norm.gso.w))) == pytest.approx(1.0)
    assert raw.spec.activation == "tanh"
