import csv
import json

import numpy as np
import pytest

from sfb.cli import main
from sfb.envs.mnist import DATA_DIR_ENV, write_idx
from sfb.errors import ConfigError
from sfb.experiment import (
    METHODS,
    bundled_config_path,
    generate,
    load_config,
    parse_config,
    run,
    sweep,
)

TINY = """
name = "tiny"
seeds = 2

[dataset]
tag = "{tag}"
train = {train}
validation = {validation}
test = {test}
n_train = 400
n_validation = 200
n_test = 300

[train]
steps = 40
pretrain_steps = 10
hidden = [6]
width = 6
dim_S = 3
penalty = "{penalty}"
feature_activation = "identity"

[grid]
lambda_S = [10.0]
lambda_C = [0.5]
restarts = 1

[baselines]
erm_steps = 20
irm_lambda_S = [10.0]

[adaptation]
steps = [30, 60]

[sweep]
values = [0.1, 0.9]
"""


def tiny(tmp_path, tag="AC", train="[0.95, 0.7]", validation="0.6", test="0.1", penalty="irmv1", extra=""):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY.format(tag=tag, train=train, validation=validation, test=test, penalty=penalty) + extra)
    return path


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


class TestConfig:
    @pytest.mark.parametrize("name", ["ac", "cedd", "cmnist"])
    def test_bundled_configs_parse(self, name):
        cfg = load_config(name)
        assert cfg.name == name
        assert bundled_config_path(name).exists()

    def test_seed_count_expands(self, tmp_path):
        assert load_config(tiny(tmp_path)).seeds == [0, 1]

    def test_unknown_penalty_names_field(self, tmp_path):
        with pytest.raises(ConfigError) as info:
            load_config(tiny(tmp_path, penalty="fishr"))
        assert info.value.field == "train.penalty"

    @pytest.mark.parametrize("data, field", [
        ({"dataset": {"tag": "XYZ"}}, "dataset.tag"),
        ({"dataset": {}, "grid": {"lambda_Q": [1]}}, "grid.lambda_Q"),
        ({"dataset": {}, "widgets": {}}, "widgets"),
        ({"dataset": {}, "seeds": []}, "seeds"),
        ({}, "dataset"),
        ({"dataset": {}, "adaptation": {"learner": "forest"}}, "adaptation.learner"),
    ])
    def test_invalid(self, data, field):
        with pytest.raises(ConfigError) as info:
            parse_config(data)
        assert info.value.field == field

    def test_bad_toml(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[dataset\n")
        with pytest.raises(ConfigError):
            load_config(path)


class TestPipeline:
    def test_run_writes_everything(self, tmp_path):
        cfg = load_config(tiny(tmp_path))
        results = run(cfg, tmp_path / "out")
        assert {r.method for r in results} == set(METHODS)
        assert all(r.n_seeds == 2 and r.se is not None for r in results)
        diag = json.loads((tmp_path / "out" / "diagnostics" / "seed1.json").read_text())
        assert {"temperature", "calibration", "adaptation", "selected", "accuracy"} <= set(diag)
        assert "eps0" in diag["adaptation"]["rounds"][0]
        assert (tmp_path / "out" / "report.txt").read_text().startswith("method")
        assert len(read_rows(tmp_path / "out" / "per_seed.csv")) == 2 * len(METHODS)

    def test_deterministic(self, tmp_path):
        cfg = load_config(tiny(tmp_path))
        run(cfg, tmp_path / "a")
        run(cfg, tmp_path / "b")
        for name in ("per_seed.csv", "results.csv", "report.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_stagewise_cli_matches_run(self, tmp_path):
        path = str(tiny(tmp_path))
        out = str(tmp_path / "staged")
        for cmd in ("generate", "train", "adapt", "evaluate"):
            assert main([cmd, "--config", path, "--out", out]) == 0
        assert main(["run", "--config", path, "--out", str(tmp_path / "whole")]) == 0
        assert read_rows(tmp_path / "staged" / "per_seed.csv") == read_rows(tmp_path / "whole" / "per_seed.csv")
        assert (tmp_path / "staged" / "data" / "seed0" / "data.csv").exists()

    def test_sweep(self, tmp_path):
        cfg = load_config(tiny(tmp_path))
        matrix = sweep(cfg, tmp_path / "sw", seeds=[0])
        assert set(matrix["SFB"]) == {0.1, 0.9}
        header = read_rows(tmp_path / "sw" / "sweep.csv")[0]
        assert list(header) == ["method", "beta=0.1", "beta=0.9"]

    def test_cedd_and_vrex(self, tmp_path):
        cfg = load_config(tiny(tmp_path, tag="CEDD", train="[0.95, 0.8]", validation="0.2", penalty="vrex"))
        results = run(cfg, tmp_path / "out", seeds=[0])
        assert {r.dataset for r in results} == {"CEDD"}


class TestCli:
    def test_config_error_exit_code(self, tmp_path, capsys):
        assert main(["run", "--config", str(tiny(tmp_path, penalty="fishr"))]) == 2
        assert "train.penalty" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.toml")]) == 2

    def test_stage_failure_names_stage(self, tmp_path, capsys):
        assert main(["adapt", "--config", str(tiny(tmp_path)), "--out", str(tmp_path / "empty")]) == 1
        assert "stage 'adapt'" in capsys.readouterr().err

    def test_missing_mnist_names_generate(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(DATA_DIR_ENV, str(tmp_path / "nowhere"))
        assert main(["generate", "--config", "cmnist", "--seed", "0", "--out", str(tmp_path / "o")]) == 1
        err = capsys.readouterr().err
        assert "stage 'generate'" in err and "train-images-idx3-ubyte" in err

    def test_report_command(self, tmp_path, capsys):
        path = str(tiny(tmp_path))
        out = str(tmp_path / "o")
        assert main(["run", "--config", path, "--out", out, "--seed", "0"]) == 0
        capsys.readouterr()
        assert main(["report", "--out", out]) == 0
        assert "n/a" in capsys.readouterr().out


def fake_mnist_dir(tmp_path, n_train=900, n_test=300):
    rng = np.random.default_rng(0)
    d = tmp_path / "mnist"
    d.mkdir()
    for split, n in (("train", n_train), ("t10k", n_test)):
        digits = rng.integers(0, 10, n).astype(np.uint8)
        # digit-dependent blob so shape carries label information
        images = rng.integers(0, 40, (n, 28, 28)).astype(np.uint8)
        for i, dgt in enumerate(digits):
            images[i, 2 * dgt:2 * dgt + 6, 4:24] = 255
        write_idx(d / f"{split}-images-idx3-ubyte", images, compress=True)
        write_idx(d / f"{split}-labels-idx1-ubyte.gz", digits, compress=True)
    return d


class TestColorMnistPipeline:
    def test_small_run(self, tmp_path, monkeypatch):
        d = fake_mnist_dir(tmp_path)
        monkeypatch.setenv(DATA_DIR_ENV, str(d))
        cfg = load_config("cmnist")
        cfg.dataset.n_validation = 60
        cfg.seeds = [0]
        cfg.train.hidden = (12,)
        cfg.train.steps, cfg.train.pretrain_steps = 6, 3
        cfg.grid.lambda_S = [100.0]
        cfg.baselines.irm_lambda_S = [100.0]
        splits = generate(cfg, 0)
        assert [len(t) for t in splits.train] == [240, 240]
        assert [len(t) for t in splits.train_validation] == [60, 60]
        assert len(splits.validation) == 60 and len(splits.test) == 300
        results = run(cfg, tmp_path / "out")
        assert "Oracle" not in {r.method for r in results}
        diag = json.loads((tmp_path / "out" / "diagnostics" / "seed0.json").read_text())
        assert diag["selection_protocol"].startswith("labeled test-domain")
