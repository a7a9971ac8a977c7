import csv
import json

import numpy as np
import pytest

from efagg import aggregation
from efagg.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_VERIFY, main, parse_int_list


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("rba")
    assert run("train", "--preset", "smoke", "--variant", "rba", "--seed", "0", "--out", out) == EXIT_OK
    return out


def test_parse_int_list():
    assert parse_int_list("3") == [3]
    assert parse_int_list("1,2,5") == [1, 2, 5]
    assert parse_int_list("1..4") == [1, 2, 3, 4]


def test_train_outputs(trained):
    assert (trained / "metrics.csv").exists() and (trained / "checkpoint.npz").exists()
    snap = json.loads((trained / "config.json").read_text())
    assert snap["variant"] == "rba" and snap["seeds"] == [0]
    rows = list(csv.DictReader(open(trained / "metrics.csv")))
    assert {r["split"] for r in rows} == {"train", "eval"}


def test_two_seeds_get_suffixed_files(tmp_path):
    assert run("train", "--preset", "smoke", "--variant", "ba", "--seed", "0,1", "--steps", "4",
               "--out", tmp_path) == EXIT_OK
    assert (tmp_path / "metrics_seed0.csv").exists() and (tmp_path / "metrics_seed1.csv").exists()
    assert (tmp_path / "checkpoint_seed1.npz").exists()


def test_env_seed_default(tmp_path, monkeypatch):
    monkeypatch.setenv("EFAGG_SEED", "4")
    assert run("train", "--preset", "smoke", "--variant", "np", "--steps", "2", "--out", tmp_path) == EXIT_OK
    assert json.loads((tmp_path / "config.json").read_text())["seeds"] == [4]


def test_rerun_from_snapshot_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train", "--preset", "smoke", "--variant", "mba", "--steps", "6", "--out", a) == EXIT_OK
    assert run("train", "--config", a / "config.json", "--out", b) == EXIT_OK
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_missing_variant_exit_code(tmp_path, capsys):
    assert run("train", "--preset", "smoke", "--out", tmp_path) == EXIT_CONFIG
    assert "variant" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert run("train", "--config", tmp_path / "nope.json", "--variant", "ba") == EXIT_CONFIG


def test_nan_abort_exit_code(tmp_path, monkeypatch):
    from efagg import model

    orig = model.NeuralProcess.loss

    def bad_loss(self, *a, **k):
        return orig(self, *a, **k) * np.nan

    monkeypatch.setattr(model.NeuralProcess, "loss", bad_loss)
    assert run("train", "--preset", "smoke", "--variant", "ba", "--out", tmp_path) == EXIT_NUMERIC


def test_eval_clean_and_corrupted(trained, tmp_path):
    assert run("eval", "--checkpoint", trained / "checkpoint.npz", "--out", tmp_path) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "eval.csv")))
    assert len(rows) == 1 and float(rows[0]["gamma"]) == 0.0
    assert run("eval", "--out", trained, "--corrupt", "student-t", "--gammas", "0.05,0.15") == EXIT_OK
    rows = list(csv.DictReader(open(trained / "eval.csv")))
    assert [float(r["gamma"]) for r in rows] == [0.05, 0.15]


def test_eval_cavi_sweep(trained, tmp_path):
    assert run("eval", "--out", trained, "--cavi-steps", "1..4", "--corrupt", "student-t",
               "--gammas", "0.15") == EXIT_OK
    rows = list(csv.DictReader(open(trained / "eval.csv")))
    assert [int(r["cavi_steps"]) for r in rows] == [1, 2, 3, 4]
    assert all(r["bound"] != "" for r in rows)


def test_eval_variant_mismatch(trained):
    assert run("eval", "--out", trained, "--variant", "ba") == EXIT_CONFIG


def test_eval_missing_checkpoint(tmp_path):
    assert run("eval", "--checkpoint", tmp_path / "none.npz") == EXIT_CONFIG


def test_plot_outputs(trained, tmp_path):
    assert run("eval", "--out", trained, "--corrupt", "student-t", "--gammas", "0.05,0.15") == EXIT_OK
    assert run("plot", trained / "metrics.csv", trained / "eval.csv", "--out", tmp_path) == EXIT_OK
    assert (tmp_path / "metrics.svg").exists() and (tmp_path / "eval.svg").exists()
    assert "<svg" in (tmp_path / "eval.svg").read_text()


def test_plot_empty_csv_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert run("plot", empty, "--out", tmp_path / "o") == EXIT_CONFIG
    assert not list((tmp_path).glob("**/*.svg"))


def test_verify_quick_passes(tmp_path):
    assert run("verify", "--only", "quadrature", "reductions", "--out", tmp_path) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "verify.csv")))
    assert rows and set(rows[0]) == {"check", "max_error", "tolerance", "pass"}


def test_verify_catches_sign_flip(tmp_path, monkeypatch):
    orig = aggregation.ba_batched

    def flipped(m, v, seg, prior_mean, prior_var):
        mean, var = orig(m, v, seg, prior_mean, prior_var)
        return -mean, var

    monkeypatch.setattr(aggregation, "ba_batched", flipped)
    assert run("verify", "--only", "quadrature", "--out", tmp_path) == EXIT_VERIFY
    rows = list(csv.DictReader(open(tmp_path / "verify.csv")))
    assert any(r["pass"] in ("False", "0", "false") for r in rows)


def test_verify_report_covers_every_module():
    from efagg.verification import REGISTRY

    prefixes = {c.name.split(":")[0] for c in REGISTRY}
    assert {"ef_core", "aggregation", "neural", "taskgen", "np_model", "oracle"} <= prefixes
