import os
import subprocess
import sys

import pytest

from spcot import cli
from spcot.engine import TrainConfig


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--out", d, "--seed", 7, "--n", 40, "--hw", 16, "--labeled-ratio", 0.1) == 0
    return d


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# tiny run\nepochs = 2\niters_per_epoch = 2\nn_unlabeled = 3\nwarmup_epochs = 1\n")
    return p


def test_gen_data_sizes(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path / "d", "--seed", 7, "--n", 200, "--hw", 32, "--labeled-ratio", 0.05) == 0
    assert "|S|=10 |U|=190 |T|=50" in capsys.readouterr().out
    assert sorted(os.listdir(tmp_path / "d")) == ["images.spct", "masks.spct", "split.txt"]


def test_gen_data_missing_out(capsys):
    assert run("gen-data") == 2
    assert "usage" in capsys.readouterr().err


def test_gen_data_bad_ratio(tmp_path):
    assert run("gen-data", "--out", tmp_path, "--labeled-ratio", 1.5) == 2


def test_gen_data_bytes_stable(tmp_path):
    for sub in ("a", "b"):
        run("gen-data", "--out", tmp_path / sub, "--seed", 2, "--n", 20, "--hw", 16, "--labeled-ratio", 0.2)
    for name in ("images.spct", "masks.spct", "split.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_parse_config_defaults_and_types():
    cfg, data = cli.parse_config("lambda1 = 0.25  # inline\nenable_spc = false\n\nn = 50\n")
    assert cfg == TrainConfig(lambda1=0.25, enable_spc=False)
    assert data == {"n": 50, "hw": 32, "labeled_ratio": 0.05}


@pytest.mark.parametrize(
    "text, needle",
    [
        ("epochs = 2\nfoo = 1\n", "line 2: unknown key 'foo'"),
        ("epochs = two\n", "line 1"),
        ("lambda1 = 0,5\n", "decimal point"),
        ("epochs\n", "line 1"),
        ("K = 1\n", "K >= 2"),
        ("seed = 1\nseed = 2\n", "duplicate"),
    ],
)
def test_parse_config_errors(text, needle):
    with pytest.raises(cli.ConfigError, match=needle):
        cli.parse_config(text)


def test_train_writes_outputs(tmp_path, data_dir, tiny_cfg, capsys):
    out = tmp_path / "run"
    assert run("train", "--config", tiny_cfg, "--data", data_dir, "--out", out) == 0
    lines = (out / "record.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("epoch,gamma")
    assert (out / "checkpoint" / "checkpoint.spct").exists()
    assert not (out / "stamp.txt").exists()
    summary = capsys.readouterr().out.strip().splitlines()[-1]
    assert summary.startswith("final_dsc=") and " final_hd=" in summary
    assert run("evaluate", "--checkpoint", out / "checkpoint", "--data", data_dir) == 0


def test_train_baseline_flags(tmp_path, data_dir):
    cfg = tmp_path / "b.cfg"
    cfg.write_text("epochs = 1\niters_per_epoch = 2\nenable_spc = false\nenable_consistency = false\n")
    assert run("train", "--config", cfg, "--data", data_dir, "--out", tmp_path / "o") == 0
    row = (tmp_path / "o" / "record.csv").read_text().splitlines()[1].split(",")
    assert row[5] == "0.0" and row[6] == "0.0"


def test_train_unknown_key_exit2(tmp_path, data_dir, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs = 1\nfoo = 1\n")
    assert run("train", "--config", cfg, "--data", data_dir, "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert "foo" in err and "line 2" in err


def test_train_nan_exit3(tmp_path, data_dir, tiny_cfg, monkeypatch):
    from spcot import engine

    def boom(*a, **k):
        raise engine.TrainingAborted(4, {"sup": 0.5})

    monkeypatch.setattr(cli.E, "train", boom)
    assert run("train", "--config", tiny_cfg, "--data", data_dir, "--out", tmp_path / "o") == 3


def test_train_missing_data_exit1(tmp_path, tiny_cfg):
    assert run("train", "--config", tiny_cfg, "--data", tmp_path / "nope", "--out", tmp_path / "o") == 1


def test_stamp_optional(tmp_path, data_dir, tiny_cfg):
    assert run("train", "--config", tiny_cfg, "--data", data_dir, "--out", tmp_path / "o", "--stamp") == 0
    assert (tmp_path / "o" / "stamp.txt").exists()


def test_ablate_one_seed(tmp_path, data_dir, tiny_cfg, capsys):
    out = tmp_path / "abl"
    assert run("ablate", "--config", tiny_cfg, "--data", data_dir, "--out", out, "--seeds", "4") == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert len(lines) == 5
    header = lines[0].split(",")
    std = header.index("dsc_std")
    assert all(float(l.split(",")[std]) == 0.0 for l in lines[1:])
    printed = capsys.readouterr().out
    assert printed.count("ordering ") == 4


def test_ablate_continues_past_failures(tmp_path, data_dir, tiny_cfg, monkeypatch, capsys):
    real = cli.E.train
    calls = []

    def flaky(cfg, ds, *a, **k):
        calls.append((cfg.enable_spc, cfg.enable_consistency, cfg.seed))
        if cfg.seed == 1 and cfg.enable_spc:
            raise RuntimeError("boom")
        return real(cfg, ds, *a, **k)

    monkeypatch.setattr(cli.E, "train", flaky)
    assert run("ablate", "--config", tiny_cfg, "--data", data_dir, "--out", tmp_path, "--seeds", "0,1") == 1
    assert len(calls) == 8
    assert "boom" in capsys.readouterr().err


def test_ablate_bad_seeds(tmp_path, tiny_cfg):
    assert run("ablate", "--config", tiny_cfg, "--out", tmp_path, "--seeds", "a,b") == 2
    assert run("ablate", "--config", tiny_cfg, "--out", tmp_path, "--seeds", "") == 2


def test_ordering_checks():
    means = {"neither": 0.50, "consistency_only": 0.51, "spc_only": 0.506, "full": 0.52}
    assert all(ok for _, ok in cli.ordering_checks(means))
    means["spc_only"] = 0.503
    assert [ok for _, ok in cli.ordering_checks(means)] == [True, True, False, True]


def test_verify_cases_zero():
    assert run("verify", "--cases", 0) == 2


def test_verify_small_and_injected(tmp_path):
    assert run("verify", "--cases", 20, "--out", tmp_path) == 0
    text = (tmp_path / "verify.csv").read_text()
    assert text.startswith("name,cases,max_error,tolerance,passed")
    assert "false" not in text
    assert run("verify", "--cases", 20, "--out", tmp_path, "--debug-flip-gradient") == 1


def test_console_entry_point(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "spcot.cli", "verify", "--cases", "0"], capture_output=True, text=True
    )
    assert out.returncode == 2
