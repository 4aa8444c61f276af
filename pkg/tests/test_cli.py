import csv
import json

import pytest

from umaircomp.baselines import SCHEMES, register_scheme
from umaircomp.cli import main
from umaircomp.experiment import DEFAULTS, resolve_config


def write_cfg(path, **over):
    cfg = {"system": {"n_antennas": 2, "n_users": 2}, "schemes": ["identity"], "seeds": [0]}
    cfg.update(over)
    path.write_text(json.dumps(cfg, indent=2))
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_minimal_config_one_row(tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    out = tmp_path / "out"
    assert main(["optimize", "--config", str(cfg), "--out-dir", str(out)]) == 0
    data = rows(out / "results.csv")
    assert len(data) == 1
    assert data[0]["scheme"] == "identity" and data[0]["status"] == "ok"
    assert (out / "manifest.json").exists()


def test_rerun_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", schemes=["identity", "pam", "agp"], seeds=[0, 1])
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["optimize", "--config", str(cfg), "--out-dir", str(a)]) == 0
    assert main(["optimize", "--config", str(cfg), "--out-dir", str(b)]) == 0
    for name in ("results.csv", "convergence.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_manifest_reruns_experiment(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", schemes=["pam"], seeds=[3])
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["optimize", "--config", str(cfg), "--out-dir", str(a)]) == 0
    manifest = json.loads((a / "manifest.json").read_text())
    assert "version" in manifest
    assert main(["optimize", "--config", str(a / "manifest.json"), "--out-dir", str(b)]) == 0
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()


def test_seed_and_scheme_overrides(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", schemes=["identity", "pam"], seeds=[0, 1, 2])
    out = tmp_path / "o"
    assert main(["optimize", "--config", str(cfg), "--out-dir", str(out), "--seed", "5",
                 "--scheme", "pam"]) == 0
    data = rows(out / "results.csv")
    assert [(r["scheme"], r["seed"]) for r in data] == [("pam", "5")]


def test_sweep_rows(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", sweep={"n_antennas": [2, 3]}, seeds=[0, 1])
    out = tmp_path / "o"
    assert main(["optimize", "--config", str(cfg), "--out-dir", str(out)]) == 0
    assert len(rows(out / "results.csv")) == 4


def test_invalid_configs_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"schemes": ["pam"],\n "seeds": [0,]\n}')
    assert main(["optimize", "--config", str(bad), "--out-dir", str(tmp_path / "o")]) == 1
    assert "line 2" in capsys.readouterr().err
    cfg = write_cfg(tmp_path / "c.json", schemes=["nope"])
    assert main(["optimize", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 1
    assert "schemes" in capsys.readouterr().err
    cfg = write_cfg(tmp_path / "c.json", system={"n_antennas": 0})
    assert main(["optimize", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 1


def test_solver_failure_exit_2(tmp_path):
    def boom(ch, cfg, po, ao):
        raise RuntimeError("solver exploded")

    register_scheme("_boom", boom)
    try:
        cfg = write_cfg(tmp_path / "c.json", schemes=["identity", "_boom"])
        out = tmp_path / "o"
        assert main(["optimize", "--config", str(cfg), "--out-dir", str(out)]) == 2
        data = {r["scheme"]: r for r in rows(out / "results.csv")}
        assert data["identity"]["status"] == "ok"
        assert data["_boom"]["status"] != "ok" and "exploded" in data["_boom"]["error"]
    finally:
        SCHEMES.pop("_boom")


def test_resolve_config_units():
    cfg = resolve_config({"system": {"noise_power_dbm": -50}})
    assert cfg["system"]["noise_power_dbm"] == -50
    assert cfg["schemes"] == DEFAULTS["schemes"]


def test_emit_plots(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", schemes=["identity", "pam"], sweep={"n_antennas": [2, 3]})
    out = tmp_path / "o"
    assert main(["bench", "--config", str(cfg), "--out-dir", str(out)]) == 0
    assert main(["emit-plots", "--out-dir", str(out), "--kind", "convergence", "--scheme", "pam"]) == 0
    conv = rows(out / "plots" / "convergence.csv")
    assert list(conv[0]) == ["scheme", "outer_iter", "objective"]
    assert {r["scheme"] for r in conv} == {"pam"}
    assert main(["emit-plots", "--out-dir", str(out), "--kind", "runtime-vs-N"]) == 0
    rt = rows(out / "plots" / "runtime-vs-N.csv")
    assert list(rt[0]) == ["scheme", "n_antennas", "runtime_s"] and len(rt) == 4
    assert main(["emit-plots", "--out-dir", str(out), "--kind", "mse-vs-N"]) == 0
    # no FL data in this run
    assert main(["emit-plots", "--out-dir", str(out), "--kind", "loss-vs-round"]) == 1
    assert "available kinds" in capsys.readouterr().err
    assert main(["emit-plots", "--out-dir", str(out), "--kind", "convergence", "--scheme", "agp"]) == 1


def test_simulate_fl_and_verify_bounds(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", system={"n_antennas": 2, "n_users": 2, "symbols_per_block": 2},
                    fl={"rounds": 4, "replicas": 2, "task": {"dim": 4}})
    out = tmp_path / "o"
    assert main(["verify-bounds", "--config", str(cfg), "--out-dir", str(out)]) == 0
    text = capsys.readouterr().out
    assert "verdict" in text
    assert (out / "bounds.csv").exists()
    assert main(["emit-plots", "--out-dir", str(out), "--kind", "loss-vs-round"]) == 0
    curve = rows(out / "plots" / "loss-vs-round.csv")
    assert list(curve[0]) == ["scheme", "round", "loss", "bound"]
    assert len(curve) == 4


def test_emit_plots_requires_dir(capsys):
    assert main(["emit-plots"]) == 1


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
