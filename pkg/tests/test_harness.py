import json
import math
import os

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from spinmrfm import cli, config, harness
from spinmrfm.config import RunConfig, preset, preset_names, resolve
from spinmrfm.errors import ConfigError


def quick(tmp_path, name, **kw):
    base = dict(preset="desk-small", out_dir=str(tmp_path / name), n_fock=16, t_end=2.0)
    base.update(kw)
    return RunConfig(**base)


def test_presets():
    assert {"paper-sec7", "desk-small"} <= set(preset_names())
    params, prof = preset("paper-sec7")
    assert params.eta == 0.3 and prof.f0 == -6000.0
    with pytest.raises(ConfigError, match="available"):
        preset("nope")


def test_run_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(kind="bogus")
    with pytest.raises(ConfigError):
        RunConfig(n_traj=0)
    with pytest.raises(ConfigError):
        RunConfig(window=[5.0, 1.0])
    with pytest.raises(ConfigError):
        RunConfig(sme_scheme="rk4_unitary")
    with pytest.raises(ConfigError, match="unknown configuration keys"):
        RunConfig.from_dict({"n_trajectories": 3})
    with pytest.raises(ConfigError, match="unknown parameter"):
        resolve(RunConfig(params={"temperature": 3}))
    with pytest.raises(ConfigError, match="e_d"):
        resolve(RunConfig(params={"e_d": 1.5}))


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(config.KINDS), st.integers(1, 500), st.integers(0, 2 ** 63), st.sampled_from(config.SPIN_STATES),
       st.floats(1e-4, 0.1))
def test_config_yaml_round_trip(kind, n_traj, seed, spin, dt):
    cfg = RunConfig(kind=kind, n_traj=n_traj, base_seed=seed, initial_spin=spin, dt=dt, params={"eta": 0.5})
    assert RunConfig.from_yaml(cfg.to_yaml()) == cfg


def test_precedence_file_env_flags(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"kind": "master", "n_traj": 4, "base_seed": 1, "dt": 0.02}))
    cfg = RunConfig.load(str(path)).with_env({"SPINMRFM_N_TRAJ": "7", "SPINMRFM_BASE_SEED": "5"})
    assert (cfg.kind, cfg.n_traj, cfg.base_seed, cfg.dt) == ("master", 7, 5, 0.02)
    args = cli.build_parser().parse_args(["run", "--config", str(path), "--seed", "9"])
    os.environ["SPINMRFM_N_TRAJ"] = "11"
    try:
        final = cli.config_from_args(args)
    finally:
        del os.environ["SPINMRFM_N_TRAJ"]
    assert (final.n_traj, final.base_seed) == (11, 9)
    with pytest.raises(ConfigError):
        RunConfig().with_env({"SPINMRFM_NOT_A_FIELD": "1"})


def test_resolve_defaults():
    res = resolve(RunConfig(preset="desk-small"))
    assert res.n_fock == 56 and res.t_end == 120.0
    assert res.bin_width == pytest.approx(0.3)
    assert res.window == (50.0, 120.0)
    assert res.drop_constant_force
    assert res.solver.energy_scale == 1.0
    assert res.echo()["bin_width"] == pytest.approx(0.3)


def test_validate_examples():
    bad = harness.validate(RunConfig(params={"gamma_c": 0.5}))
    assert any("bad cavity" in w for w in bad["warnings"])
    assert harness.validate(RunConfig(params={"e_d": 1.5}))["errors"]
    paper = harness.validate(RunConfig(preset="paper-sec7", n_fock=32))
    assert paper["truncation"]["advisory"]
    desk = harness.validate(RunConfig(preset="desk-small", n_fock=40))
    assert not desk["truncation"]["advisory"] and not desk["warnings"]
    assert not desk["regime_flags"]["high_temperature"]
    budget = harness.validate(RunConfig(max_steps=10))
    assert any("max_steps" in e for e in budget["errors"])


def test_snr_report_manifest(tmp_path):
    m = harness.run(RunConfig(kind="snr_report", preset="paper-sec7", out_dir=str(tmp_path / "snr")))
    assert m.status == harness.EXIT_OK, m.error
    assert 154 <= m.summary["snr_at_resonance"] <= 286
    assert "high_t" in m.summary["f_min"]
    disk = json.loads((tmp_path / "snr" / "manifest.json").read_text())
    assert disk["summary"]["snr_at_resonance"] == pytest.approx(m.summary["snr_at_resonance"])
    assert disk["code_version"]
    for name, digest in disk["files"].items():
        assert harness._sha256(str(tmp_path / "snr" / name)) == digest


def test_noise_spectrum_run(tmp_path):
    m = harness.run(RunConfig(kind="noise_spectrum", preset="paper-sec7", out_dir=str(tmp_path / "ns")))
    at = m.summary["at_resonance"]
    assert at["thermal"] > at["backaction"] > at["shot"]
    data = np.loadtxt(tmp_path / "ns" / "noise_spectrum.csv", delimiter=",", skiprows=1)
    assert data.shape == (600, 5)


def test_qsd_ensemble_deterministic(tmp_path):
    runs = []
    for name in ("a", "b"):
        m = harness.run(quick(tmp_path, name, kind="qsd_ensemble", n_traj=4, base_seed=3, write_binary=True))
        assert m.status in (harness.EXIT_OK, harness.EXIT_WARNINGS), m.error
        runs.append(m)
    # the config echo records out_dir, so only data files are compared
    data = [{k: v for k, v in r.files.items() if k != "config_echo.yaml"} for r in runs]
    assert data[0] == data[1] and len(data[0]) == 6
    assert runs[0].seeds == runs[1].seeds
    seeds, data = harness.read_trajectories_binary(str(tmp_path / "a" / "trajectories.bin"))
    assert seeds == runs[0].seeds and data.shape[0] == 4 and data.shape[2] == 6
    csv = np.loadtxt(tmp_path / "a" / "traj_00002.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(csv, data[2])


def test_different_seeds_differ(tmp_path):
    a = harness.run(quick(tmp_path, "s1", kind="qsd_ensemble", n_traj=2, base_seed=1))
    b = harness.run(quick(tmp_path, "s2", kind="qsd_ensemble", n_traj=2, base_seed=2))
    assert a.files["traj_00000.csv"] != b.files["traj_00000.csv"]


def test_master_and_sme_runs(tmp_path):
    m = harness.run(quick(tmp_path, "master", kind="master"))
    assert m.status in (harness.EXIT_OK, harness.EXIT_WARNINGS), m.error
    assert m.summary["min_eigenvalue"] > -1e-7
    s = harness.run(quick(tmp_path, "sme", kind="sme"))
    assert s.status in (harness.EXIT_OK, harness.EXIT_WARNINGS), s.error
    assert "photocurrent_sme.csv" in s.files
    cur = np.loadtxt(tmp_path / "sme" / "photocurrent_sme.csv", delimiter=",", skiprows=1)
    assert cur.shape[1] == 2


def test_unitary_compare_run(tmp_path):
    cfg = quick(tmp_path, "cmp", kind="unitary_compare", compare_t_end=0.5, compare_n_fock=8, full_dt=1e-4)
    m = harness.run(cfg)
    assert m.status in (harness.EXIT_OK, harness.EXIT_WARNINGS), m.error
    assert {"compare_z.csv", "compare_density.csv"} <= set(m.files)
    assert m.summary["max_rel_deviation"] < 0.05


def test_readout_study_run(tmp_path):
    cfg = quick(tmp_path, "ro", kind="readout_study", n_traj=3, t_end=60.0, window=[25.0, 60.0], n_fock=24)
    m = harness.run(cfg)
    assert m.status in (harness.EXIT_OK, harness.EXIT_WARNINGS), m.error
    lines = (tmp_path / "ro" / "decisions.txt").read_text().splitlines()
    assert len(lines) == 3 and all(l.startswith("seed=") for l in lines)
    assert 0.0 <= m.summary["agreement"] <= 1.0


def test_config_errors_give_status_one(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    m = harness.run(RunConfig(kind="snr_report", preset="paper-sec7", out_dir=str(blocker / "sub")))
    assert m.status == harness.EXIT_CONFIG and "writable" in m.error
    m = harness.run(RunConfig(kind="snr_report", preset="nope", out_dir=str(tmp_path / "x")))
    assert m.status == harness.EXIT_CONFIG


def test_solver_errors_give_status_two(tmp_path):
    m = harness.run(quick(tmp_path, "dt", kind="master", dt=0.5, record_stride=1, t_end=1.0))
    assert m.status == harness.EXIT_SOLVER
    assert "dt too large" in m.error


def test_warnings_give_status_three(tmp_path):
    m = harness.run(RunConfig(kind="snr_report", preset="desk-small", params={"gamma_c": 0.5},
                              out_dir=str(tmp_path / "w")))
    assert m.status == harness.EXIT_WARNINGS
    assert any("RegimeWarning" in w for w in m.warnings)


def test_truncation_advisory_scaling(desk):
    params, prof = desk
    small = harness.truncation_advisory(params, prof, 8)
    big = harness.truncation_advisory(params, prof, 48)
    assert small["advisory"] and not big["advisory"]
    assert big["tail_weight"] < small["tail_weight"]


def test_cli_preset_commands(capsys):
    assert cli.main(["preset", "list"]) == 0
    assert "desk-small" in capsys.readouterr().out
    assert cli.main(["preset", "show", "paper-sec7"]) == 0
    shown = yaml.safe_load(capsys.readouterr().out)
    assert shown["paper-sec7"]["params"]["eta"] == 0.3
    assert cli.main(["preset", "show", "missing"]) == 1


def test_cli_validate_and_run(tmp_path, capsys):
    assert cli.main(["validate", "--preset", "desk-small", "--fock", "40"]) == 0
    capsys.readouterr()
    assert cli.main(["validate", "--preset", "paper-sec7", "--fock", "32"]) == 3
    capsys.readouterr()
    code = cli.main(["run", "--preset", "paper-sec7", "--kind", "snr_report", "--out", str(tmp_path / "cli")])
    out = json.loads(capsys.readouterr().out)
    assert code == 0 and out["status"] == 0
    assert (tmp_path / "cli" / "snr.csv").exists()
    bad = tmp_path / "bad.yaml"
    bad.write_text("kind: snr_report\nunknown_key: 1\n")
    assert cli.main(["run", "--config", str(bad)]) == 1


def test_module_entry_point():
    import subprocess
    import sys
    out = subprocess.run([sys.executable, "-m", "spinmrfm", "preset", "list"], capture_output=True, text=True)
    assert out.returncode == 0 and "paper-sec7" in out.stdout
