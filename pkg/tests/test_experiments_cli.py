import json

import numpy as np
import pytest
from click.testing import CliRunner

from surfeit import experiments as ex
from surfeit.cli import main
from surfeit.errors import ConfigError, UnknownFamily


def _cfg(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_config_defaults_and_override(tmp_path):
    cfg = ex.load_config(_cfg(tmp_path, "family: annulus\nmodel: analytic\n"), seed=7)
    assert cfg.params == {"rho": 0.5}
    assert cfg.seed == 7
    assert cfg.tolerances["slope_dT"] == 0.8
    cfg = ex.load_config(_cfg(tmp_path, "family: mobius\n"))
    assert cfg.tolerances["slope_dT"] == 0.30 and not cfg.orientable


@pytest.mark.parametrize("text, exc", [
    ("family: disk\nbogus: 1\n", ConfigError),
    ("family: klein\n", UnknownFamily),
    ("family: disk\nmodel: spectral\n", ConfigError),
    ("family: disk\nsweep: {epsilons: [0.1, 0.01]}\n", ConfigError),
    ("family: disk\nsweep: {mode: twist}\n", ConfigError),
    ("family: disk\ntolerances: {wrong: 1}\n", ConfigError),
    ("family: disk\nh: -0.1\n", ConfigError),
    ("- just\n- a list\n", ConfigError),
    ("family: [unclosed\n", ConfigError),
])
def test_load_config_rejects(tmp_path, text, exc):
    with pytest.raises(exc):
        ex.load_config(_cfg(tmp_path, text))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        ex.load_config(tmp_path / "absent.yaml")


def test_fit_loglog_recovers_power_law():
    x = np.logspace(-3, -1, 8)
    fit = ex.fit_loglog(x, 3 * x ** 0.5)
    assert fit.slope == pytest.approx(0.5, abs=1e-12)
    assert fit.half_width < 1e-10 and fit.rows == 8
    fit = ex.fit_loglog(x, 3 * x ** 0.5, x_floor=x[5])
    assert fit.rows == 2 and fit.half_width == float("inf")
    assert np.isnan(ex.fit_loglog(x[:1], x[:1]).slope)


def test_cli_forward_disk(tmp_path):
    cfg = _cfg(tmp_path, "family: disk\nmodel: fem\nh: 0.08\n")
    res = CliRunner().invoke(main, ["forward", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert res.exit_code == 0, res.output
    report = json.loads((tmp_path / "o" / "forward_report.json").read_text())
    assert report["family"] == "disk" and report["oracle_error"] < 0.05
    assert (tmp_path / "o" / "dn.json").exists()


def test_forward_is_deterministic(tmp_path):
    cfg = _cfg(tmp_path, "family: disk\nmodel: fem\nh: 0.08\n")
    for d in ("a", "b"):
        assert CliRunner().invoke(main, ["forward", "--config", str(cfg), "--out", str(tmp_path / d)]).exit_code == 0
    for f in ("dn.json", "forward_report.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_cli_topology_disk(tmp_path):
    cfg = _cfg(tmp_path, "family: disk\nmodel: analytic\nn: 128\n")
    res = CliRunner().invoke(main, ["topology", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert res.exit_code == 0, res.output
    report = json.loads((tmp_path / "o" / "topology.json").read_text())
    assert report["orientable"] and report["chi"] == 1


def test_cli_config_error_exit_2(tmp_path):
    cfg = _cfg(tmp_path, "family: klein\n")
    res = CliRunner().invoke(main, ["forward", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert res.exit_code == 2
    cfg = _cfg(tmp_path, "family: disk\nmodel: analytic\n", "s.yaml")
    res = CliRunner().invoke(main, ["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert res.exit_code == 2


def test_cli_numerical_failure_exit_1(tmp_path):
    # at h = 0.08 the Mobius FEM residuals sit within the x10 guard band of the tolerance
    cfg = _cfg(tmp_path, "family: mobius\nmodel: fem\nh: 0.08\n")
    res = CliRunner().invoke(main, ["topology", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert res.exit_code == 1


def test_cli_usage_errors():
    r = CliRunner().invoke(main, ["forward"])
    assert r.exit_code == 2
    r = CliRunner().invoke(main, ["sweep", "--config", "x.yaml", "--jobs", "0"])
    assert r.exit_code == 2
