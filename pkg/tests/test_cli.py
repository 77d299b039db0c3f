import csv

import numpy as np
import pytest

from vpconvex import cli, config
from vpconvex.errors import ConfigError

SMALL = """\
init.profile = flat_bump
init.amplitude = 2
init.n_per_dim = 6
poisson.grid_n = 12
picard.T = 0.25
picard.dt = 0.0625
"""


def _write(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _column(path, name):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r[name]) for r in rows])


def test_config_defaults_and_resolution():
    cfg = config.build({})
    assert cfg["poisson.scheme"] == "conservative"
    assert cfg.profile_params["radius_v"] == 1.25
    text = cfg.resolved_text()
    assert "init.amplitude = 1.0" in text and "picard.dt = 0.015625" in text


@pytest.mark.parametrize("raw", [
    {"poisson.bogus": "1"},
    {"init.value": "2"},
    {"picard.T": "1", "picard.dt": "0.3"},
    {"poisson.grid_n": "three"},
    {"domain.kind": "ball", "domain.semi_axes": "1, 2, 1"},
])
def test_config_errors(raw):
    with pytest.raises(ConfigError):
        config.build(raw)


def test_parse_lines_rejects_duplicates_and_junk():
    with pytest.raises(ConfigError):
        config.parse_lines("a.b = 1\na.b = 2\n")
    with pytest.raises(ConfigError):
        config.parse_lines("no equals sign\n")
    assert config.parse_lines("# comment\n a.b = 1 # trailing\n") == {"a.b": "1"}


def test_linear_run_keeps_mass_constant(tmp_path):
    out = tmp_path / "lin"
    cfg = _write(tmp_path, SMALL + "picard.mode = linear\n")
    assert cli.main(["run", "--config", cfg, "--output", str(out)]) == cli.EXIT_OK
    mass = _column(out / "diagnostics.csv", "mass")
    assert len(mass) == 5 and np.all(mass == mass[0])
    for name in ("config_resolved", "convergence.csv", "markers_final.csv", "timing.log"):
        assert (out / name).exists()


def test_picard_run_reports_decreasing_distances(tmp_path):
    out = tmp_path / "pic"
    cfg = _write(tmp_path, SMALL + "picard.mode = picard\n")
    assert cli.main(["run", "--config", cfg, "--output", str(out)]) == cli.EXIT_OK
    d = _column(out / "convergence.csv", "l1_distance")
    assert len(d) >= 3 and np.all(d[1:] < d[:-1])


def test_picard_run_without_convergence_exits_5(tmp_path):
    out = tmp_path / "nc"
    cfg = _write(tmp_path, SMALL + "picard.mode = picard\npicard.max_iter = 2\npicard.tol = 1e-14\n")
    assert cli.main(["run", "--config", cfg, "--output", str(out)]) == cli.EXIT_NONCONVERGENCE
    assert (out / "convergence.csv").exists()


def test_malformed_key_exits_2_without_outputs(tmp_path):
    out = tmp_path / "bad"
    cfg = _write(tmp_path, SMALL + "poisson.gridn = 12\n")
    assert cli.main(["run", "--config", cfg, "--output", str(out)]) == cli.EXIT_CONFIG
    assert not out.exists()


def test_check_admissible(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL)
    assert cli.main(["check", "--config", cfg]) == cli.EXIT_OK
    text = capsys.readouterr().out
    assert text.strip().endswith("admissible")
    residual = float(text.split("compatibility residual:")[1].split()[0])
    assert abs(residual) < 1e-10


def test_check_reports_nonpositive_wall_data(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL + "poisson.h_profile = tilted\npoisson.h_tilt = 1.5\n")
    assert cli.main(["check", "--config", cfg]) == cli.EXIT_INTEGRITY
    assert "h must be positive" in capsys.readouterr().out


def test_check_reports_flatness_points(tmp_path, capsys):
    text = ("init.profile = constant\ninit.n_per_dim = 6\npoisson.grid_n = 8\n"
            "init.support_lo = -1, -1, -1, -1, -1, -1\ninit.support_hi = 1, 1, 1, 1, 1, 1\n")
    cfg = _write(tmp_path, text)
    assert cli.main(["check", "--config", cfg]) == cli.EXIT_INTEGRITY
    out = capsys.readouterr().out
    assert "inadmissible" in out and "flatness violated at lattice points: x=" in out


def test_run_is_deterministic(tmp_path):
    text = SMALL + ("init.radius_v = 2.0\npicard.mode = linear\n"
                    "diag.partition = true\ndiag.windows = 0.25\n")
    cfg = _write(tmp_path, text)
    for name in ("a", "b"):
        assert cli.main(["run", "--config", cfg, "--seed", "7",
                         "--output", str(tmp_path / name)]) == cli.EXIT_OK
    for f in ("diagnostics.csv", "convergence.csv", "partition.csv", "markers_final.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert len((tmp_path / "a" / "partition.csv").read_text().splitlines()) > 1


def test_plot_writes_images(tmp_path):
    pytest.importorskip("matplotlib")
    out = tmp_path / "p"
    cfg = _write(tmp_path, SMALL + "picard.mode = linear\n")
    assert cli.main(["run", "--config", cfg, "--output", str(out)]) == cli.EXIT_OK
    assert cli.main(["plot", "--output", str(out)]) == cli.EXIT_OK
    assert (out / "diagnostics.png").exists()


def test_missing_config_is_a_config_error():
    assert cli.main(["run"]) == cli.EXIT_CONFIG
    assert cli.main(["frobnicate"]) == cli.EXIT_CONFIG
