import numpy as np
import pytest

from conftest import ball, box
from singular_heat import cli
from singular_heat.config import SCHEMA, ConfigError, defaults, load_config, parse_config
from singular_heat.fields import envelope, rng_for, smooth_random_field


def test_parse_values_and_comments():
    cfg = parse_config("# run\ngrid.m = 16  # coarse\nspectrum.eps_list = 0.4, 0.2\nmu = auto\nseed=3\n")
    assert cfg["grid.m"] == 16
    assert cfg["spectrum.eps_list"] == (0.4, 0.2)
    assert cfg["mu"] is None and cfg["seed"] == 3
    assert cfg["time.T"] == SCHEMA["time.T"][1]


@pytest.mark.parametrize("text,where", [
    ("grid.m = 16\nbogus = 1\n", "<config>:2"),
    ("grid.m = sixteen\n", "<config>:1"),
    ("grid.m 16\n", "<config>:1"),
    ("\n\ntime.theta = 0.7\n", "<config>:3"),
    ("omega.center = 1, 2\n", "<config>:1"),
])
def test_errors_carry_line_numbers(text, where):
    with pytest.raises(ConfigError, match=where):
        parse_config(text)


def test_empty_config_rejected(tmp_path):
    with pytest.raises(ConfigError, match="empty"):
        parse_config("# nothing here\n\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_dump_round_trip():
    cfg = defaults().with_overrides(["grid.m=20", "mu=0.1", "omega.kind=annulus"])
    again = parse_config(cfg.dump())
    assert again.values == cfg.values


def test_override_errors():
    with pytest.raises(ConfigError, match="override #1"):
        defaults().with_overrides(["nonsense"])
    with pytest.raises(ConfigError, match="unknown field"):
        defaults().with_overrides(["grid.q=3"])


def test_rng_streams_independent_and_reproducible():
    a = rng_for(5, 1).standard_normal(4)
    np.testing.assert_array_equal(a, rng_for(5, 1).standard_normal(4))
    assert not np.allclose(a, rng_for(5, 2).standard_normal(4))
    assert not np.allclose(a, rng_for(6, 1).standard_normal(4))


def test_random_field_is_resolution_independent():
    # nodes (j + 1/2) h of the m = 8 grid are also nodes of the m = 24 grid
    c, f = ball(8), ball(24)
    uc = smooth_random_field(c, rng_for(0, 9))
    uf = smooth_random_field(f, rng_for(0, 9))
    shared = f.lookup(3 * c.lattice + 1)
    assert np.all(shared >= 0)
    np.testing.assert_allclose(uf[shared], uc, rtol=1e-12, atol=1e-14)


def test_envelope_nonnegative_and_vanishing_at_boundary():
    for g in (ball(12), box(8)):
        e = envelope(g)
        assert np.all(e > 0)
    assert envelope(ball(12), np.array([[1.0, 0.0, 0.0]]))[0] == 0.0
    lo, hi = box(8).box_bounds
    assert envelope(box(8), np.array([[hi, 0.0, 0.0]]))[0] == 0.0


# --- command line -------------------------------------------------------------------------


SMALL = """\
grid.m = 12
time.N = 10
hardy.m_list = 8, 12
spectrum.m = 16
spectrum.eps_list = 0.5, 0.25, 0.125
solve.samples = 2
solve.pairs = 2
"""


def _write(tmp_path, text):
    p = tmp_path / "run.cfg"
    p.write_text(text)
    return str(p)


def test_cli_hardy(tmp_path):
    code = cli.main(["hardy", "--config", _write(tmp_path, SMALL), "--out", str(tmp_path / "o")])
    out = tmp_path / "o"
    rows = (out / "hardy.csv").read_text().splitlines()
    assert rows[0].startswith("m,h,nu,rel_err,K0")
    assert len(rows) == 3
    summary = (out / "hardy_summary.txt").read_text()
    assert "mu*(3) = 0.25" in summary and "wall_time_s" in summary
    assert code == cli.EXIT_FAIL  # coarse grids miss the 15% band
    assert (out / "config_used.txt").exists()


def test_cli_solve_passes(tmp_path):
    code = cli.main(["solve", "--config", _write(tmp_path, SMALL), "--out", str(tmp_path), "--seed", "4"])
    assert code == cli.EXIT_OK
    assert (tmp_path / "solve_trajectory.csv").read_text().startswith("step,time,l2_norm,h1_norm")
    assert "seed = 4" in (tmp_path / "config_used.txt").read_text()


def test_cli_spectrum_refuses_subcritical_mu(tmp_path, capsys):
    code = cli.main(["spectrum", "--config", _write(tmp_path, SMALL), "--out", str(tmp_path),
                     "--override", "mu=0.1"])
    assert code == cli.EXIT_CONFIG
    assert "MuOutOfRange" in capsys.readouterr().err


def test_cli_empty_config(tmp_path, capsys):
    assert cli.main(["hardy", "--config", _write(tmp_path, "\n# empty\n"), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "empty" in capsys.readouterr().err


def test_cli_bad_value_reports_line(tmp_path, capsys):
    code = cli.main(["hardy", "--config", _write(tmp_path, "grid.m = 12\ntime.N = many\n"), "--out", str(tmp_path)])
    assert code == cli.EXIT_CONFIG
    assert "run.cfg:2" in capsys.readouterr().err


def test_cli_unknown_subcommand():
    with pytest.raises(SystemExit):
        cli.main(["plot"])


def test_csv_formatting():
    assert [cli._fmt(v) for v in (True, np.int64(3), 0.1 + 0.2, "x")] == ["true", "3", "0.3", "x"]
