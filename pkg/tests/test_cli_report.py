import json
import subprocess
import sys
from fractions import Fraction

import pytest

from citorus.cli_report import ConfigError, RunConfig, main, parse_config, run, strip_runtime
from citorus.spectral_torus import load_citf
from citorus.verification import DEFAULT_TOLERANCES, rng_for

# a full-suite configuration small enough for a unit test
SMALL = """\
# reduced full suite
seed=7
d=3
N=32
mu=12
sigma=2
lam_prev=1
ncount=1
amplitude=0.05
sigma_doubling=false
operator_N=8
operator_kmax=2
operator_samples=3
symmetric_gradient_samples=2
geometry_samples=20
gradient_samples=3
composition_samples=3
scaling_N=128
"""


def _records(text):
    return [json.loads(line) for line in text.splitlines()]


class TestParse:
    def test_minimal(self):
        cfg = parse_config("command=check-exponents\nbeta=1/200\nb=5\nalpha=1/1000000\nd=4")
        assert cfg.beta == Fraction(1, 200) and cfg.b == 5 and cfg.d == 4
        assert cfg.N == 64  # defaults are materialized

    def test_float_rational_rejected(self):
        with pytest.raises(ConfigError, match="p/q"):
            parse_config("command=check-exponents\nbeta=0.005")

    def test_empty_needs_command(self):
        with pytest.raises(ConfigError, match="command required"):
            parse_config("")

    def test_command_from_caller(self):
        assert parse_config("# nothing\n", "iterate").command == "iterate"
        with pytest.raises(ConfigError):
            parse_config("command=iterate", "check-exponents")

    @pytest.mark.parametrize(
        "text,match",
        [
            ("command=iterate\nfoo=1", "unknown key"),
            ("command=iterate\ntol.bogus=1", "unknown tolerance"),
            ("command=iterate\nd=4\nd=3", "duplicate"),
            ("command=nope", "unknown command"),
            ("command=iterate\nN=abc", "integer"),
            ("command=iterate\nN=48", "power of two"),
            ("command=iterate\nsigma=32", "sigma < mu"),
            ("command=iterate\nbeta=1/2\nalpha=3/4", "alpha < beta"),
            ("command=iterate\njust text", "key=value"),
        ],
    )
    def test_errors(self, text, match):
        with pytest.raises(ConfigError, match=match):
            parse_config(text)

    def test_comments_and_blank_lines(self):
        cfg = parse_config("\n# header\ncommand=iterate  # trailing\n\nseed=3\n")
        assert cfg.seed == 3

    def test_echo_has_every_tolerance(self):
        echo = parse_config("command=iterate\ntol.closure=1e-9").echo()
        assert set(echo["tolerances"]) == set(DEFAULT_TOLERANCES)
        assert echo["tolerances"]["closure"] == 1e-9
        assert echo["beta"] == "1/200"


class TestRelaxedFlag:
    def test_tightening_not_flagged(self, capsys):
        import io

        out = io.StringIO()
        run(parse_config("command=check-exponents"), out)
        assert all("relaxed" not in r for r in _records(out.getvalue()))

    def test_loosened_tolerance_flagged(self):
        import io

        cfg = parse_config(SMALL + "command=verify-operators\ntol.right_inverse=1e-6\n")
        out = io.StringIO()
        run(cfg, out)
        rows = {r.get("id"): r for r in _records(out.getvalue())}
        assert rows["operators.right_inverse"]["relaxed"] is True
        assert "relaxed" not in rows["operators.trace_free"]


class TestRun:
    def test_check_exponents_report(self, tmp_path):
        cfgp = tmp_path / "c.cfg"
        cfgp.write_text("beta=1/200\nb=5\nalpha=1/1000000\nd=4\n")
        outp = tmp_path / "r.jsonl"
        assert main(["check-exponents", "--config", str(cfgp), "--out", str(outp)]) == 0
        recs = _records(outp.read_text())
        header, rows, summary = recs[0], recs[1:-1], recs[-1]
        assert header["kind"] == "header" and "PCG64" in header["generator"]
        assert len(rows) == 11
        for r in rows:
            assert {"id", "paper_anchor", "inputs", "measured", "target", "verdict", "runtime_ms"} <= set(r)
            assert r["verdict"] == "exact-pass"
        assert summary["exit_status"] == 0

    def test_exact_fail_sets_exit_status(self, tmp_path):
        cfgp = tmp_path / "c.cfg"
        cfgp.write_text("beta=1/10\nb=5\nalpha=1/1000000\n")
        assert main(["check-exponents", "--config", str(cfgp), "--out", str(tmp_path / "r.jsonl")]) == 1

    def test_bad_config_exit_code(self, tmp_path, capsys):
        cfgp = tmp_path / "c.cfg"
        cfgp.write_text("beta=0.005\n")
        assert main(["check-exponents", "--config", str(cfgp)]) == 2
        assert "p/q" in capsys.readouterr().err

    def test_error_rows_do_not_abort(self, tmp_path):
        import io

        # a grid size that is not a power of two fails inside the suites
        cfg = parse_config(SMALL + "command=verify-blocks\n")
        cfg.N = 48
        out = io.StringIO()
        status = run(cfg, out)
        recs = _records(out.getvalue())
        assert status == 1
        assert any(r.get("verdict") == "error" for r in recs)
        assert recs[-1]["kind"] == "summary"

    def test_iterate_dumps_fields(self, tmp_path):
        cfgp = tmp_path / "c.cfg"
        cfgp.write_text(SMALL)
        fdir = tmp_path / "fields"
        outp = tmp_path / "r.jsonl"
        assert main(["iterate", "--config", str(cfgp), "--out", str(outp), "--fields-dir", str(fdir)]) == 0
        u = load_citf(fdir / "iterate_u.citf")
        assert u.grid.d == 3 and u.grid.N == 32 and u.rank == 1
        rows = {r.get("id"): r for r in _records(outp.read_text())}
        assert rows["iterate.closure"]["verdict"] == "measured-ok"

    def test_module_entry_point(self, tmp_path):
        cfgp = tmp_path / "c.cfg"
        cfgp.write_text("d=4\n")
        proc = subprocess.run([sys.executable, "-m", "citorus", "check-exponents", "--config", str(cfgp)],
                              capture_output=True, text=True, check=True)
        assert _records(proc.stdout)[-1]["exit_status"] == 0


def test_suite_streams_are_independent():
    a = rng_for(1, "operators").standard_normal(3)
    b = rng_for(1, "geometry").standard_normal(3)
    c = rng_for(1, "operators").standard_normal(3)
    assert (a == c).all() and not (a == b).all()


def test_full_suite_is_deterministic(tmp_path):
    cfgp = tmp_path / "c.cfg"
    cfgp.write_text(SMALL)
    reports = []
    for i in range(2):
        outp = tmp_path / f"r{i}.jsonl"
        main(["full-suite", "--config", str(cfgp), "--out", str(outp)])
        reports.append(strip_runtime(outp.read_text().splitlines()))
    assert reports[0] == reports[1]
    assert not any(json.loads(line).get("verdict") == "error" for line in reports[0])
