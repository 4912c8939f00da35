"""Command-line driver: argument handling, exit codes, file outputs."""

import numpy as np
import pytest

from kiclab.cli import SYMBOLS_CSV_HEADER, main
from kiclab.impairments import read_iq
from kiclab.labbench import CSV_HEADER, read_rows, ser
from kiclab.waveform import OfdmConfig, frame_from_decisions, ofdm_demodulate

TINY_SETS = [
    "--set", "ofdm.fft_size=64",
    "--set", "ofdm.cp_len=4",
    "--set", "ofdm.used_subcarriers=48",
    "--set", "ofdm.pilot_spacing=6",
    "--set", "ofdm.qam_order=4",
    "--set", "ofdm.symbols_per_frame=8",
    "--set", "scenario.n_frames=1",
    "--set", "scenario.ki_db=30",
    "--set", "scenario.si_db=20",
]


def run_line(capsys, extra):
    rc = main(["run", *TINY_SETS, *extra])
    out = capsys.readouterr().out
    assert rc == 0, out
    lines = out.splitlines()
    assert lines[0] == CSV_HEADER
    return lines[1]


class TestParsing:
    def test_help_everywhere(self, capsys):
        for argv in (["--help"], ["gen", "--help"], ["run", "--help"],
                     ["sweep", "--help"], ["selftest", "--help"]):
            assert main(argv) == 0
            assert "usage" in capsys.readouterr().out

    def test_no_arguments_is_a_usage_error(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_bad_mode_choice(self, capsys):
        assert main(["run", "--mode", "bogus"]) == 1


class TestGen:
    def test_fixtures_are_deterministic(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            rc = main(["gen", "--ki", "--si", "--seed", "5", "--samples", "2048",
                       "--qam", "4", "--symbols", "8", "--out", str(d), "--create"])
            assert rc == 0
        assert (a / "ki.iq").read_bytes() == (b / "ki.iq").read_bytes()
        assert (a / "si.iq").read_bytes() == (b / "si.iq").read_bytes()
        assert (a / "si_symbols.csv").read_text() == (b / "si_symbols.csv").read_text()
        rc = main(["gen", "--ki", "--seed", "6", "--samples", "2048",
                   "--out", str(a), "--create"])
        assert rc == 0
        assert (a / "ki.iq").read_bytes() != (b / "ki.iq").read_bytes()

    def test_si_fixture_demodulates_to_published_symbols(self, tmp_path, capsys):
        rc = main(["gen", "--si", "--seed", "9", "--qam", "16", "--symbols", "6",
                   "--out", str(tmp_path)])
        assert rc == 0
        lines = (tmp_path / "si_symbols.csv").read_text().splitlines()
        assert lines[0] == SYMBOLS_CSV_HEADER
        cells = [tuple(int(v) for v in ln.split(",")) for ln in lines[1:]]
        n_rows = max(c[1] for c in cells) + 1
        n_cols = max(c[2] for c in cells) + 1
        truth = np.zeros((n_rows, n_cols), dtype=np.int64)
        for _, r, c, idx in cells:
            truth[r, c] = idx
        ofdm = OfdmConfig(qam_order=16, symbols_per_frame=6)
        sig = read_iq(tmp_path / "si.iq")
        assert sig.sample_rate_hz == 6_144_000.0
        est, _ = ofdm_demodulate(sig, ofdm)
        assert ser(est, frame_from_decisions(truth, ofdm)) == 0.0

    def test_missing_directory_needs_create(self, tmp_path, capsys):
        target = tmp_path / "not" / "there"
        rc = main(["gen", "--ki", "--samples", "1024", "--out", str(target)])
        assert rc == 1
        assert "does not exist" in capsys.readouterr().err
        rc = main(["gen", "--ki", "--samples", "1024", "--out", str(target), "--create"])
        assert rc == 0
        assert (target / "ki.iq").exists()

    def test_nothing_to_generate(self, tmp_path, capsys):
        rc = main(["gen", "--out", str(tmp_path)])
        assert rc == 1
        assert "nothing to generate" in capsys.readouterr().err

    def test_env_seed_and_precedence(self, tmp_path, capsys, monkeypatch):
        def ki_bytes(name, *argv):
            d = tmp_path / name
            assert main(["gen", "--ki", "--samples", "1024",
                         "--out", str(d), "--create", *argv]) == 0
            return (d / "ki.iq").read_bytes()

        monkeypatch.delenv("KICLAB_SEED", raising=False)
        explicit = ki_bytes("w1", "--seed", "7")
        monkeypatch.setenv("KICLAB_SEED", "7")
        from_env = ki_bytes("w2")
        assert from_env == explicit
        cli_wins = ki_bytes("w3", "--seed", "8")
        assert cli_wins != explicit
        monkeypatch.setenv("KICLAB_SEED", "0")
        zero_env = ki_bytes("w4")
        monkeypatch.delenv("KICLAB_SEED")
        zero_cli = ki_bytes("w5", "--seed", "0")
        assert zero_env == zero_cli

    def test_invalid_env_seed(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("KICLAB_SEED", "abc")
        rc = main(["gen", "--ki", "--samples", "1024", "--out", str(tmp_path)])
        assert rc == 1
        assert "KICLAB_SEED" in capsys.readouterr().err


class TestRun:
    def test_prints_header_row_and_trace(self, capsys):
        rc = main(["run", *TINY_SETS])
        out = capsys.readouterr().out
        assert rc == 0
        lines = out.splitlines()
        assert lines[0] == CSV_HEADER
        assert len(lines[1].split(",")) == 12
        assert ",df_kic," in lines[1]
        assert any(ln.startswith("quality trace:") for ln in lines)
        assert any(ln.startswith("stop reason:") for ln in lines)

    def test_deterministic_given_seed(self, capsys):
        first = run_line(capsys, ["--seed", "21"])
        second = run_line(capsys, ["--seed", "21"])
        other = run_line(capsys, ["--seed", "22"])
        assert first == second
        assert first != other

    def test_mode_flag_is_applied(self, capsys):
        line = run_line(capsys, ["--mode", "base_kic"])
        assert ",base_kic," in line

    def test_unknown_key_is_named(self, capsys):
        rc = main(["run", "--set", "scenario.florp=1"])
        assert rc == 1
        assert "unknown config key scenario.florp" in capsys.readouterr().err

    def test_unknown_section_is_named(self, capsys):
        rc = main(["run", "--set", "bogus.x=1"])
        assert rc == 1
        assert "unknown config section" in capsys.readouterr().err

    def test_malformed_override(self, capsys):
        rc = main(["run", "--set", "noequals"])
        assert rc == 1
        assert "section.key=value" in capsys.readouterr().err

    def test_invalid_field_value_names_the_key(self, capsys):
        rc = main(["run", "--set", "ofdm.qam_order=weird"])
        assert rc == 1
        assert "ofdm.qam_order" in capsys.readouterr().err

    def test_config_validation_errors_name_the_section(self, capsys):
        rc = main(["run", *TINY_SETS, "--set", "ofdm.qam_order=12"])
        assert rc == 1
        assert "ofdm:" in capsys.readouterr().err

    def test_missing_config_file(self, capsys):
        rc = main(["run", "--config", "/nonexistent/kic.ini"])
        assert rc == 1
        assert "config file not found" in capsys.readouterr().err

    def test_config_file_seed_beats_env(self, tmp_path, capsys, monkeypatch):
        cfg = tmp_path / "bench.ini"
        cfg.write_text(
            "[scenario]\nseed = 4\nki_db = 30\nsi_db = 20\nn_frames = 1\n"
            "[ofdm]\nfft_size = 64\ncp_len = 4\nused_subcarriers = 48\n"
            "pilot_spacing = 6\nqam_order = 4\nsymbols_per_frame = 8\n"
        )
        monkeypatch.delenv("KICLAB_SEED", raising=False)
        want = run_line(capsys, ["--seed", "4"])

        def config_line():
            rc = main(["run", "--config", str(cfg)])
            out = capsys.readouterr().out
            assert rc == 0
            return out.splitlines()[1]

        assert config_line() == want
        monkeypatch.setenv("KICLAB_SEED", "9")
        assert config_line() == want  # explicit config seed still wins

    def test_env_seed_fills_the_default(self, capsys, monkeypatch):
        monkeypatch.delenv("KICLAB_SEED", raising=False)
        want = run_line(capsys, ["--seed", "3"])
        monkeypatch.setenv("KICLAB_SEED", "3")
        assert run_line(capsys, []) == want

    def test_dump_iq_requires_out(self, capsys):
        rc = main(["run", *TINY_SETS, "--dump-iq"])
        assert rc == 1
        assert "requires --out" in capsys.readouterr().err

    def test_out_writes_row_and_iq(self, tmp_path, capsys):
        out_dir = tmp_path / "dump"
        line = run_line(capsys, ["--seed", "21", "--out", str(out_dir), "--dump-iq"])
        rows = read_rows(out_dir / "row.csv")
        assert len(rows) == 1
        from kiclab.labbench import row_to_line
        assert row_to_line(rows[0]) == line
        ofdm_len = (64 + 4) * 8
        received = read_iq(out_dir / "received.iq")
        assert len(received) == ofdm_len
        resid = read_iq(out_dir / "residual_iter0.iq")
        assert len(resid) == ofdm_len

    def test_flagged_scenario_is_a_runtime_failure(self, capsys):
        rc = main(["run", *TINY_SETS,
                   "--set", "scenario.si_db=off",
                   "--set", "scenario.mode=base_kic",
                   "--set", "canceller.mu_w=1e9"])
        assert rc == 2
        assert "scenario flagged: diverged" in capsys.readouterr().err

    def test_unwritable_output_is_a_runtime_failure(self, tmp_path, capsys):
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        rc = main(["run", *TINY_SETS, "--out", str(blocker / "sub")])
        assert rc == 2
        assert "error:" in capsys.readouterr().err


SWEEP_INI = """\
[sweep]
ki_lo = 20
ki_hi = 20
ki_step = 5
si_lo = 15
si_hi = 15
si_step = 5
modes = df_kic
n_seeds = 1

[scenario]
n_frames = 1

[ofdm]
fft_size = 64
cp_len = 4
used_subcarriers = 48
pilot_spacing = 6
qam_order = 4
symbols_per_frame = 8
"""


class TestSweep:
    @pytest.fixture
    def ini(self, tmp_path):
        path = tmp_path / "sweep.ini"
        path.write_text(SWEEP_INI)
        return path

    def test_writes_grid_csv(self, ini, tmp_path, capsys):
        out = tmp_path / "grid.csv"
        rc = main(["sweep", "--config", str(ini), "--out", str(out)])
        assert rc == 0
        assert "wrote 1 rows" in capsys.readouterr().out
        rows = read_rows(out)
        assert len(rows) == 1
        assert rows[0].mode == "df_kic"

    def test_missing_range_keys_are_listed(self, tmp_path, capsys):
        path = tmp_path / "bad.ini"
        path.write_text("[sweep]\nki_lo = 20\n")
        rc = main(["sweep", "--config", str(path), "--out", str(tmp_path / "o.csv")])
        assert rc == 1
        err = capsys.readouterr().err
        assert "sweep.ki_hi" in err and "sweep.si_step" in err

    def test_refuses_overwrite_without_force(self, ini, tmp_path, capsys):
        out = tmp_path / "grid.csv"
        assert main(["sweep", "--config", str(ini), "--out", str(out)]) == 0
        capsys.readouterr()
        rc = main(["sweep", "--config", str(ini), "--out", str(out)])
        assert rc == 1
        assert "refusing to overwrite" in capsys.readouterr().err
        rc = main(["sweep", "--config", str(ini), "--out", str(out), "--force"])
        assert rc == 0

    def test_worker_count_does_not_change_output(self, ini, tmp_path, capsys):
        one = tmp_path / "w1.csv"
        many = tmp_path / "w3.csv"
        assert main(["sweep", "--config", str(ini), "--out", str(one)]) == 0
        assert main(["sweep", "--config", str(ini), "--out", str(many),
                     "--workers", "3"]) == 0
        assert one.read_bytes() == many.read_bytes()

    def test_unknown_mode_in_config(self, ini, tmp_path, capsys):
        rc = main(["sweep", "--config", str(ini), "--out", str(tmp_path / "o.csv"),
                   "--set", "sweep.modes=warp"])
        assert rc == 1
        assert "unknown mode" in capsys.readouterr().err

    def test_all_flagged_grid_is_a_runtime_failure(self, ini, tmp_path, capsys):
        out = tmp_path / "flagged.csv"
        rc = main(["sweep", "--config", str(ini), "--out", str(out),
                   "--set", "canceller.mu_w=1e9"])
        assert rc == 2
        assert "every grid point failed" in capsys.readouterr().err
        # the CSV is still written for post-mortem
        assert read_rows(out)[0].flags == "diverged"


class TestSelftest:
    def test_passes_and_tabulates(self, capsys):
        rc = main(["selftest"])
        out = capsys.readouterr().out
        assert rc == 0
        assert out.count("PASS") == 7
        assert "all checks passed" in out

    def test_forced_failure_returns_one(self, capsys):
        rc = main(["selftest", "--force-fail"])
        out = capsys.readouterr().out
        assert rc == 1
        assert "FAIL" in out
        assert "1 check(s) failed" in out
