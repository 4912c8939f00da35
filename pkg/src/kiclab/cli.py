"""Command-line bench driver.

Subcommands:

* ``gen``      write deterministic interference / OFDM waveform fixtures
* ``run``      simulate one scenario, print its row and quality trace
* ``sweep``    run a (ki_db, si_db, mode, seed) grid to a CSV file
* ``selftest`` fast invariant suite, tabulated

Scenario settings come from an INI-style config file whose sections mirror
the library config types one-to-one ([scenario], [ofdm], [canceller],
[dfkic], [sweep]); any key can be overridden with ``--set section.key=value``.
``KICLAB_SEED`` provides the default seed when no config or override sets
one.  Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
import time
from pathlib import Path

import numpy as np

from kiclab.core import ComplexSignal, RngSeed, SignalError, gaussian_stream
from kiclab.canceller import CancellerConfig, cancel, init_state
from kiclab.impairments import frac_interp, read_iq, write_iq
from kiclab.labbench import (
    CSV_HEADER,
    MODES,
    ScenarioConfig,
    row_to_line,
    run_scenario,
    sweep_grid,
    write_rows,
)
from kiclab.waveform import (
    QAM_ORDERS,
    OfdmConfig,
    generate_ki,
    ofdm_demodulate,
    ofdm_modulate,
    qam_map,
    qam_slice,
    qam_table,
    random_frame,
)

SYMBOLS_CSV_HEADER = "frame,symbol,cell,index"

_SCENARIO_TYPES = {
    "seed": int, "mode": str, "ki_db": float, "si_db": "opt_float",
    "n_frames": int, "warmup_frames": int, "code_rate": float,
    "transient_fraction": float,
    "ki_cfo": float, "ki_sfo": float, "ki_n_taps": int, "ki_passband": float,
    "si_cfo": float, "si_sfo": float, "si_n_taps": int,
    "max_iterations": int, "quality_target": "opt_float",
}
_OFDM_TYPES = {
    "fft_size": int, "cp_len": int, "used_subcarriers": int,
    "pilot_spacing": int, "qam_order": int, "symbols_per_frame": int,
    "training_symbols": int, "sample_rate_hz": float,
}
_CANCELLER_TYPES = {
    "n_taps": int, "mu_w": float, "mu_eps": float, "mu_eta": float,
    "lambda_e": float, "lambda_r": float, "lambda_y": float,
    "lambda_eps": float, "lambda_eta": float,
    "noise_guess": float, "regularizer": float,
}
_DFKIC_TYPES = {"max_iterations": int, "quality_target": "opt_float"}
_SWEEP_TYPES = {
    "ki_lo": float, "ki_hi": float, "ki_step": float,
    "si_lo": float, "si_hi": float, "si_step": float,
    "modes": str, "n_seeds": int, "workers": int,
}
_SECTION_TYPES = {
    "scenario": _SCENARIO_TYPES,
    "ofdm": _OFDM_TYPES,
    "canceller": _CANCELLER_TYPES,
    "dfkic": _DFKIC_TYPES,
    "sweep": _SWEEP_TYPES,
}


class _RuntimeFailure(Exception):
    """Command-level failure that is not a configuration problem."""


class _Parser(argparse.ArgumentParser):
    # Usage problems are validation errors: exit 1, not argparse's 2.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _coerce(section: str, key: str, raw: str):
    types = _SECTION_TYPES.get(section)
    if types is None:
        raise SignalError(f"unknown config section {section!r}")
    typ = types.get(key)
    if typ is None:
        raise SignalError(f"unknown config key {section}.{key}")
    raw = raw.strip()
    try:
        if typ == "opt_float":
            if raw.lower() in ("none", "off", ""):
                return None
            return float(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise SignalError(f"{section}.{key}: {exc}") from exc


def _read_settings(config_path, set_pairs) -> dict[str, dict[str, object]]:
    """Merge config file then ``--set`` overrides into typed per-section
    dicts.  Errors name ``section.key``."""
    settings: dict[str, dict[str, object]] = {s: {} for s in _SECTION_TYPES}
    if config_path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        found = parser.read(config_path)
        if not found:
            raise SignalError(f"config file not found: {config_path}")
        for section in parser.sections():
            if section not in _SECTION_TYPES:
                raise SignalError(f"unknown config section {section!r}")
            for key, raw in parser.items(section):
                settings[section][key] = _coerce(section, key, raw)
    for pair in set_pairs or ():
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise SignalError(f"override must look like section.key=value, got {pair!r}")
        target, raw = pair.split("=", 1)
        section, key = target.split(".", 1)
        if section not in _SECTION_TYPES:
            raise SignalError(f"unknown config section {section!r}")
        settings[section][key] = _coerce(section, key, raw)
    return settings


def _env_seed() -> int | None:
    raw = os.environ.get("KICLAB_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise SignalError(f"KICLAB_SEED: {exc}") from exc


def _build_ofdm(ofdm_kv: dict[str, object]) -> OfdmConfig:
    kv = dict(ofdm_kv)
    spacing = kv.pop("pilot_spacing", None)
    kwargs = dict(kv)
    if spacing is not None:
        used = int(kwargs.get("used_subcarriers", OfdmConfig.used_subcarriers))
        if spacing < 1:
            raise SignalError("ofdm.pilot_spacing must be at least 1")
        kwargs["pilot_index_set"] = tuple(range(0, used, int(spacing)))
    try:
        return OfdmConfig(**kwargs)
    except SignalError as exc:
        raise SignalError(f"ofdm: {exc}") from exc


def _build_scenario(settings, cli_seed=None, cli_mode=None) -> ScenarioConfig:
    scen = dict(settings["scenario"])
    for key, value in settings["dfkic"].items():
        scen[key] = value
    if cli_mode is not None:
        scen["mode"] = cli_mode
    if cli_seed is not None:
        scen["seed"] = cli_seed
    elif "seed" not in scen:
        env = _env_seed()
        if env is not None:
            scen["seed"] = env
    ofdm = _build_ofdm(settings["ofdm"])
    try:
        canceller = CancellerConfig(**settings["canceller"])
    except SignalError as exc:
        raise SignalError(f"canceller: {exc}") from exc
    try:
        return ScenarioConfig(ofdm=ofdm, canceller=canceller, **scen)
    except SignalError as exc:
        raise SignalError(f"scenario: {exc}") from exc
    except TypeError as exc:
        raise SignalError(f"scenario: {exc}") from exc


def _cmd_gen(args) -> int:
    out_dir = Path(args.out)
    if not out_dir.is_dir():
        if not args.create:
            raise SignalError(
                f"output directory {out_dir} does not exist (pass --create to make it)"
            )
        out_dir.mkdir(parents=True, exist_ok=True)
    if not (args.ki or args.si):
        raise SignalError("nothing to generate: pass --ki and/or --si")
    env = _env_seed()
    seed = args.seed if args.seed is not None else (env if env is not None else 1)
    rate = int(args.rate)
    if args.ki:
        sig = generate_ki(RngSeed(seed).derive(1), args.samples, args.passband, float(rate))
        write_iq(sig, out_dir / "ki.iq")
        print(f"wrote {out_dir / 'ki.iq'} ({args.samples} samples)")
    if args.si:
        ofdm = OfdmConfig(qam_order=args.qam, symbols_per_frame=args.symbols,
                          sample_rate_hz=float(rate))
        frame = random_frame(ofdm, RngSeed(seed).derive(2))
        sig = ofdm_modulate(frame, ofdm)
        write_iq(sig, out_dir / "si.iq")
        with open(out_dir / "si_symbols.csv", "w", encoding="ascii", newline="\n") as fh:
            fh.write(SYMBOLS_CSV_HEADER + "\n")
            for r in range(frame.data_indices.shape[0]):
                for c in range(frame.data_indices.shape[1]):
                    fh.write(f"0,{r},{c},{int(frame.data_indices[r, c])}\n")
        print(f"wrote {out_dir / 'si.iq'} ({len(sig)} samples)")
        print(f"wrote {out_dir / 'si_symbols.csv'}")
    return 0


def _cmd_run(args) -> int:
    settings = _read_settings(args.config, args.set)
    cfg = _build_scenario(settings, cli_seed=args.seed, cli_mode=args.mode)
    row, details = run_scenario(cfg, collect_details=True)
    print(CSV_HEADER)
    print(row_to_line(row))
    if details.quality_trace:
        trace = " ".join(repr(float(v)) for v in details.quality_trace)
        print(f"quality trace: {trace}")
        print(f"stop reason: {details.stop_reason}")
    if args.out is not None:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_rows([row], out_dir / "row.csv")
        if args.dump_iq:
            if details.received is not None:
                write_iq(details.received, out_dir / "received.iq")
            for k, resid in enumerate(details.iteration_residuals):
                write_iq(resid, out_dir / f"residual_iter{k}.iq")
    elif args.dump_iq:
        raise SignalError("--dump-iq requires --out DIR")
    if row.flags:
        raise _RuntimeFailure(f"scenario flagged: {row.flags}")
    return 0


def _cmd_sweep(args) -> int:
    settings = _read_settings(args.config, args.set)
    sw = settings["sweep"]
    required = ("ki_lo", "ki_hi", "ki_step", "si_lo", "si_hi", "si_step")
    missing = [k for k in required if k not in sw]
    if missing:
        raise SignalError(f"sweep config missing {', '.join('sweep.' + m for m in missing)}")
    modes_raw = sw.get("modes", "base_kic df_kic")
    modes = tuple(m for m in str(modes_raw).replace(",", " ").split() if m)
    for m in modes:
        if m not in MODES:
            raise SignalError(f"sweep.modes: unknown mode {m!r}")
    base = _build_scenario(settings, cli_seed=args.seed)
    out_path = Path(args.out)
    if out_path.exists() and not args.force:
        raise SignalError(f"refusing to overwrite {out_path} (pass --force)")
    if out_path.parent and not out_path.parent.is_dir():
        out_path.parent.mkdir(parents=True, exist_ok=True)
    workers = args.workers if args.workers is not None else int(sw.get("workers", 1))
    t0 = time.time()
    rows = sweep_grid(
        base,
        (float(sw["ki_lo"]), float(sw["ki_hi"]), float(sw["ki_step"])),
        (float(sw["si_lo"]), float(sw["si_hi"]), float(sw["si_step"])),
        modes=modes,
        n_seeds=int(sw.get("n_seeds", 1)),
        workers=workers,
    )
    write_rows(rows, out_path)
    flagged = sum(1 for r in rows if r.flags)
    print(f"wrote {len(rows)} rows to {out_path} in {time.time() - t0:.1f} s"
          + (f" ({flagged} flagged)" if flagged else ""))
    if rows and flagged == len(rows):
        raise _RuntimeFailure("every grid point failed")
    return 0


def _selftest_checks(force_fail: bool):
    """Yield (name, callable) pairs; each callable raises on failure."""

    def check_rng_repeatable():
        a = gaussian_stream(RngSeed(11), 256).samples
        b = gaussian_stream(RngSeed(11), 256).samples
        if not np.array_equal(a, b):
            raise AssertionError("generator stream not reproducible")

    def check_qam_round_trip():
        for order in QAM_ORDERS:
            idx = np.arange(order, dtype=np.int64)
            back, _ = qam_slice(qam_map(idx, order), order)
            if not np.array_equal(back, idx):
                raise AssertionError(f"order {order} round trip failed")
            power = float(np.mean(np.abs(qam_table(order)) ** 2))
            if abs(power - 1.0) > 1e-12:
                raise AssertionError(f"order {order} not unit energy")

    def check_interpolator_gradient():
        buf = gaussian_stream(RngSeed(12), 64).samples
        pos = 17.37
        h = 1e-6
        hi, _ = frac_interp(buf, pos + h)
        lo, _ = frac_interp(buf, pos - h)
        num = (hi - lo) / (2 * h)
        _, ana = frac_interp(buf, pos)
        if abs(num - ana) > 1e-5 * max(1.0, abs(num)):
            raise AssertionError("interpolator derivative mismatch")

    def check_ofdm_round_trip():
        ofdm = OfdmConfig(qam_order=64, symbols_per_frame=8)
        frame = random_frame(ofdm, RngSeed(13))
        sig = ofdm_modulate(frame, ofdm)
        est, quality = ofdm_demodulate(sig, ofdm)
        if not np.array_equal(est.data_indices, frame.data_indices):
            raise AssertionError("clean demodulation flipped a symbol")
        tol = 1e-10 if not force_fail else 1e-18
        if quality.evm_rms > tol:
            raise AssertionError(f"clean-channel EVM {quality.evm_rms:.3e} above {tol:.0e}")

    def check_iq_round_trip():
        import tempfile
        sig = gaussian_stream(RngSeed(14), 512, sample_rate_hz=48000.0)
        with tempfile.TemporaryDirectory() as d:
            path = Path(d) / "probe.iq"
            write_iq(sig, path)
            back = read_iq(path)
        if back.sample_rate_hz != sig.sample_rate_hz:
            raise AssertionError("sample rate not preserved")
        if not np.allclose(back.samples, sig.samples, atol=1e-6):
            raise AssertionError("float32 round trip off")

    def check_zero_inputs():
        n = 2048
        ref = gaussian_stream(RngSeed(15), n).samples
        cfg = CancellerConfig()
        _, err, _ = cancel(
            ComplexSignal(ref, 1.0),
            ComplexSignal(np.zeros(n, dtype=np.complex128), 1.0),
            init_state(cfg), cfg,
        )
        if float(np.max(np.abs(err.samples))) > 1e-6:
            raise AssertionError("zero desired signal produced nonzero error")

    def check_canceller_descends():
        n = 16384
        ref = gaussian_stream(RngSeed(16), n)
        taps = np.array([0.9 - 0.2j, 0.1 + 0.05j], dtype=np.complex128)
        from scipy.signal import lfilter
        des = lfilter(taps, [1.0], ref.samples)
        cfg = CancellerConfig()
        _, err, _ = cancel(ref, ComplexSignal(des, 1.0), init_state(cfg), cfg)
        tail = err.samples[n // 2:]
        before = float(np.mean(np.abs(des[n // 2:]) ** 2))
        after = float(np.mean(np.abs(tail) ** 2))
        if after > before * 1e-2:
            raise AssertionError(f"no descent: {after:.3e} vs {before:.3e}")

    yield "rng stream repeatable", check_rng_repeatable
    yield "qam tables round-trip, unit energy", check_qam_round_trip
    yield "fractional-delay derivative vs finite difference", check_interpolator_gradient
    yield "ofdm clean-channel round trip", check_ofdm_round_trip
    yield "iq file round trip", check_iq_round_trip
    yield "canceller zero-input rest", check_zero_inputs
    yield "canceller error descent", check_canceller_descends


def _cmd_selftest(args) -> int:
    failures = 0
    for name, fn in _selftest_checks(args.force_fail):
        t0 = time.time()
        try:
            fn()
            status = "PASS"
        except Exception as exc:
            status = f"FAIL ({exc})"
            failures += 1
        print(f"{name:<48s} {status:<40s} {time.time() - t0:6.2f} s")
    if failures:
        print(f"{failures} check(s) failed")
        return 1
    print("all checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kiclab", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="write deterministic waveform fixtures")
    p_gen.add_argument("--ki", action="store_true", help="write ki.iq")
    p_gen.add_argument("--si", action="store_true", help="write si.iq plus si_symbols.csv")
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--samples", type=int, default=65536, help="ki.iq length")
    p_gen.add_argument("--passband", type=float, default=5.0 / 6.5,
                       help="interference bandwidth as a fraction of the sample rate")
    p_gen.add_argument("--qam", type=int, default=16, choices=QAM_ORDERS)
    p_gen.add_argument("--symbols", type=int, default=100, help="OFDM symbols per frame")
    p_gen.add_argument("--rate", type=int, default=6_144_000, help="sample rate, Hz")
    p_gen.add_argument("--out", default=".", help="output directory")
    p_gen.add_argument("--create", action="store_true", help="create the directory if absent")
    p_gen.set_defaults(func=_cmd_gen)

    p_run = sub.add_parser("run", help="simulate one scenario")
    p_run.add_argument("--config", default=None, help="INI config path")
    p_run.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--mode", default=None, choices=MODES)
    p_run.add_argument("--out", default=None, help="directory for row.csv and IQ dumps")
    p_run.add_argument("--dump-iq", action="store_true",
                       help="also write received.iq and per-iteration residual IQ")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a grid to CSV")
    p_sweep.add_argument("--config", required=True, help="INI config path")
    p_sweep.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--out", required=True, help="output CSV path")
    p_sweep.add_argument("--workers", type=int, default=None)
    p_sweep.add_argument("--force", action="store_true", help="overwrite existing output")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_self = sub.add_parser("selftest", help="fast invariant suite")
    p_self.add_argument("--force-fail", action="store_true", help=argparse.SUPPRESS)
    p_self.set_defaults(func=_cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SignalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _RuntimeFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
