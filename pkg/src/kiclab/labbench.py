"""Scenario assembly, figure-of-merit extraction, and sweep orchestration.

A scenario superposes, over unit-variance receiver noise:

* known interference: band-limited Gaussian noise through a random FIR
  channel with carrier and sampling clock offsets, scaled so its received
  power is exactly ``ki_db`` (power dB over the noise floor), and
* an OFDM signal of interest through its own, independent channel, scaled
  to ``si_db``; ``si_db=None`` turns the transmitter off.

Every random draw comes from a deterministic substream of the scenario
seed, so a row is a pure function of its configuration.  Residual
interference is measured by truth decomposition: the canceller's final
interference estimate is compared against the noiseless received
interference, over the buffer with the leading ``transient_fraction``
excluded, and referenced to the noise floor.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from kiclab.canceller import (
    CancellerConfig,
    CancellerDivergence,
    EstimatorState,
    cancel,
    init_state,
    shift_reference,
)
from kiclab.core import (
    ComplexSignal,
    RngSeed,
    SignalError,
    db_to_linear,
    mean_power,
)
from kiclab.dfkic import DfkicConfig, DfkicResult, df_kic
from kiclab.impairments import ImpairmentParams, apply_channel, superpose
from kiclab.waveform import (
    QAM_ORDERS,
    FrameSymbols,
    OfdmConfig,
    generate_ki,
    ofdm_demodulate,
    ofdm_modulate,
    random_frame,
)

MODES = ("no_ki", "base_kic", "df_kic")

# Link-quality target used for contour extraction and iteration statistics.
SER_TARGET = 1e-3

CSV_HEADER = (
    "ki_db,si_db,mode,qam,residual_ki_db,post_kic_sinr_db,"
    "ser,evm,iterations,goodput_bps,seed,flags"
)

# Substream tags of the scenario seed.
_TAG_KI_WAVE = 1
_TAG_KI_TAPS = 2
_TAG_KI_CHAN = 3
_TAG_SI_TAPS = 4
_TAG_SI_CHAN = 5
_TAG_RX_NOISE = 6
_TAG_KI_PHASE = 7
_TAG_SI_PHASE = 8
_TAG_SI_DATA = 100  # + frame index


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to reproduce one bench run."""

    seed: int = 1
    mode: str = "df_kic"
    ki_db: float = 30.0
    si_db: float | None = 40.0
    n_frames: int = 2
    warmup_frames: int = 0
    code_rate: float = 0.75
    transient_fraction: float = 0.2
    ki_cfo: float = 1e-3
    ki_sfo: float = 1e-5
    ki_n_taps: int = 5
    ki_passband: float = 5.0 / 6.5
    si_cfo: float = 1e-4
    si_sfo: float = 1e-6
    si_n_taps: int = 3
    max_iterations: int = 8
    quality_target: float | None = None
    ofdm: OfdmConfig = field(default_factory=OfdmConfig)
    canceller: CancellerConfig = field(default_factory=CancellerConfig)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise SignalError(f"mode must be one of {MODES}")
        if self.si_db is None and self.mode == "no_ki":
            raise SignalError("no_ki mode with the signal of interest off receives nothing")
        if self.n_frames < 1:
            raise SignalError("n_frames must be at least 1")
        if not 0 <= self.warmup_frames < self.n_frames:
            raise SignalError("warmup_frames must leave at least one measured frame")
        if not 0.0 < float(self.code_rate) <= 1.0:
            raise SignalError("code_rate must lie in (0, 1]")
        if not 0.0 <= float(self.transient_fraction) < 1.0:
            raise SignalError("transient_fraction must lie in [0, 1)")
        if self.ki_n_taps < 1 or self.si_n_taps < 1:
            raise SignalError("channel tap counts must be at least 1")
        if self.max_iterations < 0:
            raise SignalError("max_iterations must be nonnegative")
        RngSeed(self.seed)  # validates the range


@dataclass(frozen=True)
class SweepRow:
    """One CSV row; field order matches the header exactly."""

    ki_db: float
    si_db: float
    mode: str
    qam: int
    residual_ki_db: float
    post_kic_sinr_db: float
    ser: float
    evm: float
    iterations: float
    goodput_bps: float
    seed: int
    flags: str = ""


@dataclass
class ScenarioDetails:
    """Heavy diagnostics for plotting and debugging (first measured frame)."""

    received: ComplexSignal | None = None
    iteration_residuals: tuple[ComplexSignal, ...] = ()
    quality_trace: tuple[float, ...] = ()
    raw_quality: float = float("nan")
    stop_reason: str = ""
    ki_rx_clean: ComplexSignal | None = None


def ser(estimate: FrameSymbols, truth: FrameSymbols) -> float:
    """Fraction of data cells whose hard index differs from the truth."""
    if estimate.data_indices.shape != truth.data_indices.shape:
        raise SignalError("symbol grids must have equal shape")
    if estimate.data_indices.size == 0:
        raise SignalError("symbol error rate of an empty grid is undefined")
    return float(np.mean(estimate.data_indices != truth.data_indices))


def goodput(ser_value: float, order: int, code_rate: float = 0.75) -> float:
    """Useful bits per data cell: (1 - ser) * log2(order) * code_rate."""
    if not 0.0 <= float(ser_value) <= 1.0:
        raise SignalError("ser must lie in [0, 1]")
    if order not in QAM_ORDERS:
        raise SignalError(f"unsupported QAM order {order}")
    if not 0.0 < float(code_rate) <= 1.0:
        raise SignalError("code_rate must lie in (0, 1]")
    return float((1.0 - ser_value) * math.log2(order) * code_rate)


def min_sinr_for_target(
    points: list[tuple[float, float]], target: float = SER_TARGET,
) -> float:
    """Minimum SINR (dB) at which the error rate first meets ``target``.

    ``points`` are (sinr_db, ser) samples; the crossing is located by
    linear interpolation in dB between the adjacent samples that straddle
    the target.  NaN when the target is never met.
    """
    pts = sorted((float(x), float(s)) for x, s in points if not math.isnan(s))
    if not pts:
        raise SignalError("no usable (sinr, ser) points")
    if pts[0][1] <= target:
        return pts[0][0]
    for (x1, s1), (x2, s2) in zip(pts, pts[1:]):
        if s2 <= target < s1:
            return float(x1 + (x2 - x1) * (s1 - target) / (s1 - s2))
    return float("nan")


def _channel_taps(seed: RngSeed, n: int) -> np.ndarray:
    """Random unit-norm FIR with a -6 dB-per-tap power profile."""
    from kiclab.core import gaussian_stream

    raw = gaussian_stream(seed, n).samples
    prof = 10.0 ** (-0.3 * np.arange(n))
    taps = raw * prof
    return taps / np.sqrt(np.sum(np.abs(taps) ** 2))


def _uniform_phase(seed: RngSeed) -> float:
    from kiclab.core import raw_words

    w = raw_words(seed, 1)[0]
    return float((int(w) >> 11) * 2.0**-53 * 2.0 * np.pi)


def _scale_to_power(sig: ComplexSignal, target_power: float) -> ComplexSignal:
    g = np.sqrt(target_power / mean_power(sig))
    return ComplexSignal(sig.samples * g, sig.sample_rate_hz)


def _advance_unused(state: EstimatorState, n: int) -> EstimatorState:
    """Carry a state across a frame it never processed: fast-forward the
    integrators at the converged rates, then rebase to the next slice."""
    moved = replace(
        state,
        phase_acc=state.phase_acc + n * state.eps_hat,
        position_acc=state.position_acc + n * (1.0 + state.eta_hat),
    )
    return shift_reference(moved, n)


def run_scenario(
    cfg: ScenarioConfig, collect_details: bool = False,
) -> SweepRow | tuple[SweepRow, ScenarioDetails]:
    """Simulate one scenario and distill it into a sweep row.

    Warmup frames run with full estimator state chaining but are left out
    of every reported metric, so the row reflects tracking behaviour
    rather than cold acquisition.  Estimator divergence is reported as a
    flagged row with NaN metrics, not an exception.
    """
    seed = RngSeed(cfg.seed)
    ofdm = cfg.ofdm
    rate = ofdm.sample_rate_hz
    frame_len = ofdm.frame_len
    n_total = cfg.n_frames * frame_len
    noise_var = 1.0
    details = ScenarioDetails()

    parts: list[ComplexSignal] = []

    x = None
    ki_rx = None
    if cfg.mode != "no_ki":
        x = generate_ki(seed.derive(_TAG_KI_WAVE), n_total, cfg.ki_passband, rate)
        ki_params = ImpairmentParams(
            taps=_channel_taps(seed.derive(_TAG_KI_TAPS), cfg.ki_n_taps),
            cfo_rad_per_sample=cfg.ki_cfo,
            sfo_rate=cfg.ki_sfo,
            initial_phase=_uniform_phase(seed.derive(_TAG_KI_PHASE)),
        )
        ki_rx = _scale_to_power(
            apply_channel(x, ki_params, seed.derive(_TAG_KI_CHAN)),
            db_to_linear(cfg.ki_db) * noise_var,
        )
        parts.append(ki_rx)

    truth_frames: list[FrameSymbols] = []
    si_rx = None
    if cfg.si_db is not None:
        chunks = []
        for f in range(cfg.n_frames):
            fr = random_frame(ofdm, seed.derive(_TAG_SI_DATA + f))
            truth_frames.append(fr)
            chunks.append(ofdm_modulate(fr, ofdm).samples)
        s = ComplexSignal(np.concatenate(chunks), rate)
        si_params = ImpairmentParams(
            taps=_channel_taps(seed.derive(_TAG_SI_TAPS), cfg.si_n_taps),
            cfo_rad_per_sample=cfg.si_cfo,
            sfo_rate=cfg.si_sfo,
            initial_phase=_uniform_phase(seed.derive(_TAG_SI_PHASE)),
        )
        si_rx = _scale_to_power(
            apply_channel(s, si_params, seed.derive(_TAG_SI_CHAN)),
            db_to_linear(cfg.si_db) * noise_var,
        )
        parts.append(si_rx)

    d = superpose(parts, noise_var, seed.derive(_TAG_RX_NOISE))
    if collect_details:
        details.received = d
        details.ki_rx_clean = ki_rx

    warm_end = cfg.warmup_frames * frame_len
    win = slice(max(int(cfg.transient_fraction * n_total), warm_end), n_total)

    ser_val = float("nan")
    evm_val = float("nan")
    iters_val = 0.0
    residual_db = float("nan")
    sinr_db = float("nan")
    flags = ""

    try:
        if cfg.mode == "no_ki":
            err_sq = ref_sq = 0.0
            errors = total = 0
            for f in range(cfg.warmup_frames, cfg.n_frames):
                est, qual = ofdm_demodulate(d, ofdm, f * frame_len)
                errors += int(np.sum(est.data_indices != truth_frames[f].data_indices))
                total += est.data_indices.size
                err_sq += qual.err_sum_sq
                ref_sq += qual.ref_sum_sq
            ser_val = float(errors / total)
            evm_val = float(np.sqrt(err_sq / ref_sq))
            sinr_db = float(10.0 * np.log10(mean_power(si_rx.samples[win]) / noise_var))
        elif cfg.si_db is None:
            # Nothing to demodulate: the bench only measures the canceller.
            canc_cfg = cfg.canceller
            d_hat, _, _ = cancel(x, d, init_state(canc_cfg), canc_cfg)
            resid_power = mean_power(ki_rx.samples[win] - d_hat.samples[win])
            residual_db = float(10.0 * np.log10(resid_power / noise_var))
            sinr_db = float("nan")
        else:
            dfcfg = DfkicConfig(
                ofdm=ofdm,
                canceller=cfg.canceller,
                max_iterations=0 if cfg.mode == "base_kic" else cfg.max_iterations,
                quality_target=cfg.quality_target,
            )
            zx: EstimatorState | None = None
            zs: EstimatorState | None = None
            ki_est_chunks = []
            err_sq = ref_sq = 0.0
            errors = total = 0
            iters = []
            for f in range(cfg.n_frames):
                lo, hi = f * frame_len, (f + 1) * frame_len
                x_f = ComplexSignal(x.samples[lo:hi], rate)
                d_f = ComplexSignal(d.samples[lo:hi], rate)
                res: DfkicResult = df_kic(
                    x_f, d_f, dfcfg, 0,
                    initial_ki_state=zx,
                    initial_si_state=zs,
                    collect_residuals=collect_details and f == cfg.warmup_frames,
                )
                zx = shift_reference(res.ki_state, frame_len)
                if res.si_state is not None:
                    zs = shift_reference(res.si_state, frame_len)
                elif zs is not None:
                    zs = _advance_unused(zs, frame_len)
                ki_est_chunks.append(res.ki_estimate.samples)
                if f >= cfg.warmup_frames:
                    errors += int(np.sum(res.symbols.data_indices != truth_frames[f].data_indices))
                    total += res.symbols.data_indices.size
                    err_sq += res.quality.err_sum_sq
                    ref_sq += res.quality.ref_sum_sq
                    iters.append(res.iterations_used)
                if collect_details and f == cfg.warmup_frames:
                    details.iteration_residuals = res.iteration_residuals
                    details.quality_trace = res.quality_trace
                    details.raw_quality = res.raw_quality
                    details.stop_reason = res.stop_reason
            ser_val = float(errors / total)
            evm_val = float(np.sqrt(err_sq / ref_sq))
            iters_val = float(np.mean(iters))
            ki_est = np.concatenate(ki_est_chunks)
            resid_power = mean_power(ki_rx.samples[win] - ki_est[win])
            residual_db = float(10.0 * np.log10(resid_power / noise_var))
            sinr_db = float(10.0 * np.log10(
                mean_power(si_rx.samples[win]) / (resid_power + noise_var)
            ))
    except CancellerDivergence:
        flags = "diverged"
        ser_val = evm_val = float("nan")
        iters_val = float("nan")
        residual_db = sinr_db = float("nan")

    good = goodput(ser_val, ofdm.qam_order, cfg.code_rate) if not math.isnan(ser_val) else float("nan")
    row = SweepRow(
        ki_db=float(cfg.ki_db),
        si_db=float("-inf") if cfg.si_db is None else float(cfg.si_db),
        mode=cfg.mode,
        qam=ofdm.qam_order,
        residual_ki_db=residual_db,
        post_kic_sinr_db=sinr_db,
        ser=ser_val,
        evm=evm_val,
        iterations=iters_val,
        goodput_bps=good,
        seed=cfg.seed,
        flags=flags,
    )
    if collect_details:
        return row, details
    return row


def _range_values(lo: float, hi: float, step: float) -> list[float]:
    if step <= 0:
        raise SignalError("range step must be positive")
    if hi < lo:
        raise SignalError("range upper bound below lower bound")
    count = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return [float(lo + k * step) for k in range(count)]


def _row_seed(base_seed: int, ki_idx: int, si_idx: int, mode_idx: int, rep: int) -> int:
    return (
        RngSeed(base_seed)
        .derive(1000 + ki_idx)
        .derive(2000 + si_idx)
        .derive(3000 + mode_idx)
        .derive(4000 + rep)
        .seed
    )


def _sweep_point(cfg: ScenarioConfig) -> SweepRow:
    return run_scenario(cfg)


def sweep_grid(
    base: ScenarioConfig,
    ki_range: tuple[float, float, float],
    si_range: tuple[float, float, float],
    modes: tuple[str, ...] = ("base_kic", "df_kic"),
    n_seeds: int = 3,
    workers: int = 1,
) -> list[SweepRow]:
    """Run the inclusive (lo, hi, step) grid; row order and content do not
    depend on ``workers``.  Each row's seed derives from the base seed and
    the row's grid coordinates alone."""
    for m in modes:
        if m not in MODES:
            raise SignalError(f"mode must be one of {MODES}")
    if n_seeds < 1:
        raise SignalError("n_seeds must be at least 1")
    if workers < 1:
        raise SignalError("workers must be at least 1")
    configs = []
    for i_ki, ki in enumerate(_range_values(*ki_range)):
        for i_si, si in enumerate(_range_values(*si_range)):
            for i_mode, mode in enumerate(modes):
                for rep in range(n_seeds):
                    configs.append(replace(
                        base,
                        ki_db=ki,
                        si_db=si,
                        mode=mode,
                        seed=_row_seed(base.seed, i_ki, i_si, i_mode, rep),
                    ))
    if workers == 1:
        rows = [_sweep_point(c) for c in configs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, configs, chunksize=1))
    rows.sort(key=lambda r: (r.ki_db, r.si_db, r.mode, r.seed))
    return rows


def _format_cell(value) -> str:
    if isinstance(value, str):
        if "," in value or "\n" in value or "\r" in value:
            raise SignalError("text cells must not contain separators")
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def row_to_line(r: SweepRow) -> str:
    """One CSV data line, column order matching :data:`CSV_HEADER`."""
    cells = [
        _format_cell(r.ki_db), _format_cell(r.si_db), _format_cell(r.mode),
        _format_cell(r.qam), _format_cell(r.residual_ki_db),
        _format_cell(r.post_kic_sinr_db), _format_cell(r.ser),
        _format_cell(r.evm), _format_cell(r.iterations),
        _format_cell(r.goodput_bps), _format_cell(r.seed), _format_cell(r.flags),
    ]
    return ",".join(cells)


def write_rows(rows: list[SweepRow], path) -> None:
    """Write the sweep CSV: exact canonical header, reals at full
    round-trip precision, LF newlines."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in rows:
            fh.write(row_to_line(r) + "\n")


def read_rows(path) -> list[SweepRow]:
    """Read and validate a sweep CSV written by :func:`write_rows`."""
    with open(path, "r", encoding="ascii", newline="") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != CSV_HEADER:
        raise SignalError("unrecognized CSV header")
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if line == "":
            continue
        cells = line.split(",")
        if len(cells) != 12:
            raise SignalError(f"line {ln}: expected 12 cells, found {len(cells)}")
        try:
            row = SweepRow(
                ki_db=float(cells[0]), si_db=float(cells[1]), mode=cells[2],
                qam=int(cells[3]), residual_ki_db=float(cells[4]),
                post_kic_sinr_db=float(cells[5]), ser=float(cells[6]),
                evm=float(cells[7]), iterations=float(cells[8]),
                goodput_bps=float(cells[9]), seed=int(cells[10]), flags=cells[11],
            )
        except ValueError as exc:
            raise SignalError(f"line {ln}: {exc}") from exc
        if row.mode not in MODES:
            raise SignalError(f"line {ln}: unknown mode {row.mode!r}")
        if row.qam not in QAM_ORDERS:
            raise SignalError(f"line {ln}: unsupported QAM order {row.qam}")
        if not row.flags and not math.isnan(row.ser) and not 0.0 <= row.ser <= 1.0:
            raise SignalError(f"line {ln}: ser outside [0, 1]")
        rows.append(row)
    return rows
