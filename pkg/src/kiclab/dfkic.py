"""Decision-feedback iteration around the known-interference canceller.

One pass works on one frame of received samples ``d`` and the locally known
interference waveform ``x``:

1. Cancel the known interference once and demodulate both the raw input and
   the cancelled signal; keep whichever decisions score the better EVM.
2. While the EVM is above the quality target, rebuild the interfering OFDM
   signal from the current decisions, cancel that reconstruction out of the
   interference-cancelled signal to expose the residual, re-cancel the known
   interference against it, and demodulate again.
3. Stop early when the EVM target is met, when an iteration makes the EVM
   worse (its results are discarded and the previous ones kept), or after
   ``max_iterations`` rounds.

Both estimator states are threaded through every iteration and re-runs of
the same buffer rewind their integrators by the converged rates, so each
pass starts warm instead of re-acquiring from zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from kiclab.canceller import (
    CancellerConfig,
    CancellerDivergence,
    EstimatorState,
    cancel,
    init_state,
    rewind_for_rerun,
)
from kiclab.core import ComplexSignal, SignalError
from kiclab.waveform import (
    FrameSymbols,
    OfdmConfig,
    QualityReport,
    evm_threshold,
    frame_from_decisions,
    ofdm_demodulate,
    ofdm_modulate,
)


@dataclass(frozen=True)
class DfkicConfig:
    """Frame geometry, canceller knobs, and the stop rule."""

    ofdm: OfdmConfig = field(default_factory=OfdmConfig)
    canceller: CancellerConfig = field(default_factory=CancellerConfig)
    max_iterations: int = 8
    quality_target: float | None = None

    def __post_init__(self) -> None:
        if self.max_iterations < 0:
            raise SignalError("max_iterations must be nonnegative")
        if self.quality_target is not None and not float(self.quality_target) > 0.0:
            raise SignalError("quality_target must be positive when given")

    def resolved_target(self) -> float:
        if self.quality_target is not None:
            return float(self.quality_target)
        return evm_threshold(self.ofdm.qam_order)


@dataclass(frozen=True)
class DfkicResult:
    """Outcome of one frame pass."""

    symbols: FrameSymbols
    quality: QualityReport
    quality_trace: tuple[float, ...]
    raw_quality: float
    chosen_branch: str           # "cancelled" or "received" at the first gate
    iterations_used: int
    stop_reason: str             # "target", "revert", "max_iterations"
    ki_state: EstimatorState
    si_state: EstimatorState | None
    ki_estimate: ComplexSignal
    residual: ComplexSignal
    iteration_residuals: tuple[ComplexSignal, ...] = ()


def df_kic(
    x: ComplexSignal,
    d: ComplexSignal,
    cfg: DfkicConfig,
    frame_start: int = 0,
    initial_ki_state: EstimatorState | None = None,
    initial_si_state: EstimatorState | None = None,
    collect_residuals: bool = False,
    demodulate_fn=ofdm_demodulate,
    modulate_fn=ofdm_modulate,
    cancel_fn=cancel,
) -> DfkicResult:
    """Run the full decision-feedback pass on one frame.

    ``initial_*_state`` warm-start the two estimator branches (cold zeros
    otherwise); the returned states allow chaining consecutive frames.
    The ``*_fn`` seams exist for tests that script the component behaviour.
    """
    if len(x) != len(d):
        raise SignalError("known waveform and received buffer must have equal length")
    n = len(d)
    target = cfg.resolved_target()

    zx = initial_ki_state if initial_ki_state is not None else init_state(cfg.canceller)
    zs = initial_si_state if initial_si_state is not None else init_state(cfg.canceller)

    try:
        d_hat_x, e_x, zx = cancel_fn(x, d, zx, cfg.canceller)
    except CancellerDivergence as exc:
        raise CancellerDivergence(exc.sample_index, iteration=0) from exc

    syms_d, qual_d = demodulate_fn(d, cfg.ofdm, frame_start)
    syms_e, qual_e = demodulate_fn(e_x, cfg.ofdm, frame_start)
    delta_d = qual_d.evm_rms

    if qual_e.evm_rms > delta_d:
        chosen_branch = "received"
        syms_e, qual_e = syms_d, qual_d
    else:
        chosen_branch = "cancelled"

    trace = [qual_e.evm_rms]
    residuals = [e_x] if collect_residuals else []
    # The last tuple element records whether that SI state has actually been
    # run to the end of this buffer (a never-run state must not be rewound,
    # nor chained forward as if it had advanced).
    best = (syms_e, qual_e, d_hat_x, e_x, zx, zs, False)
    iterations_used = 0
    stop_reason = "max_iterations" if cfg.max_iterations == 0 else ""

    if trace[-1] < target:
        stop_reason = "target"

    k = 0
    while not stop_reason and k < cfg.max_iterations:
        k += 1
        prev_syms, prev_qual, prev_dhx, prev_ex, prev_zx, prev_zs, prev_si_ran = best

        s_hat = modulate_fn(prev_syms, cfg.ofdm)
        try:
            zs_run = rewind_for_rerun(prev_zs, n) if prev_si_ran else prev_zs
            d_hat_s, _, zs_new = cancel_fn(s_hat, prev_ex, zs_run, cfg.canceller)
            e_s = ComplexSignal(d.samples - d_hat_s.samples, d.sample_rate_hz)

            zx_run = rewind_for_rerun(prev_zx, n)
            d_hat_x, _, zx_new = cancel_fn(x, e_s, zx_run, cfg.canceller)
        except CancellerDivergence as exc:
            raise CancellerDivergence(exc.sample_index, iteration=k) from exc
        e_x = ComplexSignal(d.samples - d_hat_x.samples, d.sample_rate_hz)

        syms_k, qual_k = demodulate_fn(e_x, cfg.ofdm, frame_start)
        iterations_used = k

        if qual_k.evm_rms > trace[-1]:
            # This round made things worse: record it, discard its results,
            # and keep the previous pass.  The reconstruction estimator state
            # is still adopted when the alternative never ran at all; a state
            # adapted against mostly-correct decisions beats a cold start on
            # the next frame.
            trace.append(qual_k.evm_rms)
            if not prev_si_ran:
                best = best[:5] + (zs_new, True)
            stop_reason = "revert"
            break

        trace.append(qual_k.evm_rms)
        if qual_k.evm_rms < trace[-2]:
            # A tie keeps the incumbent stream; only a strict win adopts.
            if collect_residuals:
                residuals.append(e_x)
            best = (syms_k, qual_k, d_hat_x, e_x, zx_new, zs_new, True)
        elif not prev_si_ran:
            best = best[:5] + (zs_new, True)
        if trace[-1] < target:
            stop_reason = "target"
        elif k == cfg.max_iterations:
            stop_reason = "max_iterations"

    syms_e, qual_e, d_hat_x, e_x, zx, zs, zs_advanced = best
    return DfkicResult(
        symbols=syms_e,
        quality=qual_e,
        quality_trace=tuple(trace),
        raw_quality=float(delta_d),
        chosen_branch=chosen_branch,
        iterations_used=iterations_used,
        stop_reason=stop_reason or "max_iterations",
        ki_state=zx,
        si_state=zs if zs_advanced else None,
        ki_estimate=d_hat_x,
        residual=e_x,
        iteration_residuals=tuple(residuals),
    )
