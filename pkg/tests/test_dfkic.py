"""Decision-feedback control flow, state threading, and reconstruction value."""

import numpy as np
import pytest

from kiclab.canceller import CancellerConfig, CancellerDivergence, EstimatorState, cancel, init_state
from kiclab.core import ComplexSignal, RngSeed, SignalError, mean_power
from kiclab.dfkic import DfkicConfig, df_kic
from kiclab.impairments import ImpairmentParams, apply_channel, superpose
from kiclab.labbench import _channel_taps
from kiclab.waveform import (
    OfdmConfig,
    QualityReport,
    evm_threshold,
    generate_ki,
    ofdm_demodulate,
    ofdm_modulate,
    random_frame,
)

TINY = OfdmConfig(
    fft_size=8,
    cp_len=0,
    used_subcarriers=4,
    pilot_index_set=(0, 2),
    qam_order=4,
    symbols_per_frame=2,
    training_symbols=1,
    sample_rate_hz=1000.0,
)


def scripted_run(bench_cls, evms, max_iterations=8, quality_target=0.3, **kwargs):
    bench = bench_cls(TINY, evms)
    cfg = DfkicConfig(
        ofdm=TINY,
        canceller=CancellerConfig(n_taps=1),
        max_iterations=max_iterations,
        quality_target=quality_target,
    )
    x = ComplexSignal(np.full(TINY.frame_len, 10.0, dtype=complex), 1000.0)
    d = ComplexSignal(np.full(TINY.frame_len, 20.0, dtype=complex), 1000.0)
    result = df_kic(
        x,
        d,
        cfg,
        demodulate_fn=bench.demodulate,
        modulate_fn=bench.modulate,
        cancel_fn=bench.cancel,
        **kwargs,
    )
    return bench, result


def test_config_validation():
    with pytest.raises(SignalError, match="max_iterations"):
        DfkicConfig(max_iterations=-1)
    with pytest.raises(SignalError, match="quality_target"):
        DfkicConfig(quality_target=0.0)
    assert DfkicConfig(quality_target=0.05).resolved_target() == 0.05
    assert DfkicConfig(ofdm=TINY).resolved_target() == evm_threshold(4)


def test_length_mismatch_rejected():
    x = ComplexSignal(np.zeros(16, dtype=complex), 1000.0)
    d = ComplexSignal(np.zeros(15, dtype=complex), 1000.0)
    with pytest.raises(SignalError, match="equal length"):
        df_kic(x, d, DfkicConfig(ofdm=TINY))


def test_early_exit_when_base_pass_meets_target(bench_cls):
    bench, res = scripted_run(bench_cls, [0.5, 0.1])
    assert res.stop_reason == "target"
    assert res.iterations_used == 0
    assert res.chosen_branch == "cancelled"
    assert res.symbols is bench.frames[1]
    assert res.quality.evm_rms == 0.1
    assert res.raw_quality == 0.5
    assert res.quality_trace == (0.1,)
    assert res.si_state is None
    assert len(bench.cancel_calls) == 1
    assert bench.demod_inputs == [20.0 + 0j, -80.0 + 0j]
    assert res.ki_estimate.samples[0] == 100.0
    assert res.residual.samples[0] == -80.0
    assert res.ki_state.w_hat[0] == 1.0


def test_gate_adopts_received_branch_when_cancellation_hurts(bench_cls):
    bench, res = scripted_run(bench_cls, [0.2, 0.5, 0.1], quality_target=0.15)
    assert res.chosen_branch == "received"
    # the loop remodulates the received-branch decisions
    assert np.array_equal(bench.mod_inputs[0], bench.frames[0].data_indices)
    assert bench.cancel_calls[1][0] == 1001.0  # marker for frame 0
    assert res.stop_reason == "target"
    assert res.iterations_used == 1
    assert res.symbols is bench.frames[2]
    assert res.quality_trace == (0.2, 0.1)
    # reconstruction branch started cold and was not rewound
    si_in = bench.cancel_calls[1][2]
    assert si_in.w_hat[0] == 0.0
    assert si_in.position_acc == -1.0
    # known-interference branch was rewound, taps carried over
    ki_in = bench.cancel_calls[2][2]
    assert ki_in.w_hat[0] == 1.0
    assert ki_in.position_acc == -17.0


def test_gate_tie_keeps_cancelled_branch(bench_cls):
    bench, res = scripted_run(bench_cls, [0.4, 0.4], quality_target=0.5)
    assert res.chosen_branch == "cancelled"
    assert res.symbols is bench.frames[1]
    assert res.stop_reason == "target"


def test_revert_discards_worse_iteration(bench_cls):
    bench, res = scripted_run(bench_cls, [0.9, 0.5, 0.6], quality_target=0.1)
    assert res.stop_reason == "revert"
    assert res.iterations_used == 1
    assert res.symbols is bench.frames[1]
    assert res.quality.evm_rms == 0.5
    assert res.quality_trace == (0.5, 0.6)
    assert res.residual.samples[0] == -80.0
    assert res.ki_estimate.samples[0] == 100.0
    assert res.ki_state.w_hat[0] == 1.0
    # the reconstruction state still advanced once and is worth keeping
    assert res.si_state is not None
    assert res.si_state.w_hat[0] == 1.0


def test_improvements_until_target(bench_cls):
    bench, res = scripted_run(bench_cls, [0.9, 0.5, 0.3, 0.05], quality_target=0.1)
    assert res.stop_reason == "target"
    assert res.iterations_used == 2
    assert res.quality_trace == (0.5, 0.3, 0.05)
    assert res.symbols is bench.frames[3]
    assert res.quality.evm_rms == min(res.quality_trace)
    assert len(bench.cancel_calls) == 5
    assert res.ki_state.w_hat[0] == 3.0
    assert res.si_state.w_hat[0] == 2.0


def test_max_iterations_bounds_the_loop(bench_cls):
    bench, res = scripted_run(
        bench_cls, [0.9, 0.5, 0.4, 0.3], max_iterations=2, quality_target=0.01
    )
    assert res.stop_reason == "max_iterations"
    assert res.iterations_used == 2
    assert res.quality_trace == (0.5, 0.4, 0.3)
    assert res.symbols is bench.frames[3]


def test_zero_iterations_is_base_cancel_plus_gate(bench_cls):
    bench, res = scripted_run(bench_cls, [0.9, 0.5], max_iterations=0, quality_target=0.1)
    assert res.stop_reason == "max_iterations"
    assert res.iterations_used == 0
    assert res.quality_trace == (0.5,)
    assert res.symbols is bench.frames[1]
    assert res.si_state is None
    assert len(bench.cancel_calls) == 1


def test_tie_inside_loop_keeps_incumbent_decisions(bench_cls):
    bench, res = scripted_run(bench_cls, [0.9, 0.5, 0.5, 0.2], quality_target=0.3)
    assert res.stop_reason == "target"
    assert res.iterations_used == 2
    assert res.quality_trace == (0.5, 0.5, 0.2)
    assert res.symbols is bench.frames[3]
    # both remodulations used the iteration-0 decisions: the tie did not adopt
    assert np.array_equal(bench.mod_inputs[0], bench.frames[1].data_indices)
    assert np.array_equal(bench.mod_inputs[1], bench.frames[1].data_indices)
    # the tied round's KI state was discarded; round two rewound the original
    assert res.ki_state.w_hat[0] == 2.0
    assert res.quality.evm_rms == min(res.quality_trace)


def test_initial_states_are_honoured_not_rezeroed(bench_cls):
    zx0 = EstimatorState(w_hat=np.array([7.0 + 0j]))
    zs0 = EstimatorState(w_hat=np.array([9.0 + 0j]))
    bench, res = scripted_run(
        bench_cls,
        [0.9, 0.5, 0.05],
        quality_target=0.1,
        initial_ki_state=zx0,
        initial_si_state=zs0,
    )
    assert bench.cancel_calls[0][2].w_hat[0] == 7.0
    assert bench.cancel_calls[1][2].w_hat[0] == 9.0  # provided but never run: no rewind
    assert bench.cancel_calls[1][2] is zs0
    assert res.ki_state.w_hat[0] == 9.0
    assert res.si_state.w_hat[0] == 10.0


def test_residual_collection_tracks_adopted_rounds(bench_cls):
    bench, res = scripted_run(
        bench_cls, [0.9, 0.5, 0.3, 0.05], quality_target=0.1, collect_residuals=True
    )
    firsts = [sig.samples[0] for sig in res.iteration_residuals]
    assert firsts == [-80.0, -280.0, -480.0]

    bench, res = scripted_run(
        bench_cls, [0.9, 0.5, 0.5, 0.2], quality_target=0.3, collect_residuals=True
    )
    firsts = [sig.samples[0] for sig in res.iteration_residuals]
    assert firsts == [-80.0, -480.0]  # the tied round is not a kept result


def test_divergence_is_annotated_with_iteration(bench_cls):
    for fail_at, expect_iter in ((0, 0), (1, 1), (2, 1), (3, 2)):
        bench = bench_cls(TINY, [0.9, 0.5, 0.4, 0.3, 0.2])
        calls = {"n": 0}
        inner = bench.cancel

        def failing_cancel(reference, desired, state, cfg):
            if calls["n"] == fail_at:
                raise CancellerDivergence(7)
            calls["n"] += 1
            return inner(reference, desired, state, cfg)

        x = ComplexSignal(np.full(16, 10.0, dtype=complex), 1000.0)
        d = ComplexSignal(np.full(16, 20.0, dtype=complex), 1000.0)
        cfg = DfkicConfig(
            ofdm=TINY, canceller=CancellerConfig(n_taps=1), quality_target=0.01
        )
        with pytest.raises(CancellerDivergence) as exc_info:
            df_kic(
                x,
                d,
                cfg,
                demodulate_fn=bench.demodulate,
                modulate_fn=bench.modulate,
                cancel_fn=failing_cancel,
            )
        assert exc_info.value.iteration == expect_iter, fail_at
        assert exc_info.value.sample_index == 7
        if expect_iter:
            assert f"decision-feedback iteration {expect_iter}" in str(exc_info.value)


# ------------------------------------------------------------ real components


def build_link(seed, ofdm, ki_db=40.0, si_db=15.0):
    n = ofdm.frame_len
    ki = generate_ki(seed.derive(1), n, 5.0 / 6.5)
    ki_rx = apply_channel(
        ki,
        ImpairmentParams(
            taps=_channel_taps(seed.derive(2), 5),
            cfo_rad_per_sample=1e-4,
            sfo_rate=1e-6,
            gain_db=ki_db,
        ),
        seed.derive(3),
    )
    truth = random_frame(ofdm, seed.derive(10))
    si = ofdm_modulate(truth, ofdm)
    si_rx = apply_channel(
        si,
        ImpairmentParams(
            taps=[1.0],
            cfo_rad_per_sample=1e-5,
            gain_db=si_db - 10 * np.log10(mean_power(si)),
        ),
        seed.derive(4),
    )
    d = superpose([ki_rx, si_rx], noise_variance=1.0, seed=seed.derive(6))
    return ki, ki_rx, truth, d


def test_zero_iteration_run_equals_manual_base_pass():
    ofdm = OfdmConfig(
        fft_size=64,
        cp_len=4,
        used_subcarriers=48,
        pilot_index_set=tuple(range(0, 48, 6)),
        qam_order=16,
        symbols_per_frame=6,
        training_symbols=1,
    )
    seed = RngSeed(31)
    ki, _, _, d = build_link(seed, ofdm)
    cc = CancellerConfig()
    res = df_kic(ki, d, DfkicConfig(ofdm=ofdm, canceller=cc, max_iterations=0))

    d_hat, e_x, zx = cancel(ki, d, init_state(cc), cc)
    syms_d, qual_d = ofdm_demodulate(d, ofdm)
    syms_e, qual_e = ofdm_demodulate(e_x, ofdm)
    if qual_e.evm_rms > qual_d.evm_rms:
        winner, wq = syms_d, qual_d
    else:
        winner, wq = syms_e, qual_e
    assert np.array_equal(res.symbols.data_indices, winner.data_indices)
    assert res.quality.evm_rms == wq.evm_rms
    assert res.raw_quality == qual_d.evm_rms
    assert np.array_equal(res.residual.samples, e_x.samples)
    assert np.array_equal(res.ki_state.w_hat, zx.w_hat)
    assert res.stop_reason == "max_iterations"
    assert res.iterations_used == 0
    assert res.si_state is None


def test_real_run_trace_is_consistent():
    ofdm = OfdmConfig(
        fft_size=64,
        cp_len=4,
        used_subcarriers=48,
        pilot_index_set=tuple(range(0, 48, 6)),
        qam_order=16,
        symbols_per_frame=60,
        training_symbols=2,
    )
    seed = RngSeed(32)
    ki, _, _, d = build_link(seed, ofdm, ki_db=40.0, si_db=18.0)
    cfg = DfkicConfig(ofdm=ofdm, canceller=CancellerConfig(), max_iterations=4)
    res = df_kic(ki, d, cfg)
    assert res.stop_reason in ("target", "revert", "max_iterations")
    assert res.iterations_used == len(res.quality_trace) - 1
    assert res.quality.evm_rms == min(res.quality_trace)
    if res.iterations_used >= 1:
        assert res.quality_trace[0] >= cfg.resolved_target()
    kept = [res.quality_trace[0]]
    for v in res.quality_trace[1:]:
        if v < kept[-1]:
            kept.append(v)
    assert kept[-1] == res.quality.evm_rms


def test_error_free_feedback_deepens_cancellation():
    """With truth decisions fed back, one round must cut the residual hard."""
    ofdm = OfdmConfig(qam_order=16, symbols_per_frame=100)
    cc = CancellerConfig()
    gains = []
    for sd in range(1, 11):
        seed = RngSeed(sd)
        ki, ki_rx, truth, d = build_link(seed, ofdm, ki_db=40.0, si_db=40.0)
        n = ofdm.frame_len
        win = slice(int(0.2 * n), n)

        def resid_db(est):
            return 10 * np.log10(
                np.mean(np.abs(ki_rx.samples[win] - est.samples[win]) ** 2)
            )

        def truth_demod(evms):
            it = iter(evms)

            def fn(sig, cfg, frame_start=0):
                v = next(it)
                return truth, QualityReport(v, np.array([v]), v * v, 1.0)

            return fn

        base = df_kic(
            ki,
            d,
            DfkicConfig(ofdm=ofdm, canceller=cc, max_iterations=0, quality_target=0.3),
            demodulate_fn=truth_demod([0.9, 0.5]),
        )
        one = df_kic(
            ki,
            d,
            DfkicConfig(ofdm=ofdm, canceller=cc, max_iterations=8, quality_target=0.3),
            demodulate_fn=truth_demod([0.9, 0.5, 0.1]),
        )
        assert one.iterations_used == 1
        gains.append(resid_db(base.ki_estimate) - resid_db(one.ki_estimate))
    assert np.median(gains) >= 5.0
