"""Shared fixtures: hypothesis profile and scripted component doubles."""

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import settings

from kiclab.core import ComplexSignal
from kiclab.waveform import OfdmConfig, QualityReport, frame_from_decisions

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")


class ScriptedBench:
    """Component doubles that let a test dictate every decision-feedback event.

    The cancel double returns a distinct constant interference estimate per
    call and threads states forward by bumping the tap vector, so a test can
    verify which buffers were cancelled, in what order, and that estimator
    state is never silently re-zeroed.  The demodulate double pops scripted
    EVM values and returns identifiable frames; the modulate double encodes
    the frame it was handed into a constant marker signal.
    """

    def __init__(self, ofdm: OfdmConfig, evms):
        self.ofdm = ofdm
        self.evms = list(evms)
        self.frames = []
        self.cancel_calls = []
        self.demod_inputs = []
        self.mod_inputs = []
        self._serial = 0

    def cancel(self, reference, desired, state, cfg):
        self.cancel_calls.append(
            (complex(reference.samples[0]), complex(desired.samples[0]), state)
        )
        self._serial += 1
        d_hat = ComplexSignal(
            np.full(len(desired), 100.0 * self._serial, dtype=np.complex128),
            desired.sample_rate_hz,
        )
        err = ComplexSignal(desired.samples - d_hat.samples, desired.sample_rate_hz)
        out = replace(
            state,
            w_hat=state.w_hat + 1.0,
            n_seen=state.n_seen + len(desired),
        )
        return d_hat, err, out

    def demodulate(self, signal, cfg, frame_start=0):
        self.demod_inputs.append(complex(signal.samples[0]))
        i = len(self.frames)
        frame = frame_from_decisions(np.array([[i % 4, (i + 1) % 4]]), cfg)
        self.frames.append(frame)
        v = float(self.evms.pop(0))
        return frame, QualityReport(v, np.array([v]), v * v, 1.0)

    def modulate(self, frame, cfg):
        self.mod_inputs.append(np.asarray(frame.data_indices).copy())
        marker = 1000.0 + float(frame.data_indices[0, 0] * 4 + frame.data_indices[0, 1])
        return ComplexSignal(
            np.full(cfg.frame_len, marker, dtype=np.complex128), cfg.sample_rate_hz
        )


@pytest.fixture
def bench_cls():
    return ScriptedBench
