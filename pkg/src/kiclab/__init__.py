"""kiclab: decision-feedback aided cancellation of known wideband interference.

A deterministic baseband lab: OFDM waveforms, a channel simulator with
carrier and sampling clock offsets, an adaptive canceller that jointly
estimates the interference channel and both offsets, and a sweep bench
that writes CSV rows and IQ captures for downstream plotting.
"""

from kiclab.core import (
    ComplexSignal,
    RngSeed,
    SignalError,
    db_to_linear,
    gaussian_stream,
    linear_to_db,
    mean_power,
)

__all__ = [
    "ComplexSignal",
    "RngSeed",
    "SignalError",
    "db_to_linear",
    "gaussian_stream",
    "linear_to_db",
    "mean_power",
]

__version__ = "0.1.0"
