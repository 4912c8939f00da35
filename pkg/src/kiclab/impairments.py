"""Forward channel simulator: fractional resampling, FIR channel, CFO, noise.

The receive chain applied to a transmitted buffer x is

    y(n) = gain * sum_m conj(taps[m]) * xr(n - m) * exp(j*(phi0 + phase(n))) + v(n)

where xr(k) is x read at fractional position k*(1+eta) through a 4-point
cubic Lagrange interpolator and phase(n) accumulates the per-sample carrier
offset.  The same interpolator kernel (including its analytic derivative)
is exported for the canceller, so forward and inverse paths agree bit for
bit when the estimates match the truth.

Buffer edges: positions whose 4-point stencil would fall outside the buffer
read zeros for the missing points.  Integer positions reproduce their node
exactly even at the edges because the node weight is then one and the
missing neighbours get zero weight.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.signal import lfilter

from kiclab.core import ComplexSignal, RngSeed, SignalError, db_to_linear, gaussian_stream

IQ_MAGIC = b"KICLAB1\x00"
_IQ_HEADER = struct.Struct("<8sI4s")

# Cubic Lagrange on nodes {-1, 0, 1, 2} evaluated at fractional offset f in [0, 1).
# Weights reproduce nodes exactly at f = 0 and any polynomial up to degree 3.


@njit(cache=True, inline="always")
def _cubic_weights(f):
    a = f * (f - 1.0)
    w0 = -a * (f - 2.0) / 6.0
    w1 = (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0
    w2 = -(f + 1.0) * f * (f - 2.0) / 2.0
    w3 = (f + 1.0) * a / 6.0
    return w0, w1, w2, w3


@njit(cache=True, inline="always")
def _cubic_dweights(f):
    # d/df of the weights above; used for the timing gradient.
    d0 = -(3.0 * f * f - 6.0 * f + 2.0) / 6.0
    d1 = (3.0 * f * f - 4.0 * f - 1.0) / 2.0
    d2 = -(3.0 * f * f - 2.0 * f - 2.0) / 2.0
    d3 = (3.0 * f * f - 1.0) / 6.0
    return d0, d1, d2, d3


@njit(cache=True, inline="always")
def cubic_point(buf, pos):
    """Interpolated value and d/dpos at fractional ``pos``; zeros outside."""
    i = int(np.floor(pos))
    f = pos - i
    w0, w1, w2, w3 = _cubic_weights(f)
    d0, d1, d2, d3 = _cubic_dweights(f)
    n = buf.shape[0]
    val = 0.0 + 0.0j
    der = 0.0 + 0.0j
    k = i - 1
    if 0 <= k < n:
        val += w0 * buf[k]
        der += d0 * buf[k]
    k = i
    if 0 <= k < n:
        val += w1 * buf[k]
        der += d1 * buf[k]
    k = i + 1
    if 0 <= k < n:
        val += w2 * buf[k]
        der += d2 * buf[k]
    k = i + 2
    if 0 <= k < n:
        val += w3 * buf[k]
        der += d3 * buf[k]
    return val, der


def frac_interp(buffer: np.ndarray, position: float) -> tuple[complex, complex]:
    """Cubic-interpolated sample and its derivative w.r.t. position.

    ``position`` must lie in [1, len(buffer) - 3) so the full 4-point stencil
    is interior; the channel simulator and canceller use the zero-padded
    kernel directly and are not subject to this restriction.
    """
    buf = np.ascontiguousarray(buffer, dtype=np.complex128)
    if buf.ndim != 1 or buf.size < 4:
        raise SignalError("interpolation needs a 1-D buffer of at least 4 samples")
    p = float(position)
    if not (1.0 <= p < buf.size - 3.0):
        raise SignalError(f"position {p} outside supported range [1, {buf.size - 3})")
    val, der = cubic_point(buf, p)
    return complex(val), complex(der)


@njit(cache=True)
def _resample_grid(buf, positions):
    out = np.empty(positions.shape[0], dtype=np.complex128)
    for n in range(positions.shape[0]):
        v, _ = cubic_point(buf, positions[n])
        out[n] = v
    return out


def resample(buffer: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Vectorised fractional read of ``buffer`` at ``positions`` (zeros outside)."""
    buf = np.ascontiguousarray(buffer, dtype=np.complex128)
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    return _resample_grid(buf, pos)


@dataclass(frozen=True)
class ImpairmentParams:
    """Ground-truth channel description for one transmitter-receiver path.

    taps                 complex FIR taps, applied conjugated
    cfo_rad_per_sample   carrier frequency offset
    sfo_rate             sampling clock rate offset (positions advance 1+sfo)
    initial_phase        carrier phase at the first sample
    noise_variance       complex AWGN power added at the receiver
    gain_db              power gain applied to the deterministic part
    cfo_drift, sfo_drift   optional linear drift per sample of each offset
    cfo_walk_std, sfo_walk_std   optional random-walk step of each offset
    phase_noise_std      optional Wiener phase noise increment per sample
    """

    taps: np.ndarray
    cfo_rad_per_sample: float = 0.0
    sfo_rate: float = 0.0
    initial_phase: float = 0.0
    noise_variance: float = 0.0
    gain_db: float = 0.0
    cfo_drift: float = 0.0
    sfo_drift: float = 0.0
    cfo_walk_std: float = 0.0
    sfo_walk_std: float = 0.0
    phase_noise_std: float = 0.0

    def __post_init__(self) -> None:
        taps = np.atleast_1d(np.asarray(self.taps, dtype=np.complex128)).copy()
        if taps.ndim != 1 or taps.size == 0:
            raise SignalError("taps must be a nonempty 1-D sequence")
        if not np.all(np.isfinite(taps.real)) or not np.all(np.isfinite(taps.imag)):
            raise SignalError("taps must be finite")
        if abs(float(self.sfo_rate)) >= 1e-3:
            raise SignalError("|sfo_rate| must stay below 1e-3")
        if float(self.noise_variance) < 0.0:
            raise SignalError("noise_variance must be nonnegative")
        for name in ("cfo_rad_per_sample", "initial_phase", "gain_db", "cfo_drift",
                     "sfo_drift", "cfo_walk_std", "sfo_walk_std", "phase_noise_std"):
            if not np.isfinite(float(getattr(self, name))):
                raise SignalError(f"{name} must be finite")
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)


def apply_channel(sig: ComplexSignal, params: ImpairmentParams, seed: RngSeed) -> ComplexSignal:
    """Push a transmitted buffer through the impairment chain.

    Output has the same length as the input.  The seed feeds three
    independent substreams: tag 0 for AWGN, tag 1 for phase noise, tag 2
    for the offset random walks; unused substreams consume nothing, so a
    run with all optional knobs at zero is reproducible from tag 0 alone.
    """
    x = sig.samples
    n = x.size
    if n == 0:
        return ComplexSignal(x, sig.sample_rate_hz)

    idx = np.arange(n, dtype=np.float64)
    eta = np.full(n, params.sfo_rate, dtype=np.float64)
    if params.sfo_drift != 0.0:
        eta = eta + params.sfo_drift * idx
    if params.sfo_walk_std != 0.0:
        walk = gaussian_stream(seed.derive(2), n).samples.real * np.sqrt(2.0)
        eta = eta + params.sfo_walk_std * np.cumsum(walk)
    if np.any(np.abs(eta) >= 1e-3):
        raise SignalError("sampling offset trajectory left the supported range")

    # Position n advances by 1 + eta(n) from position 0 at sample 0.
    positions = np.concatenate(([0.0], np.cumsum(1.0 + eta[1:])))
    xr = resample(x, positions)

    faded = lfilter(np.conj(params.taps), [1.0], xr)

    eps = np.full(n, params.cfo_rad_per_sample, dtype=np.float64)
    if params.cfo_drift != 0.0:
        eps = eps + params.cfo_drift * idx
    if params.cfo_walk_std != 0.0:
        walk = gaussian_stream(seed.derive(2), n).samples.imag * np.sqrt(2.0)
        eps = eps + params.cfo_walk_std * np.cumsum(walk)
    phase = params.initial_phase + np.concatenate(([0.0], np.cumsum(eps[:-1])))
    if params.phase_noise_std != 0.0:
        pn = gaussian_stream(seed.derive(1), n).samples.real * np.sqrt(2.0)
        phase = phase + params.phase_noise_std * np.cumsum(pn)

    g = np.sqrt(db_to_linear(params.gain_db))
    out = g * faded * np.exp(1j * phase)

    if params.noise_variance > 0.0:
        noise = gaussian_stream(seed.derive(0), n).samples
        out = out + np.sqrt(params.noise_variance) * noise

    return ComplexSignal(out, sig.sample_rate_hz)


def superpose(parts: list[ComplexSignal], noise_variance: float, seed: RngSeed) -> ComplexSignal:
    """Sum equal-length signals and add complex AWGN of the given variance."""
    if not parts:
        raise SignalError("superpose needs at least one signal")
    n = len(parts[0])
    rate = parts[0].sample_rate_hz
    for p in parts[1:]:
        if len(p) != n:
            raise SignalError("superpose requires equal-length signals")
        if p.sample_rate_hz != rate:
            raise SignalError("superpose requires a common sample rate")
    if float(noise_variance) < 0.0:
        raise SignalError("noise_variance must be nonnegative")
    total = np.zeros(n, dtype=np.complex128)
    for p in parts:
        total = total + p.samples
    if noise_variance > 0.0 and n > 0:
        total = total + np.sqrt(float(noise_variance)) * gaussian_stream(seed.derive(0), n).samples
    return ComplexSignal(total, rate)


def write_iq(sig: ComplexSignal, path) -> None:
    """Write interleaved little-endian float32 I/Q with a 16-byte header.

    Header: 8-byte magic ``KICLAB1\\0``, uint32 sample rate in Hz, 4 reserved
    zero bytes.  The sample rate must be an exact positive integer count.
    """
    rate = sig.sample_rate_hz
    if rate != int(rate) or not (0 < int(rate) < 2**32):
        raise SignalError("IQ files need an integer sample rate below 2**32 Hz")
    inter = np.empty(2 * len(sig), dtype="<f4")
    inter[0::2] = sig.samples.real.astype(np.float32)
    inter[1::2] = sig.samples.imag.astype(np.float32)
    with open(path, "wb") as fh:
        fh.write(_IQ_HEADER.pack(IQ_MAGIC, int(rate), b"\x00" * 4))
        fh.write(inter.tobytes())


def read_iq(path) -> ComplexSignal:
    """Read a buffer written by :func:`write_iq`; rejects foreign headers."""
    with open(path, "rb") as fh:
        head = fh.read(_IQ_HEADER.size)
        if len(head) != _IQ_HEADER.size:
            raise SignalError("IQ file truncated before header end")
        magic, rate, _ = _IQ_HEADER.unpack(head)
        if magic != IQ_MAGIC:
            raise SignalError("not a KICLAB1 IQ file")
        body = fh.read()
    if len(body) % 8:
        raise SignalError("IQ payload is not a whole number of I/Q pairs")
    inter = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return ComplexSignal(inter[0::2] + 1j * inter[1::2], float(rate))
