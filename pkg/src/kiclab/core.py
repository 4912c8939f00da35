"""Core value types, deterministic randomness, and power helpers.

Everything downstream builds on two conventions fixed here:

* dB always means power dB, ``10*log10``.
* Randomness comes from Philox4x64-10 keyed with ``(seed, 0)``, counter
  starting at zero.  Raw 64-bit words are consumed in counter order and
  converted to complex Gaussians by a Box-Muller transform (one word pair
  per complex sample), so a stream is reproducible from the seed alone,
  in any language with a Philox implementation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15


class SignalError(ValueError):
    """A signal or parameter violates one of the module contracts."""


def splitmix64(x: int) -> int:
    """One splitmix64 scramble of a 64-bit value (used for seed derivation)."""
    z = (x + _SPLITMIX_GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RngSeed:
    """64-bit seed naming one Philox stream."""

    seed: int

    def __post_init__(self) -> None:
        if not isinstance(self.seed, (int, np.integer)):
            raise SignalError("seed must be an integer")
        if not 0 <= int(self.seed) <= _MASK64:
            raise SignalError("seed must fit in 64 bits")
        object.__setattr__(self, "seed", int(self.seed))

    def derive(self, tag: int) -> "RngSeed":
        """Deterministic child seed for substream ``tag`` (noise, phase walk, ...).

        child = splitmix64(seed XOR splitmix64(tag + 1)), so distinct tags give
        statistically independent streams and the map is documented and portable.
        """
        return RngSeed(splitmix64(self.seed ^ splitmix64((int(tag) + 1) & _MASK64)))


@dataclass(frozen=True)
class ComplexSignal:
    """Immutable 1-D complex128 sample buffer plus its sample rate in Hz."""

    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self) -> None:
        arr = np.asarray(self.samples, dtype=np.complex128)
        if arr.ndim != 1:
            raise SignalError("samples must be one-dimensional")
        if arr.size and not np.all(np.isfinite(arr.real)) or arr.size and not np.all(np.isfinite(arr.imag)):
            raise SignalError("samples must be finite")
        rate = float(self.sample_rate_hz)
        if not np.isfinite(rate) or rate <= 0.0:
            raise SignalError("sample_rate_hz must be positive and finite")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate_hz", rate)

    def __len__(self) -> int:
        return int(self.samples.size)


def db_to_linear(db: float) -> float:
    """Power ratio for a dB value: 10**(db/10)."""
    return float(10.0 ** (float(db) / 10.0))


def linear_to_db(ratio: float) -> float:
    """Inverse of :func:`db_to_linear`; requires a strictly positive ratio."""
    r = float(ratio)
    if not r > 0.0:
        raise SignalError("power ratio must be positive")
    return float(10.0 * np.log10(r))


def mean_power(sig: ComplexSignal | np.ndarray) -> float:
    """Mean of |sample|^2 over the buffer.  Errors on an empty buffer."""
    arr = sig.samples if isinstance(sig, ComplexSignal) else np.asarray(sig)
    if arr.size == 0:
        raise SignalError("mean power of an empty signal is undefined")
    return float(np.mean(np.abs(arr) ** 2))


def scale(sig: ComplexSignal, gain: complex) -> ComplexSignal:
    """Multiply every sample by ``gain``, keeping the sample rate."""
    return ComplexSignal(sig.samples * gain, sig.sample_rate_hz)


def raw_words(seed: RngSeed, n: int) -> np.ndarray:
    """First ``n`` raw 64-bit words of the seed's Philox stream."""
    if n < 0:
        raise SignalError("word count must be nonnegative")
    if n == 0:
        return np.empty(0, dtype=np.uint64)
    return np.random.Philox(key=seed.seed).random_raw(n)


def gaussian_stream(seed: RngSeed, n: int, sample_rate_hz: float = 1.0) -> ComplexSignal:
    """Circular complex Gaussian samples, unit power per sample.

    Consumes exactly two raw words per sample: u = (word >> 11) * 2**-53,
    then z = sqrt(-ln(1 - u1)) * exp(2j*pi*u2).  E|z|^2 = 1, so variance
    is split evenly between the real and imaginary parts.
    """
    if n < 0:
        raise SignalError("sample count must be nonnegative")
    if n == 0:
        return ComplexSignal(np.empty(0, dtype=np.complex128), sample_rate_hz)
    raw = raw_words(seed, 2 * n)
    u1 = (raw[0::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    mag = np.sqrt(-np.log1p(-u1))
    z = mag * np.exp(2j * np.pi * u2)
    return ComplexSignal(z, sample_rate_hz)
