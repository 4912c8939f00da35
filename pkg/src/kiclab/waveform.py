"""OFDM waveforms, QAM constellations, the known-interference generator, and EVM.

Constellations are Gray-labelled on each axis for the square orders
(4/16/64/256) and for the rectangular 8-point grid; the 32- and 128-point
cross grids use a fixed lexicographic labelling because no perfect Gray
map exists on a cross.  Symbol-error metrics never depend on the labels.

OFDM geometry: ``used_subcarriers`` occupy offsets -U/2..-1, +1..+U/2
around an empty DC bin; the used array is ordered by ascending frequency
offset so linear interpolation across it follows physical frequency.
Every frame starts with ``training_symbols`` known full-band QPSK symbols;
pilot cells in data symbols carry a fixed BPSK pattern.  Both patterns are
derived from module-level seeds, so transmitter and receiver agree without
side channels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy.signal import fftconvolve, firwin

from kiclab.core import ComplexSignal, RngSeed, SignalError, gaussian_stream, mean_power, raw_words

QAM_ORDERS = (4, 8, 16, 32, 64, 128, 256)

_PILOT_PATTERN_SEED = RngSeed(0x4B49434C_50494C54)
_TRAINING_PATTERN_SEED = RngSeed(0x4B49434C_5452414E)

# Known-interference shaping filter: fixed-length kaiser low-pass, ~60 dB
# stopband, transition about 0.045 of Nyquist.
_KI_FILTER_TAPS = 161
_KI_KAISER_BETA = 5.65326


def _gray(n: int) -> int:
    return n ^ (n >> 1)


@lru_cache(maxsize=None)
def qam_table(order: int) -> np.ndarray:
    """Unit-average-energy constellation for one of the supported orders."""
    if order not in QAM_ORDERS:
        raise SignalError(f"unsupported QAM order {order}; pick one of {QAM_ORDERS}")
    pts = np.zeros(order, dtype=np.complex128)
    if order in (4, 16, 64, 256):
        side = int(round(np.sqrt(order)))
        bits = side.bit_length() - 1
        levels = np.arange(side) * 2.0 - (side - 1)
        for p in range(side):
            for q in range(side):
                label = (_gray(p) << bits) | _gray(q)
                pts[label] = levels[p] + 1j * levels[q]
    elif order == 8:
        # 4x2 rectangle: 2 Gray bits on I, 1 on Q.
        li = np.array([-3.0, -1.0, 1.0, 3.0])
        lq = np.array([-1.0, 1.0])
        for p in range(4):
            for q in range(2):
                label = (_gray(p) << 1) | q
                pts[label] = li[p] + 1j * lq[q]
    else:
        # Cross grids: full odd-coordinate square minus the corner blocks.
        side = 6 if order == 32 else 12
        cut = 1 if order == 32 else 2
        coords = np.arange(side) * 2.0 - (side - 1)
        keep = []
        for q in coords:
            for i in coords:
                corner = (abs(i) > coords[side - 1 - cut]) and (abs(q) > coords[side - 1 - cut])
                if not corner:
                    keep.append(i + 1j * q)
        if len(keep) != order:
            raise AssertionError("cross constellation construction broke")
        pts = np.array(keep, dtype=np.complex128)
    pts = pts / np.sqrt(np.mean(np.abs(pts) ** 2))
    pts.setflags(write=False)
    return pts


def qam_map(indices: np.ndarray, order: int) -> np.ndarray:
    """Map integer symbol indices to constellation points."""
    table = qam_table(order)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= order):
        raise SignalError("symbol index out of range for the constellation")
    return table[idx]


def qam_slice(points: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-point hard decisions; ties resolve to the smaller index.

    Returns (indices, decided_points) with the input shape preserved.
    """
    table = qam_table(order)
    pts = np.asarray(points, dtype=np.complex128)
    flat = pts.ravel()
    out = np.empty(flat.size, dtype=np.int64)
    chunk = 1 << 14
    for lo in range(0, flat.size, chunk):
        seg = flat[lo:lo + chunk]
        d2 = np.abs(seg[:, None] - table[None, :]) ** 2
        out[lo:lo + chunk] = np.argmin(d2, axis=1)
    idx = out.reshape(pts.shape)
    return idx, table[idx]


def evm_nda(equalized: np.ndarray, order: int) -> float:
    """Nondata-aided EVM: RMS distance to the nearest constellation point,
    normalised by the RMS of those decided points."""
    eq = np.asarray(equalized, dtype=np.complex128).ravel()
    if eq.size == 0:
        raise SignalError("EVM of an empty symbol set is undefined")
    _, hard = qam_slice(eq, order)
    ref = np.sum(np.abs(hard) ** 2)
    if ref <= 0.0:
        raise SignalError("EVM reference power vanished")
    return float(np.sqrt(np.sum(np.abs(eq - hard) ** 2) / ref))


def write_constellation_csv(order: int, path) -> None:
    """Dump a constellation as ``index,real,imag`` rows."""
    table = qam_table(order)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("index,real,imag\n")
        for i, c in enumerate(table):
            fh.write(f"{i},{float(c.real)!r},{float(c.imag)!r}\n")


@lru_cache(maxsize=1)
def _threshold_table() -> dict[int, float]:
    text = resources.files("kiclab.data").joinpath("evm_ser_thresholds.json").read_text()
    return {int(k): float(v) for k, v in json.loads(text).items()}


def evm_threshold(order: int) -> float:
    """EVM at which hard decisions cross a symbol error rate of 1e-3.

    Values come from the checked-in Monte-Carlo calibration table
    (scripts/calibrate_evm_thresholds.py regenerates it).
    """
    if order not in QAM_ORDERS:
        raise SignalError(f"unsupported QAM order {order}")
    return _threshold_table()[order]


@dataclass(frozen=True)
class OfdmConfig:
    """Geometry and numerology of one OFDM link."""

    fft_size: int = 256
    cp_len: int = 16
    used_subcarriers: int = 192
    pilot_index_set: tuple[int, ...] = tuple(range(0, 192, 6))
    qam_order: int = 16
    symbols_per_frame: int = 501
    training_symbols: int = 1
    sample_rate_hz: float = 6_144_000.0

    def __post_init__(self) -> None:
        if self.fft_size < 8 or self.fft_size & (self.fft_size - 1):
            raise SignalError("fft_size must be a power of two, at least 8")
        if not 0 <= self.cp_len < self.fft_size:
            raise SignalError("cp_len must lie in [0, fft_size)")
        if not 2 <= self.used_subcarriers < self.fft_size:
            raise SignalError("used_subcarriers must lie in [2, fft_size)")
        if self.used_subcarriers % 2:
            raise SignalError("used_subcarriers must be even (symmetric around DC)")
        pilots = tuple(sorted(int(p) for p in self.pilot_index_set))
        if len(set(pilots)) != len(pilots):
            raise SignalError("pilot_index_set must not repeat entries")
        if pilots and (pilots[0] < 0 or pilots[-1] >= self.used_subcarriers):
            raise SignalError("pilot indices must index into the used subcarriers")
        if len(pilots) >= self.used_subcarriers:
            raise SignalError("pilots must leave room for data subcarriers")
        if self.qam_order not in QAM_ORDERS:
            raise SignalError(f"qam_order must be one of {QAM_ORDERS}, got {self.qam_order}")
        if self.training_symbols < 1:
            raise SignalError("at least one training symbol is required")
        if self.symbols_per_frame <= self.training_symbols:
            raise SignalError("frame needs at least one data symbol after training")
        if not float(self.sample_rate_hz) > 0:
            raise SignalError("sample_rate_hz must be positive")
        object.__setattr__(self, "pilot_index_set", pilots)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    @property
    def symbol_len(self) -> int:
        return self.fft_size + self.cp_len

    @property
    def frame_len(self) -> int:
        return self.symbols_per_frame * self.symbol_len

    @property
    def n_pilots(self) -> int:
        return len(self.pilot_index_set)

    @property
    def n_data_subcarriers(self) -> int:
        return self.used_subcarriers - self.n_pilots

    @property
    def n_data_symbols(self) -> int:
        return self.symbols_per_frame - self.training_symbols

    def used_bins(self) -> np.ndarray:
        """FFT bin index of each used subcarrier, ordered by frequency offset."""
        half = self.used_subcarriers // 2
        offsets = np.concatenate([np.arange(-half, 0), np.arange(1, half + 1)])
        return np.mod(offsets, self.fft_size)

    def data_positions(self) -> np.ndarray:
        """Indices of data cells within the used-subcarrier ordering."""
        mask = np.ones(self.used_subcarriers, dtype=bool)
        mask[list(self.pilot_index_set)] = False
        return np.flatnonzero(mask)


def pilot_values(cfg: OfdmConfig) -> np.ndarray:
    """Fixed BPSK pilot pattern (one value per pilot subcarrier)."""
    words = raw_words(_PILOT_PATTERN_SEED, cfg.n_pilots)
    return np.where((words >> np.uint64(63)).astype(bool), -1.0, 1.0).astype(np.complex128)


def training_grid(cfg: OfdmConfig) -> np.ndarray:
    """Known QPSK cells for the leading training symbols, shape [T, used]."""
    words = raw_words(_TRAINING_PATTERN_SEED, cfg.training_symbols * cfg.used_subcarriers)
    idx = (words & np.uint64(3)).astype(np.int64)
    return qam_map(idx, 4).reshape(cfg.training_symbols, cfg.used_subcarriers)


@dataclass(frozen=True)
class FrameSymbols:
    """Per-frame symbol content: data decisions plus the known overhead."""

    data_indices: np.ndarray
    data_symbols: np.ndarray
    pilot_values: np.ndarray
    training_grid: np.ndarray

    def __post_init__(self) -> None:
        idx = np.asarray(self.data_indices, dtype=np.int64).copy()
        sym = np.asarray(self.data_symbols, dtype=np.complex128).copy()
        pil = np.asarray(self.pilot_values, dtype=np.complex128).copy()
        tra = np.asarray(self.training_grid, dtype=np.complex128).copy()
        if idx.ndim != 2 or sym.shape != idx.shape:
            raise SignalError("data_indices and data_symbols must be equal-shape 2-D grids")
        if pil.ndim != 1 or tra.ndim != 2:
            raise SignalError("pilot_values must be 1-D and training_grid 2-D")
        if idx.size and idx.min() < 0:
            raise SignalError("negative symbol index")
        for arr in (idx, sym, pil, tra):
            arr.setflags(write=False)
        object.__setattr__(self, "data_indices", idx)
        object.__setattr__(self, "data_symbols", sym)
        object.__setattr__(self, "pilot_values", pil)
        object.__setattr__(self, "training_grid", tra)

    @property
    def n_data_symbols(self) -> int:
        return int(self.data_indices.shape[0])


@dataclass(frozen=True)
class QualityReport:
    """Demodulation quality: pooled nondata-aided EVM plus per-symbol EVM."""

    evm_rms: float
    evm_per_symbol: np.ndarray
    err_sum_sq: float
    ref_sum_sq: float

    def __post_init__(self) -> None:
        arr = np.asarray(self.evm_per_symbol, dtype=np.float64).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "evm_per_symbol", arr)


def random_frame(cfg: OfdmConfig, seed: RngSeed) -> FrameSymbols:
    """Uniformly random data grid for one frame (orders are powers of two,
    so masking raw words to log2(order) bits is exactly uniform)."""
    n = cfg.n_data_symbols * cfg.n_data_subcarriers
    words = raw_words(seed, n)
    idx = (words & np.uint64(cfg.qam_order - 1)).astype(np.int64)
    idx = idx.reshape(cfg.n_data_symbols, cfg.n_data_subcarriers)
    return FrameSymbols(
        data_indices=idx,
        data_symbols=qam_map(idx, cfg.qam_order),
        pilot_values=pilot_values(cfg),
        training_grid=training_grid(cfg),
    )


def frame_from_decisions(indices: np.ndarray, cfg: OfdmConfig) -> FrameSymbols:
    """Frame content with the given hard decisions and the known overhead."""
    idx = np.asarray(indices, dtype=np.int64)
    return FrameSymbols(
        data_indices=idx,
        data_symbols=qam_map(idx, cfg.qam_order),
        pilot_values=pilot_values(cfg),
        training_grid=training_grid(cfg),
    )


def ofdm_modulate(frame: FrameSymbols, cfg: OfdmConfig) -> ComplexSignal:
    """Synthesize one frame: training, then pilot-bearing data symbols.

    Time samples are scaled by fft_size/sqrt(used_subcarriers), which makes
    the mean output power one in expectation for unit-energy cell values.
    An all-zero grid therefore synthesizes an all-zero signal.
    """
    if frame.data_indices.shape != (cfg.n_data_symbols, cfg.n_data_subcarriers):
        raise SignalError("frame data grid does not match the configuration")
    if frame.pilot_values.shape != (cfg.n_pilots,):
        raise SignalError("pilot vector does not match the configuration")
    if frame.training_grid.shape != (cfg.training_symbols, cfg.used_subcarriers):
        raise SignalError("training grid does not match the configuration")
    bins = cfg.used_bins()
    data_pos = cfg.data_positions()
    pilot_pos = np.asarray(cfg.pilot_index_set, dtype=np.int64)
    scale = cfg.fft_size / np.sqrt(cfg.used_subcarriers)
    out = np.empty(cfg.frame_len, dtype=np.complex128)
    cursor = 0
    for t in range(cfg.symbols_per_frame):
        used = np.zeros(cfg.used_subcarriers, dtype=np.complex128)
        if t < cfg.training_symbols:
            used[:] = frame.training_grid[t]
        else:
            used[pilot_pos] = frame.pilot_values
            used[data_pos] = frame.data_symbols[t - cfg.training_symbols]
        grid = np.zeros(cfg.fft_size, dtype=np.complex128)
        grid[bins] = used
        body = np.fft.ifft(grid) * scale
        if cfg.cp_len:
            out[cursor:cursor + cfg.cp_len] = body[-cfg.cp_len:]
        out[cursor + cfg.cp_len:cursor + cfg.symbol_len] = body
        cursor += cfg.symbol_len
    return ComplexSignal(out, cfg.sample_rate_hz)


_SMOOTHING = 0.9          # channel estimate carry-over between symbols
_MIN_CHANNEL_MAG = 1e-12  # below this the link is unequalizable


def ofdm_demodulate(
    sig: ComplexSignal, cfg: OfdmConfig, frame_start: int = 0,
) -> tuple[FrameSymbols, QualityReport]:
    """Recover one frame of hard decisions and the demodulation quality.

    Channel handling: least-squares estimate over the training symbols,
    then per data symbol a pilot least-squares update with common-phase
    correction from the pilot average and linear interpolation between
    pilots, folded into the running estimate with factor 0.9.
    """
    if frame_start < 0:
        raise SignalError("frame_start must be nonnegative")
    need = frame_start + cfg.frame_len
    if len(sig) < need:
        raise SignalError(f"signal too short: need {need} samples, have {len(sig)}")
    x = sig.samples
    bins = cfg.used_bins()
    data_pos = cfg.data_positions()
    pilot_pos = np.asarray(cfg.pilot_index_set, dtype=np.int64)
    pil = pilot_values(cfg)
    train = training_grid(cfg)
    used_axis = np.arange(cfg.used_subcarriers, dtype=np.float64)

    # Training least squares, averaged if there are several training symbols.
    h = np.zeros(cfg.used_subcarriers, dtype=np.complex128)
    for t in range(cfg.training_symbols):
        start = frame_start + t * cfg.symbol_len + cfg.cp_len
        used = np.fft.fft(x[start:start + cfg.fft_size])[bins]
        h += used / train[t]
    h /= cfg.training_symbols
    if np.any(np.abs(h[pilot_pos]) < _MIN_CHANNEL_MAG):
        raise SignalError("unequalizable: channel estimate vanished at a pilot")

    n_data = cfg.n_data_symbols
    idx_grid = np.empty((n_data, cfg.n_data_subcarriers), dtype=np.int64)
    eq_grid = np.empty((n_data, cfg.n_data_subcarriers), dtype=np.complex128)
    for t in range(n_data):
        start = frame_start + (cfg.training_symbols + t) * cfg.symbol_len + cfg.cp_len
        used = np.fft.fft(x[start:start + cfg.fft_size])[bins]
        p_raw = used[pilot_pos] / pil
        cpe = np.sum(p_raw * np.conj(h[pilot_pos]))
        derot = np.exp(-1j * np.angle(cpe)) if abs(cpe) > 0.0 else 1.0
        h_p = p_raw * derot
        h_now = (
            np.interp(used_axis, pilot_pos.astype(np.float64), h_p.real)
            + 1j * np.interp(used_axis, pilot_pos.astype(np.float64), h_p.imag)
        )
        # Extrapolate past the outermost pilots; a held edge misequalizes
        # the last few subcarriers badly enough to dominate the error rate.
        if len(pilot_pos) >= 2:
            lo, lo2 = pilot_pos[0], pilot_pos[1]
            hi, hi2 = pilot_pos[-1], pilot_pos[-2]
            if lo > 0:
                slope = (h_p[1] - h_p[0]) / float(lo2 - lo)
                h_now[:lo] = h_p[0] + slope * (used_axis[:lo] - float(lo))
            if hi < cfg.used_subcarriers - 1:
                slope = (h_p[-1] - h_p[-2]) / float(hi - hi2)
                h_now[hi + 1:] = h_p[-1] + slope * (used_axis[hi + 1:] - float(hi))
        h = _SMOOTHING * h + (1.0 - _SMOOTHING) * h_now
        hd = h[data_pos]
        if np.any(np.abs(hd) < _MIN_CHANNEL_MAG):
            raise SignalError("unequalizable: channel estimate vanished at a data cell")
        eq = used[data_pos] * derot / hd
        idx_grid[t], _ = qam_slice(eq, cfg.qam_order)
        eq_grid[t] = eq

    hard = qam_map(idx_grid, cfg.qam_order)
    err2 = np.abs(eq_grid - hard) ** 2
    ref2 = np.abs(hard) ** 2
    ref_tot = float(np.sum(ref2))
    if ref_tot <= 0.0:
        raise SignalError("EVM reference power vanished")
    per_sym = np.sqrt(np.sum(err2, axis=1) / np.maximum(np.sum(ref2, axis=1), 1e-300))
    report = QualityReport(
        evm_rms=float(np.sqrt(np.sum(err2) / ref_tot)),
        evm_per_symbol=per_sym,
        err_sum_sq=float(np.sum(err2)),
        ref_sum_sq=ref_tot,
    )
    frame = FrameSymbols(
        data_indices=idx_grid,
        data_symbols=hard,
        pilot_values=pil,
        training_grid=train,
    )
    return frame, report


def generate_ki(seed: RngSeed, n_samples: int, passband_fraction: float = 5.0 / 6.5,
                sample_rate_hz: float = 6_144_000.0) -> ComplexSignal:
    """Known interference: band-limited complex Gaussian noise, unit power.

    ``passband_fraction`` is the occupied share of the sampling bandwidth.
    At exactly 1.0 the shaping filter is bypassed and the stream is white.
    Fractions above 0.9 (other than 1.0) leave no room for the filter
    transition band and are rejected.
    """
    pf = float(passband_fraction)
    if not 0.0 < pf <= 1.0:
        raise SignalError("passband_fraction must lie in (0, 1]")
    if pf != 1.0 and pf > 0.9:
        raise SignalError("passband_fraction above 0.9 requires the all-pass case 1.0")
    if n_samples <= _KI_FILTER_TAPS:
        raise SignalError(f"n_samples must exceed the filter length {_KI_FILTER_TAPS}")
    g = gaussian_stream(seed, n_samples, sample_rate_hz).samples
    if pf == 1.0:
        y = g
    else:
        taps = firwin(_KI_FILTER_TAPS, pf, window=("kaiser", _KI_KAISER_BETA))
        y = fftconvolve(g, taps, mode="same")
    y = y / np.sqrt(mean_power(y))
    return ComplexSignal(y, sample_rate_hz)
