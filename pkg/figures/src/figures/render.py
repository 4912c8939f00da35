"""The four result figures, rendered from sweep CSVs and IQ dumps.

Every kind is a pure function of its input bytes: :func:`render` returns
the exact arrays handed to matplotlib so tests can compare them against
independently derived values, and the image file is a byproduct.  PSD
estimation uses Welch averaging with 1024-sample segments, 50% overlap,
and a Hann window; the SER 1e-3 requirement contour interpolates
linearly in dB between adjacent grid points, matching the bench's own
convention.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from scipy.signal import welch

from figures.data import FigureError, SweepRow, read_iq, read_sweep

KINDS = ("residual_grid", "psd_iterations", "sinr_contour", "goodput_curves")
SER_TARGET = 1e-3

_FIGSIZE = (9.0, 4.5)
_DPI = 150


@dataclass(frozen=True)
class FigureSpec:
    """What to draw: a kind, its input path, and the output image path.

    ``source`` is the sweep CSV for the grid/curve kinds and the IQ dump
    directory (``received.iq`` plus ``residual_iter<k>.iq``) for
    ``psd_iterations``.
    """

    kind: str
    source: str | Path
    out_path: str | Path
    title: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise FigureError(f"kind must be one of {KINDS}, got {self.kind!r}")


def min_sinr_for_target(points, target: float = SER_TARGET) -> float:
    """SINR (dB) where the (sinr, ser) samples first cross ``target``,
    linearly interpolated in dB; NaN when the target is never met."""
    pts = sorted((float(x), float(s)) for x, s in points if not math.isnan(s))
    if not pts:
        return float("nan")
    if pts[0][1] <= target:
        return pts[0][0]
    for (x1, s1), (x2, s2) in zip(pts, pts[1:]):
        if s2 <= target < s1:
            return float(x1 + (x2 - x1) * (s1 - target) / (s1 - s2))
    return float("nan")


def _usable(rows: list[SweepRow]) -> list[SweepRow]:
    rows = [r for r in rows if not r.flags]
    if not rows:
        raise FigureError("no usable rows (all flagged)")
    return rows


def _axis_values(rows, attr) -> np.ndarray:
    return np.array(sorted({getattr(r, attr) for r in rows}))


def _grid(rows, ki_values, si_values, value_fn) -> np.ndarray:
    g = np.full((len(ki_values), len(si_values)), np.nan)
    for i, ki in enumerate(ki_values):
        for j, si in enumerate(si_values):
            vals = [
                value_fn(r) for r in rows
                if r.ki_db == ki and r.si_db == si and not math.isnan(value_fn(r))
            ]
            if vals:
                g[i, j] = float(np.mean(vals))
    return g


def _heatmap(ax, grid, ki_values, si_values, vmin=None, vmax=None):
    im = ax.imshow(
        grid,
        origin="lower",
        aspect="auto",
        vmin=vmin,
        vmax=vmax,
        extent=(si_values[0], si_values[-1], ki_values[0], ki_values[-1]),
    )
    ax.set_xlabel("SI SNR (dB)")
    ax.set_ylabel("KI INR (dB)")
    return im


def _render_residual_grid(rows, fig):
    rows = _usable(rows)
    modes = [m for m in ("base_kic", "df_kic") if any(r.mode == m for r in rows)]
    if not modes:
        raise FigureError("no cancellation rows to plot")
    ki_values = _axis_values(rows, "ki_db")
    si_values = _axis_values(rows, "si_db")
    arrays = {"ki_values": ki_values, "si_values": si_values}
    grids = {}
    for mode in modes:
        sub = [r for r in rows if r.mode == mode]
        grids[mode] = _grid(sub, ki_values, si_values, lambda r: r.residual_ki_db)
        arrays[f"grid_{mode}"] = grids[mode]
    finite = np.concatenate([g[np.isfinite(g)] for g in grids.values()])
    vmin, vmax = (float(finite.min()), float(finite.max())) if finite.size else (None, None)
    axes = fig.subplots(1, len(modes), squeeze=False)[0]
    for ax, mode in zip(axes, modes):
        im = _heatmap(ax, grids[mode], ki_values, si_values, vmin, vmax)
        if len(ki_values) > 1 and len(si_values) > 1:
            ax.contour(si_values, ki_values, grids[mode], colors="white", linewidths=0.7)
        ax.set_title(mode)
    fig.colorbar(im, ax=list(axes), label="residual KI over noise (dB)")
    return arrays


def _render_goodput_curves(rows, fig):
    rows = _usable(rows)
    ki_values = _axis_values(rows, "ki_db")
    arrays = {"ki_values": ki_values}
    ax = fig.subplots()
    pairs = sorted({(r.mode, r.si_db) for r in rows})
    for mode, si in pairs:
        sub = [r for r in rows if r.mode == mode and r.si_db == si]
        curve = np.full(len(ki_values), np.nan)
        for i, ki in enumerate(ki_values):
            vals = [r.goodput_bps for r in sub
                    if r.ki_db == ki and not math.isnan(r.goodput_bps)]
            if vals:
                curve[i] = float(np.mean(vals))
        arrays[f"curve_{mode}_si{si:g}"] = curve
        ax.plot(ki_values, curve, marker="o", label=f"{mode}, SI {si:g} dB")
    ax.set_xlabel("KI INR (dB)")
    ax.set_ylabel("goodput (bits per data cell)")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    return arrays


def _render_sinr_contour(rows, fig):
    rows = _usable(rows)
    ki_values = _axis_values(rows, "ki_db")
    si_values = _axis_values(rows, "si_db")
    arrays = {"ki_values": ki_values, "si_values": si_values}
    ax_req, ax_iter = fig.subplots(1, 2)
    modes = [m for m in ("no_ki", "base_kic", "df_kic") if any(r.mode == m for r in rows)]
    for mode in modes:
        req = np.full(len(ki_values), np.nan)
        for i, ki in enumerate(ki_values):
            pts = [(r.post_kic_sinr_db, r.ser) for r in rows
                   if r.mode == mode and r.ki_db == ki
                   and not math.isnan(r.post_kic_sinr_db)]
            req[i] = min_sinr_for_target(pts)
        arrays[f"required_{mode}"] = req
        ax_req.plot(ki_values, req, marker="s", label=mode)
    ax_req.set_xlabel("KI INR (dB)")
    ax_req.set_ylabel(f"SINR required for SER {SER_TARGET:g} (dB)")
    ax_req.grid(True, alpha=0.3)
    ax_req.legend(fontsize=8)

    df_rows = [r for r in rows if r.mode == "df_kic"]
    iter_grid = _grid(df_rows, ki_values, si_values, lambda r: r.iterations)
    arrays["iter_grid"] = iter_grid
    if df_rows:
        im = _heatmap(ax_iter, iter_grid, ki_values, si_values)
        fig.colorbar(im, ax=ax_iter, label="mean feedback iterations")
    ax_iter.set_title("df_kic iterations")
    return arrays


_RESIDUAL_NAME = re.compile(r"residual_iter(\d+)\.iq$")


def _psd_db(samples: np.ndarray, rate: float):
    freqs, psd = welch(
        samples,
        fs=rate,
        window="hann",
        nperseg=1024,
        noverlap=512,
        detrend=False,
        return_onesided=False,
        scaling="density",
    )
    order = np.fft.fftshift(np.arange(len(freqs)))
    return freqs[order], 10.0 * np.log10(np.abs(psd[order]))


def _render_psd_iterations(source, fig):
    src = Path(source)
    if not src.is_dir():
        raise FigureError(f"{src}: psd_iterations needs the IQ dump directory")
    residuals = sorted(
        (int(m.group(1)), p)
        for p in src.iterdir()
        if (m := _RESIDUAL_NAME.match(p.name))
    )
    if not residuals:
        raise FigureError(f"{src}: no residual_iter<k>.iq files, nothing to plot")
    ax = fig.subplots()
    arrays = {}
    received = src / "received.iq"
    if received.exists():
        samples, rate = read_iq(received)
        freqs, db = _psd_db(samples, rate)
        arrays["freq_hz"] = freqs
        arrays["psd_received"] = db
        ax.plot(freqs / 1e6, db, label="received", color="0.4", linewidth=0.9)
    for k, path in residuals:
        samples, rate = read_iq(path)
        freqs, db = _psd_db(samples, rate)
        arrays.setdefault("freq_hz", freqs)
        arrays[f"psd_iter{k}"] = db
        ax.plot(freqs / 1e6, db, label=f"iteration {k} residual", linewidth=0.9)
    ax.set_xlabel("frequency (MHz)")
    ax.set_ylabel("PSD (dB/Hz)")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    return arrays


def render(spec: FigureSpec) -> dict[str, np.ndarray]:
    """Draw the figure, write ``spec.out_path``, return the plotted arrays."""
    fig = plt.figure(figsize=_FIGSIZE, dpi=_DPI)
    try:
        if spec.kind == "psd_iterations":
            arrays = _render_psd_iterations(spec.source, fig)
        else:
            rows = read_sweep(spec.source)
            if spec.kind == "residual_grid":
                arrays = _render_residual_grid(rows, fig)
            elif spec.kind == "goodput_curves":
                arrays = _render_goodput_curves(rows, fig)
            else:
                arrays = _render_sinr_contour(rows, fig)
        if spec.title:
            fig.suptitle(spec.title)
        fig.savefig(spec.out_path)
    finally:
        plt.close(fig)
    return arrays
