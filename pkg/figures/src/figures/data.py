"""Strict readers for the bench's two on-disk formats.

This package talks to the simulation bench only through files: the sweep
CSV (canonical 12-column header) and the ``KICLAB1`` IQ dump.  Both
readers validate aggressively and reject anything the bench would not
have written, naming the offending column or byte-level defect, so a
figure can never silently plot the wrong quantity.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

CSV_HEADER = (
    "ki_db,si_db,mode,qam,residual_ki_db,post_kic_sinr_db,"
    "ser,evm,iterations,goodput_bps,seed,flags"
)
COLUMNS = tuple(CSV_HEADER.split(","))
MODES = ("no_ki", "base_kic", "df_kic")
QAM_ORDERS = (4, 8, 16, 32, 64, 128, 256)

IQ_MAGIC = b"KICLAB1\x00"
_IQ_HEADER = struct.Struct("<8sI4s")


class FigureError(Exception):
    """Input or option problem the caller can fix."""


@dataclass(frozen=True)
class SweepRow:
    """One sweep grid point, fields in CSV column order."""

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
    flags: str


def _check_header(line: str) -> None:
    got = line.split(",")
    want = list(COLUMNS)
    for i, (g, w) in enumerate(zip(got, want)):
        if g != w:
            raise FigureError(f"unknown column {g!r} (expected {w!r} at position {i})")
    if len(got) > len(want):
        raise FigureError(f"unknown column {got[len(want)]!r}")
    if len(got) < len(want):
        raise FigureError(f"missing column {want[len(got)]!r}")


def read_sweep(path) -> list[SweepRow]:
    """Parse a sweep CSV; the header must match the schema exactly."""
    with open(path, "r", encoding="ascii", newline="") as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0]:
        raise FigureError("empty file, expected a sweep CSV")
    _check_header(lines[0])
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if line == "":
            continue
        cells = line.split(",")
        if len(cells) != len(COLUMNS):
            raise FigureError(
                f"line {ln}: expected {len(COLUMNS)} cells, found {len(cells)}"
            )
        try:
            row = SweepRow(
                ki_db=float(cells[0]), si_db=float(cells[1]), mode=cells[2],
                qam=int(cells[3]), residual_ki_db=float(cells[4]),
                post_kic_sinr_db=float(cells[5]), ser=float(cells[6]),
                evm=float(cells[7]), iterations=float(cells[8]),
                goodput_bps=float(cells[9]), seed=int(cells[10]), flags=cells[11],
            )
        except ValueError as exc:
            raise FigureError(f"line {ln}: {exc}") from exc
        if row.mode not in MODES:
            raise FigureError(f"line {ln}: unknown mode {row.mode!r}")
        if row.qam not in QAM_ORDERS:
            raise FigureError(f"line {ln}: unsupported QAM order {row.qam}")
        if not row.flags and not math.isnan(row.ser) and not 0.0 <= row.ser <= 1.0:
            raise FigureError(f"line {ln}: ser outside [0, 1]")
        rows.append(row)
    if not rows:
        raise FigureError("no data rows")
    return rows


def read_iq(path) -> tuple[np.ndarray, float]:
    """Read a KICLAB1 IQ dump: complex samples and the sample rate in Hz."""
    with open(path, "rb") as fh:
        head = fh.read(_IQ_HEADER.size)
        if len(head) != _IQ_HEADER.size:
            raise FigureError(f"{path}: truncated before header end")
        magic, rate, _ = _IQ_HEADER.unpack(head)
        if magic != IQ_MAGIC:
            raise FigureError(f"{path}: not a KICLAB1 IQ file")
        body = fh.read()
    if len(body) % 8:
        raise FigureError(f"{path}: payload is not a whole number of I/Q pairs")
    inter = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return inter[0::2] + 1j * inter[1::2], float(rate)
