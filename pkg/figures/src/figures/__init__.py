"""Figure rendering for bench sweep CSVs and IQ dumps."""

from figures.data import (
    CSV_HEADER,
    COLUMNS,
    FigureError,
    SweepRow,
    read_iq,
    read_sweep,
)
from figures.render import KINDS, FigureSpec, min_sinr_for_target, render

__all__ = [
    "CSV_HEADER",
    "COLUMNS",
    "FigureError",
    "FigureSpec",
    "KINDS",
    "SweepRow",
    "min_sinr_for_target",
    "read_iq",
    "read_sweep",
    "render",
]
