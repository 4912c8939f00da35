"""Regenerate src/kiclab/data/evm_ser_thresholds.json.

For each QAM order, bisect the AWGN level at which hard decisions cross a
symbol error rate of 1e-3 and record the nondata-aided EVM measured there.
The resulting table is the per-order default for the decision-feedback
quality gate.  Fully seeded; rerunning reproduces the same file.
"""

import json
import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from kiclab.core import RngSeed, gaussian_stream, raw_words
from kiclab.waveform import QAM_ORDERS, evm_nda, qam_map, qam_slice

TARGET_SER = 1e-3
N_SYMBOLS = 1_000_000
SEED = RngSeed(0x45564D_5345_52)


def ser_and_evm(order: int, sigma: float, idx: np.ndarray, noise: np.ndarray) -> tuple[float, float]:
    sent = qam_map(idx, order)
    r = sent + sigma * noise
    dec, _ = qam_slice(r, order)
    ser = float(np.mean(dec != idx))
    return ser, evm_nda(r, order)


def calibrate(order: int) -> float:
    idx = (raw_words(SEED.derive(order), N_SYMBOLS) & np.uint64(order - 1)).astype(np.int64)
    noise = gaussian_stream(SEED.derive(order + 1000), N_SYMBOLS).samples
    lo, hi = 1e-3, 1.0  # sigma bracket: SER(lo) ~ 0, SER(hi) >> target
    for _ in range(24):
        mid = np.sqrt(lo * hi)
        ser, _ = ser_and_evm(order, mid, idx, noise)
        if ser > TARGET_SER:
            hi = mid
        else:
            lo = mid
    sigma = np.sqrt(lo * hi)
    ser, evm = ser_and_evm(order, sigma, idx, noise)
    print(f"order {order:3d}: sigma {sigma:.5f}  ser {ser:.2e}  evm {evm:.5f}")
    return evm


def main() -> None:
    table = {str(order): round(float(calibrate(order)), 6) for order in QAM_ORDERS}
    out = pathlib.Path(__file__).resolve().parents[1] / "src" / "kiclab" / "data" / "evm_ser_thresholds.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(table, indent=2) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
