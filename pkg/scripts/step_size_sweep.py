"""Stability sweep behind the canceller's frozen step-size defaults.

Sweeps each base step size over a log grid while the other two stay at
their shipped values, and reports the median steady-state residual, the
terminal offset errors, and any divergences.  Usage:

    python3 scripts/step_size_sweep.py [--seeds N] [--out FILE]

The shipped defaults (mu_w 0.008, mu_eps 1e-6, mu_eta 1e-7) were frozen
off this sweep; the recorded run lives in docs/step_size_sweep.md.
"""

import argparse
import sys

import numpy as np

from kiclab.canceller import CancellerConfig, CancellerDivergence, cancel, init_state
from kiclab.core import RngSeed, db_to_linear, mean_power
from kiclab.impairments import ImpairmentParams, apply_channel, superpose
from kiclab.labbench import ScenarioConfig, _channel_taps, run_scenario
from kiclab.waveform import generate_ki

INR_DB = 40.0
EPS_TRUE = 1e-3
ETA_TRUE = 1e-5
N_SAMPLES = 120_000


def _one_run(seed: int, cfg: CancellerConfig):
    """KI at 40 dB INR with both offsets on, no SI; returns
    (residual_db, |eps error|, |eta error|) or None on divergence."""
    root = RngSeed(seed)
    x = generate_ki(root.derive(1), N_SAMPLES, 5.0 / 6.5, 6_144_000.0)
    params = ImpairmentParams(
        taps=_channel_taps(root.derive(2), 5),
        cfo_rad_per_sample=EPS_TRUE,
        sfo_rate=ETA_TRUE,
    )
    ki_rx = apply_channel(x, params, root.derive(3))
    g = np.sqrt(db_to_linear(INR_DB) / mean_power(ki_rx))
    ki_rx = type(ki_rx)(ki_rx.samples * g, ki_rx.sample_rate_hz)
    d = superpose([ki_rx], 1.0, root.derive(4))
    try:
        d_hat, _, state = cancel(x, d, init_state(cfg), cfg)
    except CancellerDivergence:
        return None
    win = slice(N_SAMPLES // 5, N_SAMPLES)
    resid = mean_power(ki_rx.samples[win] - d_hat.samples[win])
    return (
        float(10.0 * np.log10(resid)),
        abs(state.eps_hat - EPS_TRUE),
        abs(state.eta_hat - ETA_TRUE),
    )


def _sweep(name: str, values, make_cfg, seeds, lines) -> None:
    lines.append("")
    lines.append(f"## {name}")
    lines.append("")
    lines.append("| value | median resid (dB) | median |eps err| | median |eta err| | diverged |")
    lines.append("|---|---|---|---|---|")
    for v in values:
        cfg = make_cfg(v)
        outs = [_one_run(s, cfg) for s in seeds]
        div = sum(o is None for o in outs)
        good = [o for o in outs if o is not None]
        if good:
            med = [float(np.median([o[i] for o in good])) for i in range(3)]
            lines.append(
                f"| {v:g} | {med[0]:.2f} | {med[1]:.2e} | {med[2]:.2e} | {div}/{len(outs)} |"
            )
        else:
            lines.append(f"| {v:g} | - | - | - | {div}/{len(outs)} |")
        print(lines[-1], flush=True)


def _si_stress(seeds, lines) -> None:
    """mu_w recheck with a strong in-band signal as estimation noise."""
    lines.append("")
    lines.append("## mu_w with SI at 40 dB SNR (residual only)")
    lines.append("")
    lines.append("| mu_w | median resid (dB) | diverged |")
    lines.append("|---|---|---|")
    for v in (0.002, 0.004, 0.008, 0.016, 0.032):
        rs, div = [], 0
        for s in seeds:
            row = run_scenario(ScenarioConfig(
                seed=s, mode="base_kic", ki_db=INR_DB, si_db=40.0,
                canceller=CancellerConfig(mu_w=v),
            ))
            if row.flags:
                div += 1
            else:
                rs.append(row.residual_ki_db)
        med = f"{float(np.median(rs)):.2f}" if rs else "-"
        lines.append(f"| {v:g} | {med} | {div}/{len(seeds)} |")
        print(lines[-1], flush=True)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)
    seeds = range(1, args.seeds + 1)

    lines = [
        "# Canceller step-size sweep",
        "",
        f"Reproduce with: `python3 scripts/step_size_sweep.py --seeds {args.seeds}`.",
        f"Setup: KI INR {INR_DB:g} dB, 5-tap channel, eps {EPS_TRUE:g}, eta {ETA_TRUE:g},",
        f"{N_SAMPLES} samples, steady window after the first fifth.",
    ]
    _sweep("mu_w (taps)", (0.002, 0.004, 0.008, 0.016, 0.032, 0.064),
           lambda v: CancellerConfig(mu_w=v), seeds, lines)
    _sweep("mu_eps (carrier offset)", (1e-7, 3e-7, 1e-6, 3e-6, 1e-5),
           lambda v: CancellerConfig(mu_eps=v), seeds, lines)
    _sweep("mu_eta (clock offset)", (1e-8, 3e-8, 1e-7, 3e-7, 1e-6),
           lambda v: CancellerConfig(mu_eta=v), seeds, lines)
    _si_stress(seeds, lines)
    lines.append("")
    lines.append("Frozen defaults: mu_w 0.008, mu_eps 1e-6, mu_eta 1e-7.  Taps sit one")
    lines.append("notch below the clean-input bowl bottom because residual grows with")
    lines.append("mu_w once a strong in-band signal acts as estimation noise (second")
    lines.append("table).  The offset steps give up about 1 dB of floor versus their")
    lines.append("bowl bottoms to lock several times faster from a cold start.")

    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
