"""Adaptive cancellation of a known waveform received through an unknown channel.

The estimator jointly tracks, per sample:

* ``w_hat``   M complex FIR taps (applied conjugated, like the channel),
* ``eps_hat`` carrier frequency offset in rad/sample,
* ``eta_hat`` sampling clock rate offset,

by stochastic gradient descent on |e(n)|^2 with

    d_hat(n) = w_hat^H u(n) * exp(j*phase(n)),    e(n) = desired(n) - d_hat(n)

where u(n) holds M consecutive fractional reads of the reference at
positions tau(n) - m and phase/tau integrate the current offset estimates.
The tap step is normalised by a smoothed regressor power and shaped by an
error-power variable-step factor; both offset gradients are normalised by
their own smoothed RMS, so the step sizes are dimensionless knobs.

All smoothed accumulators are bias-corrected by 1 - lambda^n while they
warm up, which keeps the very first updates at the intended scale instead
of overshooting against a near-zero normaliser.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from kiclab.core import ComplexSignal, SignalError
from kiclab.impairments import _cubic_dweights, _cubic_weights


class CancellerDivergence(RuntimeError):
    """Raised when the estimator produces a non-finite value."""

    def __init__(self, sample_index: int, iteration: int | None = None):
        msg = f"canceller diverged at sample {sample_index}"
        if iteration is not None:
            msg += f" (decision-feedback iteration {iteration})"
        super().__init__(msg)
        self.sample_index = sample_index
        self.iteration = iteration


@dataclass(frozen=True)
class CancellerConfig:
    """Step sizes, forgetting factors, and sizing for the estimator."""

    n_taps: int = 5
    mu_w: float = 0.008
    mu_eps: float = 1e-6
    mu_eta: float = 1e-7
    lambda_e: float = 0.99995
    lambda_r: float = 0.9995
    lambda_y: float = 0.999
    lambda_eps: float = 0.99999
    lambda_eta: float = 0.99999
    noise_guess: float = 1e-3
    regularizer: float = 1e-9

    def __post_init__(self) -> None:
        if self.n_taps < 1:
            raise SignalError("n_taps must be at least 1")
        for name in ("mu_w", "mu_eps", "mu_eta"):
            if not float(getattr(self, name)) >= 0.0:
                raise SignalError(f"{name} must be nonnegative")
        for name in ("lambda_e", "lambda_r", "lambda_y", "lambda_eps", "lambda_eta"):
            lam = float(getattr(self, name))
            if not 0.0 < lam < 1.0:
                raise SignalError(f"{name} must lie in (0, 1)")
        if not float(self.noise_guess) >= 0.0:
            raise SignalError("noise_guess must be nonnegative")
        if not float(self.regularizer) > 0.0:
            raise SignalError("regularizer must be positive")


@dataclass(frozen=True)
class EstimatorState:
    """Warm-restartable snapshot of the estimator between buffers.

    ``phase_acc`` and ``position_acc`` are the integrators behind the offset
    models; ``n_seen`` counts samples ever processed so the bias correction
    of the smoothed accumulators survives a warm restart.
    """

    w_hat: np.ndarray
    eps_hat: float = 0.0
    eta_hat: float = 0.0
    phase_acc: float = 0.0
    position_acc: float = -1.0
    err_power: float = 0.0
    in_power: float = 0.0
    grad_power_eps: float = 0.0
    grad_power_eta: float = 0.0
    refdot_power: float = 0.0
    n_seen: int = 0

    def __post_init__(self) -> None:
        w = np.asarray(self.w_hat, dtype=np.complex128).copy()
        if w.ndim != 1 or w.size == 0:
            raise SignalError("w_hat must be a nonempty 1-D array")
        w.setflags(write=False)
        object.__setattr__(self, "w_hat", w)
        for name in ("eps_hat", "eta_hat", "phase_acc", "position_acc", "err_power",
                     "in_power", "grad_power_eps", "grad_power_eta", "refdot_power"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise SignalError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "n_seen", int(self.n_seen))


def init_state(cfg: CancellerConfig) -> EstimatorState:
    """Cold-start state: zero taps and offsets, neutral accumulators.

    position_acc starts at -1 so the first regressor read lands on
    reference position ~0, aligned with the first desired sample.
    """
    return EstimatorState(
        w_hat=np.zeros(cfg.n_taps, dtype=np.complex128),
        in_power=cfg.regularizer,
        refdot_power=cfg.regularizer,
    )


def rewind_for_rerun(state: EstimatorState, n_samples: int) -> EstimatorState:
    """Prepare a state for re-running the buffer it just processed.

    The integrators are back-extrapolated by the converged rates, which
    keeps the carried taps aligned over the converged tail of the buffer;
    the taps absorb whatever constant rotation the anchors miss, and the
    re-rotation transient at the head is short at the working step sizes.
    """
    if n_samples < 1:
        raise SignalError("n_samples must be positive")
    if state.n_seen < n_samples:
        raise SignalError("state has not processed that many samples")
    return replace(
        state,
        phase_acc=state.phase_acc - n_samples * state.eps_hat,
        position_acc=state.position_acc - n_samples * (1.0 + state.eta_hat),
    )


def shift_reference(state: EstimatorState, offset: int) -> EstimatorState:
    """Rebase the position integrator after dropping ``offset`` leading
    reference samples (used when chaining consecutive frames)."""
    return replace(state, position_acc=state.position_acc - float(offset))


def state_snapshot(state: EstimatorState) -> dict:
    """Plain-data snapshot (JSON-compatible) for transfer between workers."""
    return {
        "w_hat": [[float(c.real), float(c.imag)] for c in state.w_hat],
        "eps_hat": state.eps_hat,
        "eta_hat": state.eta_hat,
        "phase_acc": state.phase_acc,
        "position_acc": state.position_acc,
        "err_power": state.err_power,
        "in_power": state.in_power,
        "grad_power_eps": state.grad_power_eps,
        "grad_power_eta": state.grad_power_eta,
        "refdot_power": state.refdot_power,
        "n_seen": state.n_seen,
    }


def state_from_snapshot(data: dict) -> EstimatorState:
    """Inverse of :func:`state_snapshot`."""
    w = np.array([complex(re, im) for re, im in data["w_hat"]], dtype=np.complex128)
    return EstimatorState(
        w_hat=w,
        eps_hat=float(data["eps_hat"]),
        eta_hat=float(data["eta_hat"]),
        phase_acc=float(data["phase_acc"]),
        position_acc=float(data["position_acc"]),
        err_power=float(data["err_power"]),
        in_power=float(data["in_power"]),
        grad_power_eps=float(data["grad_power_eps"]),
        grad_power_eta=float(data["grad_power_eta"]),
        refdot_power=float(data["refdot_power"]),
        n_seen=int(data["n_seen"]),
    )


@njit(cache=True)
def _run_loop(ref, des, w, sc, d_hat, err,
              lam_e, lam_r, lam_y, lam_eps, lam_eta,
              mu_w, mu_eps, mu_eta, noise_guess, reg):
    # sc: [eps, eta, phase, pos, err_p, in_p, gp_eps, gp_eta, refdot_p, n_seen]
    eps = sc[0]
    eta = sc[1]
    phase = sc[2]
    pos = sc[3]
    err_p = sc[4]
    in_p = sc[5]
    gp_eps = sc[6]
    gp_eta = sc[7]
    refdot_p = sc[8]
    n_seen = sc[9]

    m_taps = w.shape[0]
    n_len = des.shape[0]
    nref = ref.shape[0]
    u = np.empty(m_taps, dtype=np.complex128)
    udot = np.empty(m_taps, dtype=np.complex128)

    # Running bias-correction factors lambda^n_seen; underflow to 0 is the
    # fully warmed-up case.
    be = lam_e ** n_seen
    br = lam_r ** n_seen
    by = lam_y ** n_seen
    beps = lam_eps ** n_seen
    beta_ = lam_eta ** n_seen

    for n in range(n_len):
        pos += 1.0 + eta
        phase += eps

        unorm2 = 0.0
        udnorm2 = 0.0
        for m in range(m_taps):
            p = pos - m
            i = int(np.floor(p))
            f = p - i
            w0, w1, w2, w3 = _cubic_weights(f)
            d0, d1, d2, d3 = _cubic_dweights(f)
            v = 0.0 + 0.0j
            dv = 0.0 + 0.0j
            k = i - 1
            if 0 <= k < nref:
                v += w0 * ref[k]
                dv += d0 * ref[k]
            k = i
            if 0 <= k < nref:
                v += w1 * ref[k]
                dv += d1 * ref[k]
            k = i + 1
            if 0 <= k < nref:
                v += w2 * ref[k]
                dv += d2 * ref[k]
            k = i + 2
            if 0 <= k < nref:
                v += w3 * ref[k]
                dv += d3 * ref[k]
            u[m] = v
            udot[m] = dv
            unorm2 += v.real * v.real + v.imag * v.imag
            udnorm2 += dv.real * dv.real + dv.imag * dv.imag

        rot = np.exp(1j * phase)
        dh = 0.0 + 0.0j
        dd = 0.0 + 0.0j
        for m in range(m_taps):
            wc = w[m].conjugate()
            dh += wc * u[m]
            dd += wc * udot[m]
        dh *= rot
        dd *= rot
        e = des[n] - dh
        d_hat[n] = dh
        err[n] = e

        if not (np.isfinite(e.real) and np.isfinite(e.imag)):
            return n, eps, eta, phase, pos, err_p, in_p, gp_eps, gp_eta, refdot_p

        ae2 = e.real * e.real + e.imag * e.imag
        err_p = lam_e * err_p + (1.0 - lam_e) * ae2
        in_p = lam_r * in_p + (1.0 - lam_r) * unorm2
        refdot_p = lam_y * refdot_p + (1.0 - lam_y) * udnorm2
        be *= lam_e
        br *= lam_r
        by *= lam_y

        err_c = err_p / (1.0 - be) if be < 1.0 else err_p
        in_c = in_p / (1.0 - br) if br < 1.0 else in_p
        refdot_c = refdot_p / (1.0 - by) if by < 1.0 else refdot_p

        s = err_c / (err_c + in_c * noise_guess + reg)
        if s > 1.0:
            s = 1.0
        elif s < 0.0:
            s = 0.0

        g_tap = mu_w * s / (in_c + reg)
        ec = e.conjugate()
        for m in range(m_taps):
            w[m] += g_tap * (u[m] * rot) * ec

        # Offset gradients: descent directions for |e|^2 w.r.t. phase rate
        # and position rate, each normalised to unit RMS before stepping.
        g_eps = (dh.conjugate() * e).imag
        gp_eps = lam_eps * gp_eps + (1.0 - lam_eps) * g_eps * g_eps
        beps *= lam_eps
        gp_eps_c = gp_eps / (1.0 - beps) if beps < 1.0 else gp_eps
        eps += mu_eps * g_eps / np.sqrt(gp_eps_c + reg)

        g_eta = (e.conjugate() * dd).real / (refdot_c + reg)
        gp_eta = lam_eta * gp_eta + (1.0 - lam_eta) * g_eta * g_eta
        beta_ *= lam_eta
        gp_eta_c = gp_eta / (1.0 - beta_) if beta_ < 1.0 else gp_eta
        eta += mu_eta * g_eta / np.sqrt(gp_eta_c + reg)

    return -1, eps, eta, phase, pos, err_p, in_p, gp_eps, gp_eta, refdot_p


def cancel(
    reference: ComplexSignal,
    desired: ComplexSignal,
    state: EstimatorState,
    cfg: CancellerConfig,
) -> tuple[ComplexSignal, ComplexSignal, EstimatorState]:
    """Run the estimator over one buffer.

    Returns (d_hat, e, state_out) with e = desired - d_hat sample by sample.
    The reference is the locally known transmitted waveform; both buffers
    must have equal length.  Raises :class:`CancellerDivergence` if any
    produced value goes non-finite.
    """
    if len(reference) != len(desired):
        raise SignalError("reference and desired must have equal length")
    if state.w_hat.size != cfg.n_taps:
        raise SignalError("state tap count does not match the configuration")
    n = len(desired)
    d_hat = np.zeros(n, dtype=np.complex128)
    err = np.zeros(n, dtype=np.complex128)
    w = state.w_hat.copy()
    sc = np.array([
        state.eps_hat, state.eta_hat, state.phase_acc, state.position_acc,
        state.err_power, state.in_power, state.grad_power_eps,
        state.grad_power_eta, state.refdot_power, float(state.n_seen),
    ], dtype=np.float64)
    bad, eps, eta, phase, pos, err_p, in_p, gp_eps, gp_eta, refdot_p = _run_loop(
        reference.samples, desired.samples, w, sc, d_hat, err,
        cfg.lambda_e, cfg.lambda_r, cfg.lambda_y, cfg.lambda_eps, cfg.lambda_eta,
        cfg.mu_w, cfg.mu_eps, cfg.mu_eta, cfg.noise_guess, cfg.regularizer,
    )
    if bad >= 0:
        raise CancellerDivergence(int(bad))
    state_out = EstimatorState(
        w_hat=w,
        eps_hat=float(eps),
        eta_hat=float(eta),
        phase_acc=float(phase),
        position_acc=float(pos),
        err_power=float(err_p),
        in_power=float(in_p),
        grad_power_eps=float(gp_eps),
        grad_power_eta=float(gp_eta),
        refdot_power=float(refdot_p),
        n_seen=state.n_seen + n,
    )
    rate = desired.sample_rate_hz
    return ComplexSignal(d_hat, rate), ComplexSignal(err, rate), state_out
