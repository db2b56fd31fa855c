"""Second-order IIR sections and the lock-in demodulation chain.

The controller's signal path is built entirely from order-2 IIR filters:
carrier band-pass, square-law envelope detection with low-pass and
downsampling, DC blocking, synchronous demodulation at the polarization
modulation frequency, second-harmonic rejection and output smoothing.

Designs use the bilinear transform with frequency prewarping; low/high-pass
sections are Butterworth (Q = 1/sqrt(2)), band-pass/reject are constant
peak-gain resonators, and the all-pass realizes a prescribed phase shift at
the demodulation frequency as a cascade of two identical first-order
sections folded into one biquad.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter
from scipy.optimize import brentq


class FilterDesignError(ValueError):
    pass


FILTER_KINDS = ("low-pass", "high-pass", "band-pass", "band-reject", "all-pass")

_DEFAULT_Q = {
    "low-pass": 1.0 / np.sqrt(2.0),
    "high-pass": 1.0 / np.sqrt(2.0),
    "band-pass": 10.0,
    "band-reject": 2.0,
}


@dataclass(frozen=True)
class FilterSpec:
    """Specification of one order-2 section.

    `corner_hz` is the -3 dB corner for low/high-pass and the center
    frequency for band-pass/reject and all-pass.  `phase_rad` is only used
    by the all-pass kind: the phase the section must realize at corner_hz.
    """

    kind: str
    corner_hz: float
    sample_rate: float
    q: float | None = None
    phase_rad: float = 0.0
    order: int = 2

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise FilterDesignError(f"unknown filter kind {self.kind!r}")
        if self.order != 2:
            raise FilterDesignError("only order-2 sections are supported")
        if not 0 < self.corner_hz < self.sample_rate / 2.0:
            raise FilterDesignError(
                f"corner {self.corner_hz} Hz must lie below Nyquist "
                f"({self.sample_rate / 2.0} Hz)"
            )


def _rbj(spec: FilterSpec):
    q = spec.q if spec.q is not None else _DEFAULT_Q.get(spec.kind, 1.0)
    k = np.tan(np.pi * spec.corner_hz / spec.sample_rate)
    norm = 1.0 / (1.0 + k / q + k * k)
    a = np.array([1.0, 2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm])
    if spec.kind == "low-pass":
        b = np.array([k * k, 2.0 * k * k, k * k]) * norm
    elif spec.kind == "high-pass":
        b = np.array([1.0, -2.0, 1.0]) * norm
    elif spec.kind == "band-pass":
        b = np.array([k / q, 0.0, -k / q]) * norm
    elif spec.kind == "band-reject":
        b = np.array([1.0 + k * k, 2.0 * (k * k - 1.0), 1.0 + k * k]) * norm
    else:  # pragma: no cover
        raise FilterDesignError(spec.kind)
    return b, a


def _first_order_allpass_phase(c: float, w: float) -> float:
    z = np.exp(-1j * w)
    h = (c + z) / (1.0 + c * z)
    return float(np.angle(h))


def _design_allpass(spec: FilterSpec):
    """Two identical first-order all-pass sections with total phase
    `spec.phase_rad` (mod 2*pi) at spec.corner_hz."""
    w = 2.0 * np.pi * spec.corner_hz / spec.sample_rate
    target = np.mod(spec.phase_rad, -2.0 * np.pi)  # into (-2*pi, 0]
    if target > -1e-12:
        return np.array([1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0])
    half = target / 2.0  # in (-pi, 0)
    lo, hi = -1.0 + 1e-9, 1.0 - 1e-9
    c = brentq(lambda c: _first_order_allpass_phase(c, w) - half, lo, hi, xtol=1e-14)
    b = np.array([c * c, 2.0 * c, 1.0])
    a = np.array([1.0, 2.0 * c, c * c])
    return b, a


def design_biquad(spec: FilterSpec):
    """Coefficients (b, a) for the section; poles checked for stability."""
    if spec.kind == "all-pass":
        b, a = _design_allpass(spec)
    else:
        b, a = _rbj(spec)
    poles = np.roots(a)
    if len(poles) and np.max(np.abs(poles)) >= 1.0 - 1e-6:
        raise FilterDesignError(f"unstable design for {spec}")
    return b, a


def biquad_response(b, a, freqs_hz, sample_rate):
    """Complex frequency response evaluated on the unit circle."""
    w = 2.0 * np.pi * np.asarray(freqs_hz, dtype=float) / sample_rate
    z = np.exp(-1j * w)
    num = b[0] + b[1] * z + b[2] * z * z
    den = a[0] + a[1] * z + a[2] * z * z
    return num / den


def biquad_impulse_closed_form(b, a, n: int):
    """Impulse response from the pole/residue expansion.

    Independent of the streaming recursion: h[k] is assembled from the two
    poles of 1/a(z) and the numerator delays, using exact partial fractions.
    """
    p = np.roots(a)
    if len(p) != 2 or abs(p[0] - p[1]) < 1e-12:
        # fall back to long division for degenerate designs
        h = np.zeros(n)
        x = np.zeros(n)
        x[0] = 1.0
        for k in range(n):
            acc = 0.0
            for i in range(3):
                if k - i >= 0:
                    acc += b[i] * x[k - i]
            for i in range(1, 3):
                if k - i >= 0:
                    acc -= a[i] * h[k - i]
            h[k] = acc
        return h
    k = np.arange(n)
    # 1/A(z) = sum_j r_j / (1 - p_j z^-1) with r_j = p_j / (p_j - p_other)
    r0 = p[0] / (p[0] - p[1])
    r1 = p[1] / (p[1] - p[0])
    base = r0 * p[0] ** k + r1 * p[1] ** k  # inverse of the denominator
    h = b[0] * base
    h[1:] += b[1] * base[:-1]
    h[2:] += b[2] * base[:-2]
    return h.real


class Biquad:
    """Streaming order-2 section (transposed direct form II)."""

    def __init__(self, spec: FilterSpec):
        self.spec = spec
        self.b, self.a = design_biquad(spec)
        self._z = np.zeros(2)

    def reset(self):
        self._z[:] = 0.0

    def step(self, x: float) -> float:
        b, a, z = self.b, self.a, self._z
        y = b[0] * x + z[0]
        z[0] = b[1] * x - a[1] * y + z[1]
        z[1] = b[2] * x - a[2] * y
        return y

    def process(self, x: np.ndarray) -> np.ndarray:
        y, self._z = lfilter(self.b, self.a, x, zi=self._z)
        return y


@dataclass
class Integrator:
    """Error-signal integrator with track-and-hold.

    While held the output is frozen at its last value regardless of input;
    this is how an actuator keeps its command when its loop disengages.
    """

    gain: float
    state: float = 0.0
    held: bool = False

    def step(self, err: float, dt: float) -> float:
        if dt <= 0:
            raise ValueError("dt must be positive")
        if not self.held:
            self.state += self.gain * err * dt
        return self.state

    def hold(self):
        self.held = True

    def release(self):
        self.held = False


class LockInChain:
    """Carrier band-pass, square-law detection and synchronous demodulation.

    Process 1 extracts the beat carrier; process 2 squares it, low-passes
    away the doubled carrier, downsamples and removes DC, leaving the
    envelope modulation; process 3 multiplies by the synchronized
    modulation-frequency reference (DC-blocked, phase-adjusted by an
    all-pass), rejects the second harmonic and smooths.  The settled output
    is proportional to the fractional envelope modulation depth.

    The reference and the plant modulation share one sample clock: feed
    every plant sample exactly once and phases stay aligned.

    `envelope_mode` builds only the demodulation half: the input is then an
    already-detected squared-envelope stream at `sample_rate`, entering at
    the DC-block.  Loops that do not need carrier fidelity use it to run at
    a far lower rate through identical demodulation code.
    """

    def __init__(
        self,
        carrier_hz: float = 200e3,
        sample_rate: float = 5e6,
        mod_freq_hz: float = 300.0,
        downsample: int = 16,
        carrier_q: float = 10.0,
        post_square_lpf_hz: float = 30e3,
        dc_block_hz: float = 10.0,
        reject_q: float = 2.0,
        output_lpf_hz: float = 10.0,
        allpass_phase: float = 0.0,
        envelope_mode: bool = False,
    ):
        self.carrier_hz = carrier_hz
        self.sample_rate = sample_rate
        self.mod_freq_hz = mod_freq_hz
        self.downsample = int(downsample)
        self.envelope_mode = envelope_mode
        self.allpass_phase = allpass_phase

        if envelope_mode:
            self.fs_demod = sample_rate
            self.bpf = None
            self.lpf_sq = None
        else:
            if sample_rate / self.downsample <= 2 * mod_freq_hz * 2:
                raise FilterDesignError("downsampled rate too low for demodulation")
            self.fs_demod = sample_rate / self.downsample
            self.bpf = Biquad(FilterSpec("band-pass", carrier_hz, sample_rate, q=carrier_q))
            self.lpf_sq = Biquad(FilterSpec("low-pass", post_square_lpf_hz, sample_rate))

        fsd = self.fs_demod
        self.hpf_dc = Biquad(FilterSpec("high-pass", dc_block_hz, fsd))
        self.hpf_ref = Biquad(FilterSpec("high-pass", dc_block_hz, fsd))
        self.allpass = Biquad(
            FilterSpec("all-pass", mod_freq_hz, fsd, phase_rad=allpass_phase)
        )
        self.notch2f = Biquad(
            FilterSpec("band-reject", 2.0 * mod_freq_hz, fsd, q=reject_q)
        )
        self.lpf_out = Biquad(FilterSpec("low-pass", output_lpf_hz, fsd))

        self._n_full = 0   # absolute full-rate sample counter
        self._n_demod = 0  # absolute demod-rate sample counter
        self.taps: dict = {}

    def set_allpass_phase(self, phase: float):
        """Retune the reference phase (resets only the all-pass state)."""
        self.allpass_phase = phase
        self.allpass = Biquad(
            FilterSpec("all-pass", self.mod_freq_hz, self.fs_demod, phase_rad=phase)
        )

    def reset(self):
        for f in (self.bpf, self.lpf_sq, self.hpf_dc, self.hpf_ref,
                  self.allpass, self.notch2f, self.lpf_out):
            if f is not None:
                f.reset()
        self._n_full = 0
        self._n_demod = 0

    def _tap(self, name, data):
        cb = self.taps.get(name)
        if cb is not None:
            cb(data)

    def process(self, x: np.ndarray) -> np.ndarray:
        """Full-rate input block -> settled-error stream at the demod rate."""
        if self.envelope_mode:
            raise RuntimeError("chain built in envelope mode; use process_envelope")
        y = self.bpf.process(np.asarray(x, dtype=float))
        self._tap("carrier", y)
        y = y * y
        y = self.lpf_sq.process(y)
        first = (-self._n_full) % self.downsample
        self._n_full += len(x)
        y = y[first::self.downsample]
        self._tap("envelope", y)
        return self._demodulate(y)

    def process_envelope(self, e: np.ndarray) -> np.ndarray:
        """Squared-envelope input block at the demod rate -> error stream."""
        if not self.envelope_mode:
            raise RuntimeError("chain not built in envelope mode")
        return self._demodulate(np.asarray(e, dtype=float))

    def feed(self, x: np.ndarray) -> np.ndarray:
        """Process a block from whichever input this chain was built for."""
        return self.process_envelope(x) if self.envelope_mode else self.process(x)

    def _demodulate(self, y: np.ndarray) -> np.ndarray:
        if len(y) == 0:
            return y
        n = np.arange(self._n_demod, self._n_demod + len(y))
        self._n_demod += len(y)
        t = n / self.fs_demod
        ref = np.sin(2.0 * np.pi * self.mod_freq_hz * t)
        ref = self.hpf_ref.process(ref)
        ref = self.allpass.process(ref)
        sig = self.hpf_dc.process(y)
        self._tap("dc_blocked", sig)
        m = sig * ref
        m = self.notch2f.process(m)
        out = self.lpf_out.process(m)
        self._tap("output", out)
        return out
