"""Block streaming between the plant and the lock-in chain.

A source synthesizes contiguous detector-waveform blocks on the fast
(real-second) clock while advancing the plant's slow drift by the
corresponding compressed time, so filters see one continuous stream and
the physics stays consistent across clocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import LockInChain
from .plant import (
    PlantState,
    homodyne_beat_sample,
    opa_monitor_sample,
    squared_envelope_sample,
)


class OUNoise:
    """Stationary Ornstein-Uhlenbeck process (rms `sigma`, correlation `tau_s`).

    Models residual multiplicative power noise left by the upstream
    stabilization: slow enough to corrupt step-to-step amplitude
    comparisons, spectrally negligible at the modulation frequency.
    """

    def __init__(self, sigma: float, tau_s: float, rng: np.random.Generator):
        self.sigma = sigma
        self.tau_s = tau_s
        self.rng = rng
        self.value = 0.0 if sigma == 0.0 else float(rng.normal(0.0, sigma))

    def step(self, dt: float) -> float:
        if self.sigma == 0.0:
            return 0.0
        a = np.exp(-dt / self.tau_s)
        self.value = a * self.value + self.sigma * np.sqrt(1.0 - a * a) * self.rng.normal()
        return self.value


@dataclass
class BeatSource:
    """Streams one interference monitor at the full sample rate.

    target "hd": balanced homodyne beat (probe x LO), modulation on the LO
    controller.  target "opa": amplifier pick-off beat, modulation on the
    probe controller.  `mod_piezo` selects which piezo carries the
    modulation (None = modulation off); drift advances per block.
    """

    plant: PlantState
    target: str = "hd"
    fs: float = 5e6
    mod_counts: float = 32.0
    mod_freq_hz: float = 300.0
    mod_piezo: int | None = None
    probe_noise: OUNoise | None = None
    lo_noise: OUNoise | None = None
    detector_rng: np.random.Generator | None = None

    def __post_init__(self):
        if self.target not in ("hd", "opa"):
            raise ValueError(self.target)
        self._n = 0

    @property
    def controller_path(self):
        return self.plant.lo_path if self.target == "hd" else self.plant.probe_path

    @property
    def bank(self):
        return self.controller_path.bank

    @property
    def time_fast(self) -> float:
        return self._n / self.fs

    def next_block(self, n: int) -> np.ndarray:
        t = (self._n + np.arange(n)) / self.fs
        self._n += n
        dt_fast = n / self.fs
        self.plant.drift_step(dt_fast / self.plant.compression)

        scale_probe = 1.0
        scale_lo = 1.0
        if self.probe_noise is not None:
            scale_probe = 1.0 + self.probe_noise.step(dt_fast)
        if self.lo_noise is not None:
            scale_lo = 1.0 + self.lo_noise.step(dt_fast)

        mod_depth = 0.0
        mod_axis = None
        if self.mod_piezo is not None:
            k = self.mod_piezo
            bank = self.bank
            # counts wobble -> sphere angle amplitude; Jones amplitude is half
            mod_depth = 0.5 * self.mod_counts * bank.radians_per_count(k)
            if self.target == "hd":
                mod_axis = self.plant.lo_mod_axis(k)
            else:
                mod_axis = self.plant.probe_mod_axis(k)

        if self.target == "hd":
            return homodyne_beat_sample(
                self.plant, t,
                mod_depth_rad=mod_depth, mod_freq_hz=self.mod_freq_hz,
                mod_axis=mod_axis, rng=self.detector_rng,
                power_scale=(scale_probe, scale_lo),
            )
        return opa_monitor_sample(
            self.plant, t,
            mod_depth_rad=mod_depth, mod_freq_hz=self.mod_freq_hz,
            mod_axis=mod_axis, rng=self.detector_rng,
            power_scale=(scale_probe, scale_lo),
        )


@dataclass
class EnvelopeSource:
    """Streams the already-detected squared-envelope signal at a low rate.

    Equivalent to the full-rate source after carrier band-pass, squaring
    and smoothing; alignment loops that only need the modulation-frequency
    content run through identical demodulation code at a fraction of the
    cost.  Scale matches the full chain's post-square stage (amp^2 / 2).
    """

    plant: PlantState
    target: str = "hd"
    fs: float = 4800.0
    mod_counts: float = 32.0
    mod_freq_hz: float = 300.0
    mod_piezo: int | None = None
    probe_noise: OUNoise | None = None
    lo_noise: OUNoise | None = None

    def __post_init__(self):
        if self.target not in ("hd", "opa"):
            raise ValueError(self.target)
        self._n = 0

    @property
    def controller_path(self):
        return self.plant.lo_path if self.target == "hd" else self.plant.probe_path

    @property
    def bank(self):
        return self.controller_path.bank

    @property
    def time_fast(self) -> float:
        return self._n / self.fs

    def next_block(self, n: int) -> np.ndarray:
        t = (self._n + np.arange(n)) / self.fs
        self._n += n
        dt_fast = n / self.fs
        self.plant.drift_step(dt_fast / self.plant.compression)
        scale_probe = 1.0 + (self.probe_noise.step(dt_fast) if self.probe_noise else 0.0)
        scale_lo = 1.0 + (self.lo_noise.step(dt_fast) if self.lo_noise else 0.0)
        mod_depth = 0.0
        mod_axis = None
        if self.mod_piezo is not None:
            k = self.mod_piezo
            mod_depth = 0.5 * self.mod_counts * self.bank.radians_per_count(k)
            mod_axis = (self.plant.lo_mod_axis(k) if self.target == "hd"
                        else self.plant.probe_mod_axis(k))
        return squared_envelope_sample(
            self.plant, t, self.target,
            mod_depth_rad=mod_depth, mod_freq_hz=self.mod_freq_hz,
            mod_axis=mod_axis, power_scale=(scale_probe, scale_lo),
        )


def stream_through(source, chain: LockInChain, duration_s: float,
                   block_s: float = 0.05) -> np.ndarray:
    """Push `duration_s` of waveform through the chain, return the output."""
    n_total = int(round(duration_s * source.fs))
    n_block = max(1, int(round(block_s * source.fs)))
    outs = []
    done = 0
    while done < n_total:
        n = min(n_block, n_total - done)
        outs.append(chain.feed(source.next_block(n)))
        done += n
    return np.concatenate(outs) if outs else np.array([])


def settled_error(source, chain: LockInChain, settle_s: float = 0.5,
                  read_s: float = 0.1) -> float:
    """Stream until the output chain settles, then average the error value."""
    stream_through(source, chain, settle_s)
    out = stream_through(source, chain, read_s)
    return float(np.mean(out))


def calibrate_allpass_phase(make_source, make_chain, settle_s: float = 0.5,
                            read_s: float = 0.1) -> float:
    """Reference-phase calibration by quadrature measurement.

    Runs the chain once in-phase and once in quadrature over identical
    deterministic streams with a known injected mismatch and returns the
    all-pass phase that maximizes the in-phase error output.
    """
    b_i = settled_error(make_source(), make_chain(0.0), settle_s, read_s)
    b_q = settled_error(make_source(), make_chain(-np.pi / 2.0), settle_s, read_s)
    return float(np.arctan2(-b_q, b_i))
