"""The four feedback controllers.

* PowerLoop     - integral control of a variable attenuator onto a monitor
                  photodiode, switchable between stage target powers.
* PhaseLoop     - beat-note demodulation fed back onto a fiber stretcher,
                  with automatic re-centering when the range is exhausted
                  and bookkeeping of the relock intervals this causes.
* optimize_polarization / random_walk_baseline
                - the dither-and-demodulate polarization optimizer (one
                  piezo at a time, cyclically) and the perturb-and-compare
                  baseline it replaces.
* CouplingLoop  - splitter-ratio stabilization by temperature, driven by
                  the averaged homodyne DC level with slew limiting and
                  sign-only anti-windup when the DC output clips.

Loop gains are per real second; loops called on the compressed clock
integrate with dt * compression.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsp import Integrator, LockInChain
from .plant import (
    PlantState,
    homodyne_beat_sample,
    homodyne_dc,
    opa_monitor_sample,
    wrap_phase,
)
from .polarization import PIEZO_COUNTS_MAX
from .streams import stream_through

TWO_PI = 2.0 * np.pi


# ------------------------------------------------------------------ power

@dataclass
class PowerLoopCfg:
    """Stage target powers (delivered W) and monitor/loop constants."""

    targets: dict
    loop_gain: float = 2.0            # 1/s, bandwidth of the log-domain integrator
    monitor_fraction: float = 0.1     # pick-off sent to the monitor pair
    pd_split_weak: float = 0.9        # share of the monitor light on the weak-signal PD
    pd_transimpedance: tuple = (1.0e6, 1.0e4)   # (weak, strong) ohm
    pd_saturation_v: float = 10.0
    weak_pd_threshold_w: float = 1.0e-5   # targets below this read the weak-signal PD

    def __post_init__(self):
        for name, p in self.targets.items():
            if p <= 0:
                raise ValueError(f"target {name} must be positive")


PROBE_POWER_STAGES = {"opa_align": 1.0e-6, "hd_align": 100.0e-6, "measure": 100.0e-9}
LO_POWER_STAGES = {"align": 100.0e-6, "measure": 16.0e-3}


class PowerLoop:
    """Variable-attenuator stabilization of one beam."""

    def __init__(self, cfg: PowerLoopCfg, plant: PlantState, beam: str):
        if beam not in ("probe", "lo"):
            raise ValueError(beam)
        self.cfg = cfg
        self.plant = plant
        self.beam = beam
        self.stage = next(iter(cfg.targets))
        self.saturated = False
        self._log_u = np.log(getattr(plant, f"voa_{beam}"))

    @property
    def target(self) -> float:
        return self.cfg.targets[self.stage]

    def set_stage(self, stage: str):
        if stage not in self.cfg.targets:
            raise KeyError(stage)
        self.stage = stage

    def measure(self) -> float:
        """Delivered-power estimate from the appropriate monitor PD."""
        mon = self.plant.monitor_power(self.beam)
        weak = self.target < self.cfg.weak_pd_threshold_w
        share = self.cfg.pd_split_weak if weak else (1.0 - self.cfg.pd_split_weak)
        z = self.cfg.pd_transimpedance[0 if weak else 1]
        v = min(mon * share * z, self.cfg.pd_saturation_v)
        pd_power = v / z
        main = self.plant.pickoff_main
        return pd_power / share / (1.0 - main) * main

    def step_measured(self, measured_w: float, dt: float) -> float:
        """Integral control in log space; returns the new transmission.

        The update is the exact discrete solution of the first-order loop,
        so it is stable at any tick size and settles with bandwidth
        `loop_gain` regardless of which decade the target sits in.
        """
        dt_real = dt * self.plant.compression
        err = np.log(max(measured_w, 1e-30) / self.target)
        self._log_u -= err * (1.0 - np.exp(-self.cfg.loop_gain * dt_real))
        self._log_u = min(self._log_u, 0.0)
        trans = np.exp(self._log_u)
        self.saturated = trans >= 1.0 - 1e-12 and err < 0.0
        setattr(self.plant, f"voa_{self.beam}", float(trans))
        return float(trans)

    def step(self, dt: float) -> float:
        env = getattr(self.plant, self.beam)
        if not env.shutter_open:
            return getattr(self.plant, f"voa_{self.beam}")
        return self.step_measured(self.measure(), dt)


# ------------------------------------------------------------------ phase

@dataclass
class PhaseLoopCfg:
    carrier_hz: float                 # 200 kHz homodyne, 400 kHz amplifier monitor
    actuator: str                     # "probe" or "lo" stretcher
    beat_phase_per_actuator_rad: float  # d(beat phase)/d(stretcher phase)
    lock_quadrature: float = 0.0
    loop_gain: float = 0.2            # 1/s closed-loop bandwidth
    ramp_gain_frac: float = 0.25      # second integrator: loop_gain^2 * frac
    demod_samples: int = 125          # integer carrier cycles at the sample rate
    sample_rate: float = 5.0e6
    amp_floor_v: float = 1.0e-7
    relock_threshold_rad: float = 0.1
    relock_confirm_ticks: int = 5
    reset_center_v: float = 35.0


def measure_beat_phase(plant: PlantState, carrier_hz: float, n: int, fs: float,
                       t0: float, kind: str):
    """IQ demodulation of one short waveform window: (phase, amplitude).

    `n` must span an integer number of carrier cycles so the doubled term
    averages out exactly.
    """
    t = t0 + np.arange(n) / fs
    ref = np.exp(-1j * TWO_PI * carrier_hz * t)
    if kind == "hd":
        v = homodyne_beat_sample(plant, t)
        z = 2.0 * np.mean(v * ref)
        # beat = B cos(carrier*t - dphi) -> z = B exp(-1j dphi)
        return float(-np.angle(z)), float(np.abs(z))
    v = opa_monitor_sample(plant, t)
    z = 2.0 * np.mean(v * ref)
    # beat = B sin(carrier*t + psi) -> z = B exp(1j psi) / 1j
    return float(wrap_phase(np.angle(z) + np.pi / 2.0)), float(np.abs(z))


class PhaseLoop:
    """One beat-note lock driving one fiber stretcher."""

    def __init__(self, cfg: PhaseLoopCfg, plant: PlantState):
        self.cfg = cfg
        self.plant = plant
        self.kind = "hd" if cfg.actuator == "lo" else "opa"
        self.stretcher = plant.stretcher_lo if cfg.actuator == "lo" else plant.stretcher_probe
        self.engaged = False
        self.no_carrier = False
        self.last_error = 0.0
        self.resets = 0
        self.relock_intervals: list = []   # (t_start, t_end) compressed seconds
        self._relocking_since = None
        self._good_ticks = 0
        self._t_fast = 0.0
        self._ramp_accum = 0.0   # second integrator: drives ramp error to zero

    # -- bookkeeping -------------------------------------------------------
    def engage(self):
        self.engaged = True
        self._ramp_accum = 0.0   # stale drift-rate estimates cause transients

    def release(self):
        self.engaged = False
        self._end_relock()

    def _begin_relock(self):
        if self._relocking_since is None:
            self._relocking_since = self.plant.time
            self._good_ticks = 0

    def _end_relock(self):
        if self._relocking_since is not None:
            self.relock_intervals.append((self._relocking_since, self.plant.time))
            self._relocking_since = None

    @property
    def relocking(self) -> bool:
        return self._relocking_since is not None

    def overlaps_relock(self, t0: float, t1: float) -> bool:
        for a, b in self.relock_intervals:
            if a < t1 and b > t0:
                return True
        if self._relocking_since is not None and self._relocking_since < t1:
            return True
        return False

    # -- control -----------------------------------------------------------
    def step(self, dt: float) -> float:
        """One control tick on the compressed clock; returns stretcher volts."""
        if not self.engaged:
            return self.stretcher.voltage
        cfg = self.cfg
        phase, amp = measure_beat_phase(
            self.plant, cfg.carrier_hz, cfg.demod_samples, cfg.sample_rate,
            self._t_fast, self.kind,
        )
        self._t_fast += cfg.demod_samples / cfg.sample_rate
        if amp < cfg.amp_floor_v:
            self.no_carrier = True
            return self.stretcher.voltage
        self.no_carrier = False
        err = float(wrap_phase(phase - cfg.lock_quadrature))
        self.last_error = err
        dt_real = dt * self.plant.compression
        k_phase = cfg.beat_phase_per_actuator_rad * self.stretcher.rad_per_volt
        # double integrator: the second stage estimates a drift ramp so the
        # lock tracks it with zero steady-state error
        g2 = cfg.ramp_gain_frac * cfg.loop_gain**2
        self._ramp_accum += g2 * err * dt_real
        dv = -(cfg.loop_gain * err + self._ramp_accum) * dt_real / k_phase
        v = self.stretcher.voltage + dv
        if not 0.0 <= v <= self.stretcher.max_voltage:
            v = cfg.reset_center_v
            self.resets += 1
            self._begin_relock()
        self.stretcher.voltage = float(v)
        if self._relocking_since is not None:
            if abs(err) < cfg.relock_threshold_rad:
                self._good_ticks += 1
                if self._good_ticks >= cfg.relock_confirm_ticks:
                    self._end_relock()
            else:
                self._good_ticks = 0
        return self.stretcher.voltage

    def quadrature_error(self) -> float:
        """Current measured-quadrature angle error contributed by this lock."""
        scale = 0.5 if self.kind == "opa" else 1.0
        return scale * self.last_error


# --------------------------------------------------------------- coupling

@dataclass
class CouplingLoopCfg:
    setpoint_v: float = 0.0
    gain_degc_per_v_s: float = 5.0e-3   # per real second
    slew_degc_per_s: float = 0.1        # per real second
    window_ticks: int = 5


class CouplingLoop:
    """Splitter-ratio lock: averaged homodyne DC fed back to the heater."""

    def __init__(self, cfg: CouplingLoopCfg, plant: PlantState):
        self.cfg = cfg
        self.plant = plant
        self.engaged = True
        self.saturated = False
        self._window: list = []
        self.last_dc = 0.0

    def step(self, dt: float) -> float:
        """Returns the temperature command (offset from ambient control)."""
        if not self.engaged or not self.plant.lo.shutter_open:
            return self.plant.peltier_offset
        s = homodyne_dc(self.plant)
        self.last_dc = s.volts
        self.saturated = s.saturated
        if s.saturated:
            # output railed: magnitude unknown, use sign only (anti-windup)
            err = np.sign(s.volts) * self.plant.hd_detector.saturation
            self._window.clear()
            self._window.append(err)
        else:
            self._window.append(s.volts - self.cfg.setpoint_v)
            if len(self._window) > self.cfg.window_ticks:
                self._window.pop(0)
        mean_dc = float(np.mean(self._window))
        dt_real = dt * self.plant.compression
        rate = -self.cfg.gain_degc_per_v_s * mean_dc
        rate = float(np.clip(rate, -self.cfg.slew_degc_per_s, self.cfg.slew_degc_per_s))
        self.plant.peltier_offset += rate * dt_real
        return self.plant.peltier_offset


# ----------------------------------------------------- polarization loops

@dataclass
class PolLoopCfg:
    mod_counts: float = 32.0
    cycles: int = 3
    threshold_angle_rad: float = 0.015   # residual sphere angle per axis
    bandwidth_hz: float = 1.0
    step_rate_hz: float = 30.0
    settle_s: float = 0.5
    read_s: float = 0.1
    subloop_max_s: float = 4.0
    calib_counts: int = 24


@dataclass
class PolResult:
    converged: bool
    final_beta: dict
    trace: list            # (t_fast, p1, p2, p3, active_piezo, beta)
    events: list           # (t_fast, piezo, "mod_on"/"mod_off")
    subloop_betas: list    # (piezo, beta_start, beta_end)


def _read_beta(source, chain, read_s: float) -> float:
    out = stream_through(source, chain, read_s)
    tail = out[len(out) // 2:]
    return float(np.mean(tail))


def _beta_slope(source, chain, cfg: PolLoopCfg, k: int):
    """Settled error per piezo count, measured by a +/- count excursion."""
    bank = source.bank
    d = cfg.calib_counts
    base = bank.values[k]
    bank.values[k] = base + d
    stream_through(source, chain, cfg.settle_s)
    b_plus = _read_beta(source, chain, cfg.read_s)
    bank.values[k] = base - d
    stream_through(source, chain, cfg.settle_s)
    b_minus = _read_beta(source, chain, cfg.read_s)
    bank.values[k] = base
    return (b_plus - b_minus) / (2.0 * d)


def optimize_polarization(cfg: PolLoopCfg, chain: LockInChain, source,
                          slopes: dict | None = None) -> PolResult:
    """Cyclic one-piezo-at-a-time dither optimization.

    For each piezo in turn: enable its modulation, wait for the chain to
    settle, integrate the settled error onto the piezo counts until the
    error drops below threshold, then freeze and move on.  Exactly one
    piezo is modulated at any moment.
    """
    bank = source.bank
    trace: list = []
    events: list = []
    subloop_betas: list = []
    final_beta: dict = {}
    slopes = slopes if slopes is not None else {}
    step_s = 1.0 / cfg.step_rate_hz
    converged = True

    # calibrate every axis first: the floor below needs the strongest slope
    # as its reference before any feedback runs
    for k in range(3):
        if k not in slopes:
            source.mod_piezo = k
            events.append((source.time_fast, k, "mod_on"))
            slopes[k] = _beta_slope(source, chain, cfg, k)
            source.mod_piezo = None
            events.append((source.time_fast, k, "mod_off"))

    for _cycle in range(cfg.cycles):
        for k in range(3):
            source.mod_piezo = k
            events.append((source.time_fast, k, "mod_on"))
            # a piezo whose axis passes through the current state has no
            # first-order authority; floor its slope so the gain stays sane
            # and the (equally vanishing) error still counts as converged
            slope_ref = max(abs(s) for s in slopes.values())
            slope = slopes[k]
            if abs(slope) < 0.02 * slope_ref:
                slope = np.copysign(0.02 * slope_ref, slope if slope != 0 else 1.0)
            thresh = abs(slope) * cfg.threshold_angle_rad / bank.radians_per_count(k)
            gain = TWO_PI * cfg.bandwidth_hz / slope
            integ = Integrator(gain=-gain, state=float(bank.values[k]))
            stream_through(source, chain, cfg.settle_s)
            beta = _read_beta(source, chain, cfg.read_s)
            beta_start = beta
            t_sub0 = source.time_fast
            while source.time_fast - t_sub0 < cfg.subloop_max_s:
                if abs(beta) < thresh:
                    break
                cmd = integ.step(beta, step_s)
                bank.values[k] = int(np.clip(round(cmd), 0, PIEZO_COUNTS_MAX))
                out = chain.feed(source.next_block(int(round(step_s * source.fs))))
                beta = float(np.mean(out[max(0, len(out) - max(1, len(out) // 3)):]))
                trace.append((source.time_fast, *bank.values, k, beta))
            else:
                converged = converged and abs(beta) < thresh
            integ.hold()
            final_beta[k] = beta
            subloop_betas.append((k, beta_start, beta))
            source.mod_piezo = None
            events.append((source.time_fast, k, "mod_off"))
    slope_ref = max(abs(s) for s in slopes.values())
    for k, b in final_beta.items():
        floored = max(abs(slopes[k]), 0.02 * slope_ref)
        if abs(b) >= floored * cfg.threshold_angle_rad / bank.radians_per_count(k):
            converged = False
    return PolResult(converged, final_beta, trace, events, subloop_betas)


def track_polarization(cfg: PolLoopCfg, chain: LockInChain, source, n_steps: int,
                       slopes: dict | None = None) -> np.ndarray:
    """Fixed-step-count dither control for method-comparison traces.

    Runs `n_steps` feedback steps at the step rate, cycling the modulated
    piezo so each of cfg.cycles * 3 segments gets an equal share; records
    the commanded digital values (modulation excluded) after every step.
    """
    bank = source.bank
    slopes = slopes if slopes is not None else {}
    step_s = 1.0 / cfg.step_rate_hz
    seg_len = max(1, n_steps // (3 * cfg.cycles))
    settle_steps = max(1, int(round(cfg.settle_s / step_s)))
    trace = np.zeros((n_steps, 3), dtype=int)

    for k in range(3):
        if k not in slopes:
            source.mod_piezo = k
            slopes[k] = _beta_slope(source, chain, cfg, k)
            source.mod_piezo = None

    slope_ref = max(abs(s) for s in slopes.values())
    integ = None
    active = -1
    in_segment = 0
    for step in range(n_steps):
        k = min((step // seg_len) % 3, 2)
        if k != active or integ is None:
            active = k
            in_segment = 0
            source.mod_piezo = k
            slope = slopes[k]
            if abs(slope) < 0.02 * slope_ref:
                slope = np.copysign(0.02 * slope_ref, slope if slope != 0 else 1.0)
            gain = TWO_PI * cfg.bandwidth_hz / slope
            integ = Integrator(gain=-gain, state=float(bank.values[k]))
        out = chain.feed(source.next_block(int(round(step_s * source.fs))))
        beta = float(np.mean(out[max(0, len(out) - max(1, len(out) // 3)):]))
        in_segment += 1
        if in_segment > settle_steps:
            cmd = integ.step(beta, step_s)
            bank.values[active] = int(np.clip(round(cmd), 0, PIEZO_COUNTS_MAX))
        trace[step] = bank.values
    source.mod_piezo = None
    return trace


@dataclass
class RandomWalkCfg:
    step_counts: int = 8
    rate_hz: float = 30.0


def random_walk_baseline(cfg: RandomWalkCfg, source, n_steps: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Perturb-and-compare baseline optimizer.

    Each step: measure the interference strength, nudge one random piezo
    by one step, re-measure, keep the move only if the strength increased.
    The strength metric is the mean squared detector signal over half a
    step window, so slow power fluctuations corrupt the comparison.
    """
    bank = source.bank
    window_n = max(1, int(round(source.fs / cfg.rate_hz / 2.0)))
    trace = np.zeros((n_steps, 3), dtype=int)

    def metric():
        v = source.next_block(window_n)
        return float(np.mean(v * v))

    for step in range(n_steps):
        before = metric()
        k = int(rng.integers(0, 3))
        sign = 1 if rng.random() < 0.5 else -1
        old = bank.values[k]
        bank.values[k] = int(np.clip(old + sign * cfg.step_counts, 0, PIEZO_COUNTS_MAX))
        after = metric()
        if after <= before:
            bank.values[k] = old
        trace[step] = bank.values
    return trace
