"""Discrete-time model of the optical system.

One PlantState owns every physical quantity that evolves in time: beam
powers and phases, polarization controllers and their slow perturbations,
the parametric amplifier's pump-dependent gain and thermal transient, the
homodyne splitter's temperature/polarization-dependent coupling ratio and
the two fiber stretchers.

Two clocks are involved.  Waveforms (beat notes, modulation) are sampled
in real seconds at fixed absolute frequencies.  Drifts and the schedule
run on a compressed clock: advancing the plant by dt compressed seconds
evolves every drift generator by dt * compression real seconds, so a full
day of slow dynamics fits into a desk-scale run while the fast physics
keeps its true frequencies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .polarization import (
    ControllerGeometry,
    JonesState,
    PiezoBank,
    apply_spinor,
    controller_transform,
    inner_product,
    mode_overlap,
    rotate_vector,
    rotation_spinor,
    stokes_from_jones,
)

TWO_PI = 2.0 * np.pi

# transimpedance-node headroom of the homodyne receiver: beyond this the
# front-end itself distorts and level measurements are no longer trusted
HD_NODE_HEADROOM_V = 1.0
# headroom of the AC beat output (before any post-amplification)
HD_BEAT_CLIP_V = 10.0


class PlantError(ValueError):
    pass


class StretcherRangeError(PlantError):
    """Commanded stretcher voltage left the actuator's range."""


def wrap_phase(phi):
    """Wrap to (-pi, pi]."""
    return -((-np.asarray(phi) + np.pi) % TWO_PI - np.pi)


@dataclass
class FieldEnvelope:
    """Baseband description of one beam at its source."""

    amplitude: float            # sqrt(W)
    freq_offset_hz: float = 0.0  # offset from the degenerate frequency
    phase: float = 0.0           # static phase offset, rad
    pol: JonesState = field(default_factory=lambda: JonesState(1.0, 0.0))
    shutter_open: bool = True

    @property
    def power(self) -> float:
        return self.amplitude**2

    @property
    def phase_wrapped(self) -> float:
        return float(wrap_phase(self.phase))


@dataclass
class OpaModel:
    """Phase-sensitive amplifier: squeeze parameter scales with sqrt(pump)."""

    gain_per_sqrt_w: float = 1.8935      # r = gain_per_sqrt_w * sqrt(P_pump)
    crystal_axis: JonesState = field(default_factory=lambda: JonesState(1.0, 0.0))
    insertion_loss: float = 0.10
    thermal_settle_tau_s: float = 3.0    # real seconds
    thermal_amplitude_rad: float = 2.0   # pump-on phase transient size

    def __post_init__(self):
        if self.gain_per_sqrt_w < 0 or not 0 <= self.insertion_loss < 1:
            raise PlantError("invalid OPA parameters")

    def squeeze_param(self, pump_power_w: float) -> float:
        return self.gain_per_sqrt_w * np.sqrt(max(0.0, pump_power_w))


@dataclass
class SplitterModel:
    """Fiber coupler with temperature- and polarization-dependent ratio."""

    nominal_ratio: float = 0.5
    temp_coeff: float = 0.0095        # ratio shift per degC
    pol_coeff: float = 0.029          # max shift vs input polarization
    temperature: float = 25.0
    reference_temp: float = 25.0
    axis_state: JonesState = field(default_factory=lambda: JonesState(1.0, 0.0))


def splitter_ratio(m: SplitterModel, j_in: JonesState) -> float:
    """Effective coupling ratio for the given input polarization."""
    g = 1.0 - mode_overlap(j_in, m.axis_state)
    r = m.nominal_ratio + m.temp_coeff * (m.temperature - m.reference_temp) + m.pol_coeff * g
    return float(np.clip(r, 0.0, 1.0))


@dataclass
class StretcherModel:
    """Piezo fiber stretcher: voltage -> optical phase, finite range."""

    voltage: float = 35.0
    range_wavelengths: float = 3.0
    max_voltage: float = 70.0
    rad_per_volt: float = field(default=None)  # derived unless given

    def __post_init__(self):
        if self.rad_per_volt is None:
            self.rad_per_volt = TWO_PI * self.range_wavelengths / self.max_voltage


def stretcher_apply(m: StretcherModel, voltage: float) -> float:
    """Phase produced at `voltage`; raises when the range is exhausted."""
    if not 0.0 <= voltage <= m.max_voltage:
        raise StretcherRangeError(
            f"stretcher voltage {voltage:.2f} V outside [0, {m.max_voltage}] V"
        )
    return voltage * m.rad_per_volt


@dataclass
class DetectorModel:
    """Photodetector with transimpedance stage and optional post-gain."""

    responsivity: float = 1.0       # A/W (effective)
    quantum_efficiency: float = 1.0
    transimpedance: float = 3030.0  # ohm
    post_gain: float = 15.0
    saturation: float = 1.0         # V, at the post-gain output
    noise_rms_v: float = 0.0

    def __post_init__(self):
        if not 0 < self.quantum_efficiency <= 1:
            raise PlantError("quantum_efficiency must be in (0, 1]")


@dataclass
class DcSample:
    volts: float
    saturated: bool


@dataclass
class DriftGen:
    """One slow perturbation: random walk, sinusoid or ramp.

    Rates are in real (physical) units per real second; `step(dt_real)`
    advances the process.  Zero rate/amplitude keeps the output at zero.
    """

    kind: str = "none"       # random-walk | sinusoid | ramp | none
    rate: float = 0.0        # random-walk: units/sqrt(s); ramp: units/s
    amplitude: float = 0.0   # sinusoid amplitude
    period_s: float = 1.0
    value: float = 0.0
    _sin_phase: float = 0.0
    _rng: np.random.Generator = None

    def step(self, dt_real: float):
        if self.kind == "random-walk":
            if self.rate != 0.0:
                self.value += self._rng.normal(0.0, self.rate * np.sqrt(dt_real))
        elif self.kind == "sinusoid":
            self._sin_phase += TWO_PI * dt_real / self.period_s
            self.value = self.amplitude * np.sin(self._sin_phase)
        elif self.kind == "ramp":
            self.value += self.rate * dt_real
        elif self.kind != "none":
            raise PlantError(f"unknown drift kind {self.kind!r}")
        return self.value


# generator names in spawn order (order is part of the deterministic contract)
DRIFT_CHANNELS = (
    "phase_pump",      # pump path phase, rad
    "phase_probe",     # probe path phase, rad
    "phase_lo",        # LO path phase, rad
    "pol_probe_s2",    # probe polarization rotation about s2, rad
    "pol_probe_s3",
    "pol_lo_s2",
    "pol_lo_s3",
    "pol_lo_creep",    # slow directional creep about s2, rad
    "power_probe",     # fractional source power
    "power_lo",
    "bs_temp",         # homodyne splitter ambient temperature, degC
)


@dataclass
class DriftSuite:
    """All slow perturbations, deterministically seeded per channel."""

    generators: dict
    seed: int

    @classmethod
    def from_config(cls, seed, channels: dict) -> "DriftSuite":
        """`channels` maps channel name -> DriftGen (without rng)."""
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        children = ss.spawn(len(DRIFT_CHANNELS))
        gens = {}
        for name, child in zip(DRIFT_CHANNELS, children):
            gen = channels.get(name, DriftGen())
            gen._rng = np.random.Generator(np.random.PCG64(child))
            gens[name] = gen
        return cls(generators=gens, seed=seed)

    def step(self, dt_real: float):
        for gen in self.generators.values():
            gen.step(dt_real)

    def value(self, name: str) -> float:
        return self.generators[name].value


@dataclass
class PolarizationPath:
    """Source polarization, piezo controller and slow perturbation of one beam.

    `static_axis`/`static_angle` describe the fixed birefringent rotation of
    the fiber between the controller and the point of use; it decouples the
    operating point from the controller's own axes, as in any real path.
    """

    geometry: ControllerGeometry
    bank: PiezoBank
    source_pol: JonesState
    static_axis: tuple = (0.0, 0.0, 1.0)
    static_angle: float = 0.0

    def delivered(self, rot_s2: float, rot_s3: float,
                  bank: PiezoBank | None = None) -> JonesState:
        j = controller_transform(self.geometry, bank or self.bank, self.source_pol)
        if self.static_angle != 0.0:
            j = apply_spinor(rotation_spinor(self.static_axis, self.static_angle), j)
        if rot_s2 != 0.0:
            j = apply_spinor(rotation_spinor((0.0, 1.0, 0.0), rot_s2), j)
        if rot_s3 != 0.0:
            j = apply_spinor(rotation_spinor((0.0, 0.0, 1.0), rot_s3), j)
        return j

    def effective_axis(self, k: int, rot_s2: float, rot_s3: float,
                       bank: PiezoBank | None = None) -> np.ndarray:
        """Rotation axis of piezo k as seen at the path output.

        Moving only piezo k is a rotation about its geometric axis
        conjugated by everything downstream: the later piezos, the static
        fiber rotation and the slow path perturbation.
        """
        bank = bank or self.bank
        ax = np.asarray(self.geometry.axes[k], dtype=float)
        for i in range(k + 1, 3):
            ax = rotate_vector(ax, self.geometry.axes[i], bank.angle(i))
        if self.static_angle != 0.0:
            ax = rotate_vector(ax, self.static_axis, self.static_angle)
        if rot_s2 != 0.0:
            ax = rotate_vector(ax, (0.0, 1.0, 0.0), rot_s2)
        if rot_s3 != 0.0:
            ax = rotate_vector(ax, (0.0, 0.0, 1.0), rot_s3)
        return ax


def aligned_path(geometry: ControllerGeometry, target: JonesState,
                 bank: PiezoBank | None = None,
                 static_axis=(0.0, 0.0, 1.0), static_angle: float = 0.0) -> PolarizationPath:
    """Path whose centered piezo bank delivers exactly `target`.

    Models a hand-aligned starting condition: the source polarization is the
    inverse image of the target through the centered controller and the
    static fiber rotation.
    """
    bank = bank or PiezoBank()
    u = np.eye(2, dtype=complex)
    for k in range(3):
        u = rotation_spinor(geometry.axes[k], bank.angle(k)) @ u
    u = rotation_spinor(static_axis, static_angle) @ u
    src = np.conj(u.T) @ target.as_array()
    return PolarizationPath(geometry, bank, JonesState(src[0], src[1]),
                            static_axis=tuple(static_axis), static_angle=static_angle)


@dataclass
class PlantState:
    """Every drifting quantity of the optical bench, advanced per tick."""

    probe: FieldEnvelope
    lo: FieldEnvelope
    pump: FieldEnvelope
    opa: OpaModel
    bs_hd: SplitterModel
    bs2_tap: float
    stretcher_probe: StretcherModel
    stretcher_lo: StretcherModel
    hd_detector: DetectorModel
    monitor_detector: DetectorModel   # OPA beat pick-off receiver
    probe_path: PolarizationPath
    lo_path: PolarizationPath
    drifts: DriftSuite
    compression: float = 3600.0
    post_opa_loss: float = 0.1783     # remaining chain loss after the OPA
    pickoff_main: float = 0.9         # power-monitor tap keeps 90% in the beam
    voa_probe: float = 1.0            # attenuator transmissions (power loops)
    voa_lo: float = 1.0
    peltier_offset: float = 0.0       # coupling-lock temperature command
    time: float = 0.0                 # compressed seconds
    _pump_open_time: float = None

    def __post_init__(self):
        self._pol_cache = {}

    # ------------------------------------------------------------------ time
    def drift_step(self, dt: float) -> "PlantState":
        """Advance all drift generators by dt compressed seconds."""
        if dt <= 0:
            raise PlantError("dt must be positive")
        self.drifts.step(dt * self.compression)
        self.time += dt
        self.bs_hd.temperature = (
            self.bs_hd.reference_temp
            + self.drifts.value("bs_temp")
            + self.peltier_offset
        )
        return self

    @property
    def time_real(self) -> float:
        return self.time * self.compression

    # -------------------------------------------------------------- shutters
    def set_shutter(self, beam: str, is_open: bool):
        env = getattr(self, beam)
        if beam == "pump" and is_open and not env.shutter_open:
            self._pump_open_time = self.time
        env.shutter_open = is_open

    # ---------------------------------------------------------------- powers
    def probe_power(self) -> float:
        if not self.probe.shutter_open:
            return 0.0
        d = 1.0 + self.drifts.value("power_probe")
        return self.probe.power * d * self.voa_probe * self.pickoff_main

    def lo_power(self) -> float:
        if not self.lo.shutter_open:
            return 0.0
        d = 1.0 + self.drifts.value("power_lo")
        return self.lo.power * d * self.voa_lo * self.pickoff_main

    def pump_power(self) -> float:
        return self.pump.power if self.pump.shutter_open else 0.0

    def monitor_power(self, beam: str) -> float:
        """Power on the stabilization monitor tap (10% pick-off)."""
        if beam == "probe":
            if not self.probe.shutter_open:
                return 0.0
            d = 1.0 + self.drifts.value("power_probe")
            return self.probe.power * d * self.voa_probe * (1.0 - self.pickoff_main)
        if beam == "lo":
            if not self.lo.shutter_open:
                return 0.0
            d = 1.0 + self.drifts.value("power_lo")
            return self.lo.power * d * self.voa_lo * (1.0 - self.pickoff_main)
        raise PlantError(beam)

    def squeeze_param(self) -> float:
        return self.opa.squeeze_param(self.pump_power())

    # ---------------------------------------------------------------- phases
    def thermal_phase(self) -> float:
        """Pump-path transient after the pump shutter opens (compressed tau)."""
        if self._pump_open_time is None or not self.pump.shutter_open:
            return 0.0
        tau_c = self.opa.thermal_settle_tau_s / self.compression
        dt = self.time - self._pump_open_time
        return self.opa.thermal_amplitude_rad * np.exp(-dt / tau_c)

    def probe_path_phase(self) -> float:
        return self.drifts.value("phase_probe") + stretcher_apply(
            self.stretcher_probe, self.stretcher_probe.voltage
        )

    def lo_path_phase(self) -> float:
        return self.drifts.value("phase_lo") + stretcher_apply(
            self.stretcher_lo, self.stretcher_lo.voltage
        )

    def pump_path_phase(self) -> float:
        return self.drifts.value("phase_pump") + self.thermal_phase()

    def opa_beat_phase(self) -> float:
        """Phase of the doubled-offset beat on the OPA monitor."""
        return self.pump_path_phase() - 2.0 * self.probe_path_phase()

    def homodyne_phase(self) -> float:
        """Relative probe-LO phase at the homodyne splitter."""
        return self.probe_path_phase() - self.lo_path_phase() + self.probe.phase - self.lo.phase

    # ----------------------------------------------------------- polarization
    def probe_pol(self, bank: PiezoBank | None = None) -> JonesState:
        key = ("probe", self.time, tuple((bank or self.probe_path.bank).values))
        if self._pol_cache.get("probe_key") != key:
            self._pol_cache["probe_key"] = key
            self._pol_cache["probe"] = self.probe_path.delivered(
                self.drifts.value("pol_probe_s2"), self.drifts.value("pol_probe_s3"),
                bank,
            )
        return self._pol_cache["probe"]

    def lo_pol(self, bank: PiezoBank | None = None) -> JonesState:
        key = ("lo", self.time, tuple((bank or self.lo_path.bank).values))
        if self._pol_cache.get("lo_key") != key:
            self._pol_cache["lo_key"] = key
            self._pol_cache["lo"] = self.lo_path.delivered(
                self.drifts.value("pol_lo_s2") + self.drifts.value("pol_lo_creep"),
                self.drifts.value("pol_lo_s3"),
                bank,
            )
        return self._pol_cache["lo"]

    def probe_mod_axis(self, k: int = 1, bank: PiezoBank | None = None) -> np.ndarray:
        return self.probe_path.effective_axis(
            k, self.drifts.value("pol_probe_s2"), self.drifts.value("pol_probe_s3"), bank
        )

    def lo_mod_axis(self, k: int = 1, bank: PiezoBank | None = None) -> np.ndarray:
        return self.lo_path.effective_axis(
            k,
            self.drifts.value("pol_lo_s2") + self.drifts.value("pol_lo_creep"),
            self.drifts.value("pol_lo_s3"),
            bank,
        )

    def chain_loss(self) -> float:
        return 1.0 - (1.0 - self.opa.insertion_loss) * (1.0 - self.post_opa_loss)

    def effective_loss(self) -> float:
        """Total equivalent loss: fixed chain loss plus polarization mismatch
        between the squeezed mode (crystal axis) and the local oscillator."""
        ov = mode_overlap(self.opa.crystal_axis, self.lo_pol())
        return 1.0 - (1.0 - self.chain_loss()) * ov


# ------------------------------------------------------------- waveform taps

def _modulated_overlap_coeffs(j_ref: JonesState, j_mod: JonesState, axis):
    """Coefficients (ca, cb) with <U(phi) j_mod, j_ref> = ca cos(phi/2) + cb sin(phi/2)."""
    g = rotation_spinor(axis, np.pi)  # equals -1j * (n . G)
    j = j_mod.as_array()
    ca = np.conj(j) @ j_ref.as_array()
    cb = np.conj(g @ j) @ j_ref.as_array()
    return complex(ca), complex(cb)


def homodyne_beat_sample(
    state: PlantState,
    t,
    mod_depth_rad: float = 0.0,
    mod_freq_hz: float = 300.0,
    mod_axis=None,
    lo_bank: PiezoBank | None = None,
    rng: np.random.Generator = None,
    power_scale=(1.0, 1.0),
):
    """Balanced-receiver beat waveform (volts) at times `t` (real seconds).

    The LO polarization is wobbled on the sphere by 2*mod_depth_rad about
    `mod_axis` at the modulation frequency.  Returns the photocurrent
    difference scaled by responsivity and transimpedance (the AC error-path
    gain; the post-amplifier only serves the DC output).
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if not (state.probe.shutter_open and state.lo.shutter_open):
        return np.zeros_like(t)
    p1 = state.probe_power() * power_scale[0]
    p2 = state.lo_power() * power_scale[1]
    j1 = state.probe_pol()
    j2 = state.lo_pol(lo_bank)
    if mod_depth_rad == 0.0:
        c = inner_product(j2, j1)
    else:
        if mod_axis is None:
            mod_axis = state.lo_mod_axis(1, lo_bank)
        phi = 2.0 * mod_depth_rad * np.sin(TWO_PI * mod_freq_hz * t)
        ca, cb = _modulated_overlap_coeffs(j1, j2, mod_axis)
        c = ca * np.cos(phi / 2.0) + cb * np.sin(phi / 2.0)
    dw = TWO_PI * state.probe.freq_offset_hz
    carrier = np.exp(1j * (state.homodyne_phase() - dw * t))
    det = state.hd_detector
    v = 2.0 * np.sqrt(p1 * p2) * (c * carrier).real
    v = v * det.responsivity * det.transimpedance
    if rng is not None and det.noise_rms_v > 0.0:
        v = v + rng.normal(0.0, det.noise_rms_v, size=v.shape)
    return np.clip(v, -HD_BEAT_CLIP_V, HD_BEAT_CLIP_V)


def opa_monitor_sample(
    state: PlantState,
    t,
    mod_depth_rad: float = 0.0,
    mod_freq_hz: float = 300.0,
    mod_axis=None,
    probe_bank: PiezoBank | None = None,
    rng: np.random.Generator = None,
    power_scale=(1.0, 1.0),
):
    """Pick-off monitor waveform (volts) behind the amplifier, at times `t`.

    The probe's crystal-axis component sees phase-sensitive gain, producing
    a beat at twice the probe frequency offset whose envelope carries the
    polarization modulation.  Shutters closed -> dark level (0 V).
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if not (state.probe.shutter_open and state.pump.shutter_open):
        return np.zeros_like(t)
    p0 = state.probe_power() * power_scale[0]
    j0 = state.probe_pol(probe_bank)
    if mod_depth_rad == 0.0:
        p_axis = abs(inner_product(j0, state.opa.crystal_axis)) ** 2
    else:
        if mod_axis is None:
            mod_axis = state.probe_mod_axis(1, probe_bank)
        phi = 2.0 * mod_depth_rad * np.sin(TWO_PI * mod_freq_hz * t)
        ca, cb = _modulated_overlap_coeffs(state.opa.crystal_axis, j0, mod_axis)
        cx = ca * np.cos(phi / 2.0) + cb * np.sin(phi / 2.0)
        p_axis = np.abs(cx) ** 2
    r = state.squeeze_param()
    dw2 = 2.0 * TWO_PI * state.probe.freq_offset_hz
    beat = np.sin(dw2 * t + state.opa_beat_phase())
    intensity = p_axis * (np.cosh(2 * r) + np.sinh(2 * r) * beat) + (1.0 - p_axis)
    det = state.monitor_detector
    v = p0 * state.bs2_tap * intensity * det.responsivity * det.transimpedance * det.post_gain
    if rng is not None and det.noise_rms_v > 0.0:
        v = v + rng.normal(0.0, det.noise_rms_v, size=v.shape)
    return np.clip(v, -det.saturation, det.saturation)


def squared_envelope_sample(
    state: PlantState,
    t,
    target: str,
    mod_depth_rad: float = 0.0,
    mod_freq_hz: float = 300.0,
    mod_axis=None,
    power_scale=(1.0, 1.0),
):
    """Beat envelope squared, i.e. the ideal square-law detector output.

    Identical physics to the full-rate waveforms after carrier filtering,
    squaring and smoothing: for the homodyne beat this is amp^2 |c|^2 / 2
    with amp = 2 sqrt(P1 P2) R Z; for the amplifier monitor the doubled
    beat's envelope squared over two.  Valid at any sample rate above the
    modulation band.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if target == "hd":
        if not (state.probe.shutter_open and state.lo.shutter_open):
            return np.zeros_like(t)
        p1 = state.probe_power() * power_scale[0]
        p2 = state.lo_power() * power_scale[1]
        j1 = state.probe_pol()
        j2 = state.lo_pol()
        if mod_axis is None:
            mod_axis = state.lo_mod_axis(1)
        phi = 2.0 * mod_depth_rad * np.sin(TWO_PI * mod_freq_hz * t)
        ca, cb = _modulated_overlap_coeffs(j1, j2, mod_axis)
        c = ca * np.cos(phi / 2.0) + cb * np.sin(phi / 2.0)
        det = state.hd_detector
        amp = 2.0 * np.sqrt(p1 * p2) * det.responsivity * det.transimpedance
        return 0.5 * amp**2 * np.abs(c) ** 2
    if target == "opa":
        if not (state.probe.shutter_open and state.pump.shutter_open):
            return np.zeros_like(t)
        p0 = state.probe_power() * power_scale[0]
        j0 = state.probe_pol()
        if mod_axis is None:
            mod_axis = state.probe_mod_axis(1)
        phi = 2.0 * mod_depth_rad * np.sin(TWO_PI * mod_freq_hz * t)
        ca, cb = _modulated_overlap_coeffs(state.opa.crystal_axis, j0, mod_axis)
        cx = ca * np.cos(phi / 2.0) + cb * np.sin(phi / 2.0)
        p_axis = np.abs(cx) ** 2
        r = state.squeeze_param()
        det = state.monitor_detector
        amp = (p0 * state.bs2_tap * np.sinh(2 * r) * p_axis
               * det.responsivity * det.transimpedance * det.post_gain)
        return 0.5 * amp**2
    raise PlantError(target)


def homodyne_dc(state: PlantState) -> DcSample:
    """DC output of the balanced receiver: the coupling-ratio error signal."""
    if not state.lo.shutter_open:
        return DcSample(0.0, False)
    ratio = splitter_ratio(state.bs_hd, state.lo_pol())
    p_in = state.lo_power() + state.probe_power()
    det = state.hd_detector
    v = (2.0 * ratio - 1.0) * p_in * det.responsivity * det.transimpedance * det.post_gain
    sat = abs(v) > det.saturation
    return DcSample(float(np.clip(v, -det.saturation, det.saturation)), bool(sat))


def hd_node_level(state: PlantState) -> float:
    """Magnitude at the receiver's transimpedance node (DC imbalance + beat).

    Used to decide whether a measurement was physically corrupted: beyond
    the node headroom the front end distorts regardless of the DC clipping
    applied to the error output.
    """
    if not state.lo.shutter_open:
        return 0.0
    ratio = splitter_ratio(state.bs_hd, state.lo_pol())
    p_in = state.lo_power() + state.probe_power()
    det = state.hd_detector
    dc = abs(2.0 * ratio - 1.0) * p_in * det.responsivity * det.transimpedance
    beat = 0.0
    if state.probe.shutter_open:
        beat = (
            2.0
            * np.sqrt(state.probe_power() * state.lo_power())
            * det.responsivity
            * det.transimpedance
        )
    return float(dc + beat)


def quadrature_variance(r: float, l_eff: float, lock_angle: float,
                        phase_jitter_rms: float = 0.0) -> float:
    """Measured quadrature variance in shot-noise units.

    Pure squeezing with loss l_eff, observed at `lock_angle` from the
    squeezed quadrature with Gaussian phase jitter of the given rms.
    r = 0 returns exactly 1 (vacuum) for any loss and angle.
    """
    if r < 0 or not 0.0 <= l_eff <= 1.0:
        raise PlantError("need r >= 0 and loss in [0, 1]")
    damp = np.exp(-2.0 * phase_jitter_rms**2)
    v = np.cosh(2.0 * r) - np.sinh(2.0 * r) * damp * np.cos(2.0 * lock_angle)
    return float(l_eff + (1.0 - l_eff) * v)
