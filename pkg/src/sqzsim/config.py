"""Run configuration: flat key=value parameter space and plant assembly.

Every documented parameter has a dotted key in DEFAULTS.  Overrides arrive
either from a config file (one key=value per line, '#' comments) or from
`--set key=value` arguments; unknown keys are rejected before any
simulation starts.

Units: frequencies and waveform times are real (physical) seconds/hertz;
drift rates and loop gains are per real second; scheduler periods are real
seconds that the compression factor shrinks at runtime; keys with `_tick`
in the name are compressed-clock step sizes, calibrated for the default
3600x compression.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .dsp import LockInChain
from .plant import (
    DetectorModel,
    DriftGen,
    DriftSuite,
    FieldEnvelope,
    OpaModel,
    PlantState,
    SplitterModel,
    StretcherModel,
    aligned_path,
)
from .polarization import ControllerGeometry, JonesState, PiezoBank


class ConfigError(ValueError):
    pass


DEFAULTS = {
    # ---------------------------------------------------------------- plant
    "plant.compression": 3600.0,
    "plant.probe.source_power_w": 1.0e-3,
    "plant.lo.source_power_w": 25.0e-3,
    "plant.pump.power_w": 0.3,
    "plant.probe.freq_offset_hz": 200.0e3,
    "plant.opa.gain_per_sqrt_w": 1.8936,
    "plant.opa.insertion_loss": 0.10,
    "plant.opa.thermal_tau_s": 3.0,
    "plant.opa.thermal_amplitude_rad": 2.0,
    "plant.post_opa_loss": 0.18622,
    "plant.bs2_tap": 0.005,
    "plant.bs_hd.nominal_ratio": 0.5,
    "plant.bs_hd.temp_coeff": 0.0095,
    "plant.bs_hd.pol_coeff": 0.029,
    "plant.hd.transimpedance": 3030.0,
    "plant.hd.post_gain": 15.0,
    "plant.hd.saturation_v": 1.0,
    "plant.hd.noise_rms_v": 0.0,
    "plant.pd5.transimpedance": 1.0e5,
    "plant.pd5.post_gain": 10.0,
    "plant.pd5.saturation_v": 10.0,
    "plant.pd5.noise_rms_v": 0.0,
    "plant.stretcher.range_wavelengths": 3.0,
    "plant.stretcher.max_voltage": 70.0,
    "plant.piezo.rad_per_volt": 0.045,
    # ---------------------------------------------------------------- drift
    # rates per sqrt(real second) for random walks, per real second for
    # ramps; sinusoid amplitudes are fractional (power) or degC (bs_temp)
    "drift.phase_pump.rate": 0.02,
    "drift.phase_probe.rate": 0.004,
    "drift.phase_lo.rate": 0.004,
    "drift.phase_probe.kind": "random-walk",
    "drift.pol_probe.rate": 0.0025,
    "drift.pol_lo.rate": 0.0025,
    "drift.pol_lo_creep.rate": 1.16e-5,
    "drift.power.amplitude": 0.01,
    "drift.power.period_s": 3600.0,
    "drift.bs_temp.amplitude": 0.5,
    "drift.bs_temp.period_s": 3600.0,
    # ------------------------------------------------------------------ dsp
    "dsp.sample_rate": 5.0e6,
    "dsp.downsample": 16,
    "dsp.carrier_q": 10.0,
    "dsp.reject_q": 2.0,
    "dsp.mod_freq_hz": 300.0,
    "dsp.envelope_rate": 4800.0,
    # ---------------------------------------------------------------- loops
    "loops.phase_opa.gain": 2.1,
    "loops.phase_hd.gain": 2.1,
    "loops.phase.relock_threshold_rad": 0.1,
    "loops.phase.relock_confirm_ticks": 5,
    # must span integer carrier cycles at both 200 and 400 kHz
    "loops.phase.demod_samples": 125,
    "loops.power.gain": 2.0,
    "loops.coupling.gain_degc_per_v_s": 5.0e-3,
    "loops.coupling.slew_degc_per_s": 0.1,
    "loops.coupling.window_ticks": 5,
    "loops.pol.mod_counts": 32,
    "loops.pol.cycles": 3,
    "loops.pol.threshold_angle_rad": 0.015,
    "loops.pol.bandwidth_hz": 1.0,
    "loops.pol.step_rate_hz": 30.0,
    "loops.pol.settle_s": 0.5,
    "loops.pol.subloop_max_s": 4.0,
    "loops.rw.step_counts": 8,
    "loops.rw.rate_hz": 30.0,
    # ------------------------------------------------------------ sequencer
    "sequencer.measure_period_s": 120.0,
    "sequencer.align_period_s": 1800.0,
    "sequencer.total_s": 86400.0,
    "sequencer.lock_tick_s": 5.0e-5,
    "sequencer.idle_tick_s": 2.0e-3,
    "sequencer.acquire_s": 12.0,
    "sequencer.wait_after_pump_s": 10.0,
    "sequencer.levels_s": 24.0,
    "sequencer.shot_s": 12.0,
    "sequencer.n_var_samples": 64,
    "sequencer.estimator_noise": 0.02,
    "sequencer.loop_log_decimation": 20,
    # ------------------------------------------------------------ scenarios
    "sweep.target": "hd",
    "sweep.points": 41,
    "sweep.span_rad": 0.4,
    "sweep.center_rad": 0.0,
    "sweep.settle_s": 0.6,
    "sweep.read_s": 0.2,
    "sweep.phase_points": 8,
    "sweep.fixed_mismatch_rad": 0.1,
    "polcmp.steps": 1000,
    "polcmp.power_noise_rms": 0.001,
    "polcmp.power_noise_tau_s": 1.0,
    "longrun.loops_off": False,
}


def _coerce(key: str, raw: str):
    ref = DEFAULTS[key]
    if isinstance(ref, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(ref, int):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from e
    if isinstance(ref, float):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from e
    return raw


class Config:
    """Resolved parameter set: defaults plus validated overrides."""

    def __init__(self, overrides: dict | None = None):
        self._values = dict(DEFAULTS)
        for key, val in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            self._values[key] = val if not isinstance(val, str) or not isinstance(
                DEFAULTS[key], (bool, int, float)
            ) else _coerce(key, val)

    def __getitem__(self, key: str):
        try:
            return self._values[key]
        except KeyError as e:
            raise ConfigError(f"unknown config key: {key}") from e

    def get(self, key, default=None):
        return self._values.get(key, default)

    def items(self):
        return self._values.items()

    def digest(self) -> str:
        blob = json.dumps(self._values, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def parse_override(arg: str) -> tuple:
    if "=" not in arg:
        raise ConfigError(f"override {arg!r} is not of the form key=value")
    key, _, raw = arg.partition("=")
    key = key.strip()
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key: {key}")
    return key, _coerce(key, raw.strip())


def load_config_file(path) -> dict:
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                key, val = parse_override(line)
            except ConfigError as e:
                raise ConfigError(f"{path}:{ln}: {e}") from e
            out[key] = val
    return out


# --------------------------------------------------------------------- build

V_STATE = JonesState(1.0, 0.0)


def build_drifts(cfg: Config, seed) -> DriftSuite:
    rw = lambda rate: DriftGen(kind="random-walk", rate=rate)
    channels = {
        "phase_pump": rw(cfg["drift.phase_pump.rate"]),
        "phase_probe": DriftGen(kind=cfg["drift.phase_probe.kind"],
                                rate=cfg["drift.phase_probe.rate"]),
        "phase_lo": rw(cfg["drift.phase_lo.rate"]),
        "pol_probe_s2": rw(cfg["drift.pol_probe.rate"]),
        "pol_probe_s3": rw(cfg["drift.pol_probe.rate"]),
        "pol_lo_s2": rw(cfg["drift.pol_lo.rate"]),
        "pol_lo_s3": rw(cfg["drift.pol_lo.rate"]),
        "pol_lo_creep": DriftGen(kind="ramp", rate=cfg["drift.pol_lo_creep.rate"]),
        "power_probe": DriftGen(kind="sinusoid", amplitude=cfg["drift.power.amplitude"],
                                period_s=cfg["drift.power.period_s"]),
        "power_lo": DriftGen(kind="sinusoid", amplitude=cfg["drift.power.amplitude"],
                             period_s=cfg["drift.power.period_s"]),
        "bs_temp": DriftGen(kind="sinusoid", amplitude=cfg["drift.bs_temp.amplitude"],
                            period_s=cfg["drift.bs_temp.period_s"]),
    }
    return DriftSuite.from_config(seed, channels)


def build_plant(cfg: Config, seed: int, drift_overrides: dict | None = None) -> PlantState:
    """Assemble a PlantState with hand-aligned starting polarizations."""
    ss = np.random.SeedSequence(seed)
    drift_ss, static_ss = ss.spawn(2)
    static_rng = np.random.Generator(np.random.PCG64(static_ss))

    rpv = cfg["plant.piezo.rad_per_volt"]

    def _aligned(target):
        # fixed birefringent rotation of the downstream fiber, so the
        # operating point sits generically relative to the piezo axes
        ax = static_rng.normal(size=3)
        ax /= np.linalg.norm(ax)
        ang = static_rng.uniform(0.6, 2.4)
        return aligned_path(ControllerGeometry(), target,
                            bank=PiezoBank(rad_per_volt=(rpv, rpv, rpv)),
                            static_axis=tuple(ax), static_angle=float(ang))

    probe_path = _aligned(V_STATE)
    lo_path = _aligned(V_STATE)

    drifts = build_drifts(cfg, drift_ss)
    if drift_overrides:
        for name, gen in drift_overrides.items():
            gen._rng = drifts.generators[name]._rng
            drifts.generators[name] = gen

    plant = PlantState(
        probe=FieldEnvelope(
            amplitude=np.sqrt(cfg["plant.probe.source_power_w"]),
            freq_offset_hz=cfg["plant.probe.freq_offset_hz"],
        ),
        lo=FieldEnvelope(amplitude=np.sqrt(cfg["plant.lo.source_power_w"])),
        pump=FieldEnvelope(amplitude=np.sqrt(cfg["plant.pump.power_w"]),
                           shutter_open=False),
        opa=OpaModel(
            gain_per_sqrt_w=cfg["plant.opa.gain_per_sqrt_w"],
            insertion_loss=cfg["plant.opa.insertion_loss"],
            thermal_settle_tau_s=cfg["plant.opa.thermal_tau_s"],
            thermal_amplitude_rad=cfg["plant.opa.thermal_amplitude_rad"],
        ),
        bs_hd=SplitterModel(
            nominal_ratio=cfg["plant.bs_hd.nominal_ratio"],
            temp_coeff=cfg["plant.bs_hd.temp_coeff"],
            pol_coeff=cfg["plant.bs_hd.pol_coeff"],
        ),
        bs2_tap=cfg["plant.bs2_tap"],
        stretcher_probe=StretcherModel(
            range_wavelengths=cfg["plant.stretcher.range_wavelengths"],
            max_voltage=cfg["plant.stretcher.max_voltage"],
        ),
        stretcher_lo=StretcherModel(
            range_wavelengths=cfg["plant.stretcher.range_wavelengths"],
            max_voltage=cfg["plant.stretcher.max_voltage"],
        ),
        hd_detector=DetectorModel(
            transimpedance=cfg["plant.hd.transimpedance"],
            post_gain=cfg["plant.hd.post_gain"],
            saturation=cfg["plant.hd.saturation_v"],
            noise_rms_v=cfg["plant.hd.noise_rms_v"],
        ),
        monitor_detector=DetectorModel(
            transimpedance=cfg["plant.pd5.transimpedance"],
            post_gain=cfg["plant.pd5.post_gain"],
            saturation=cfg["plant.pd5.saturation_v"],
            noise_rms_v=cfg["plant.pd5.noise_rms_v"],
        ),
        probe_path=probe_path,
        lo_path=lo_path,
        drifts=drifts,
        compression=cfg["plant.compression"],
        post_opa_loss=cfg["plant.post_opa_loss"],
    )
    return plant


def build_chain(cfg: Config, carrier_hz: float, allpass_phase: float = 0.0) -> LockInChain:
    return LockInChain(
        carrier_hz=carrier_hz,
        sample_rate=cfg["dsp.sample_rate"],
        mod_freq_hz=cfg["dsp.mod_freq_hz"],
        downsample=cfg["dsp.downsample"],
        carrier_q=cfg["dsp.carrier_q"],
        reject_q=cfg["dsp.reject_q"],
        allpass_phase=allpass_phase,
    )


def build_envelope_chain(cfg: Config, allpass_phase: float = 0.0) -> LockInChain:
    return LockInChain(
        sample_rate=cfg["dsp.envelope_rate"],
        mod_freq_hz=cfg["dsp.mod_freq_hz"],
        reject_q=cfg["dsp.reject_q"],
        allpass_phase=allpass_phase,
        envelope_mode=True,
    )
