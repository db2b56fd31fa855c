"""Automation of the measurement station.

Alignment sequences (every 30 minutes): polarization of the probe onto the
amplifier's crystal axis using the doubled-offset beat, polarization of the
local oscillator onto the probe using the homodyne beat, then the splitter
coupling ratio - in that order, because the ratio depends on the incoming
polarization.  Fiber stretchers are held at fixed voltage throughout.

Measurement sequences (every 2 minutes): lock probe-to-pump phase, wait out
the amplifier's pump-heating transient, lock oscillator-to-probe phase,
record squeezed and antisqueezed variances, then release the locks, close
everything but the oscillator and record the vacuum reference.  A sequence
whose variance window overlaps a stretcher relock, or whose receiver
front-end was driven past its headroom, is flagged as an outlier.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import AnalysisError, LevelPair, loss_from_levels
from .loops import (
    CouplingLoop,
    CouplingLoopCfg,
    LO_POWER_STAGES,
    PROBE_POWER_STAGES,
    PhaseLoop,
    PhaseLoopCfg,
    PolLoopCfg,
    PowerLoop,
    PowerLoopCfg,
    optimize_polarization,
)
from .plant import HD_NODE_HEADROOM_V, PlantState, hd_node_level, quadrature_variance
from .polarization import mode_overlap
from .streams import EnvelopeSource

OUTLIER_REASONS = ("none", "relock_overlap", "saturated")


@dataclass
class ShutterState:
    """Motorized shutters on the three beams, with a transition log."""

    plant: PlantState
    log: list = field(default_factory=list)

    def set(self, probe=None, lo=None, pump=None):
        for beam, val in (("probe", probe), ("lo", lo), ("pump", pump)):
            if val is None:
                continue
            env = getattr(self.plant, beam)
            if env.shutter_open != val:
                self.plant.set_shutter(beam, val)
                self.log.append((self.plant.time, beam, "open" if val else "closed"))

    def state(self):
        return {b: getattr(self.plant, b).shutter_open for b in ("probe", "lo", "pump")}


@dataclass
class MeasurementRecord:
    timestamp_s: float        # real seconds since run start
    sq_db: float
    asq_db: float
    shot_ref: float
    loss_est: float | None
    outlier: bool
    reason: str = "none"

    def __post_init__(self):
        if self.reason not in OUTLIER_REASONS:
            raise ValueError(f"unknown outlier reason {self.reason!r}")


@dataclass
class StageReport:
    stage: str
    t_start: float            # compressed seconds
    t_end: float
    converged: bool
    details: dict = field(default_factory=dict)


@dataclass
class AlignmentReport:
    timestamp_s: float
    stages: list
    converged: bool


@dataclass
class Schedule:
    measure_period_s: float = 120.0      # real seconds
    align_period_s: float = 1800.0
    total_s: float = 86400.0
    compression: float = 3600.0

    def __post_init__(self):
        if self.compression <= 0:
            raise ValueError("compression must be positive")

    def measurement_slots(self):
        n = int(self.total_s / self.measure_period_s)
        return [m * self.measure_period_s / self.compression for m in range(n)]

    def alignment_slots(self):
        n = int(self.total_s / self.align_period_s)
        return [k * self.align_period_s / self.compression for k in range(n)]


class RunStore:
    """Append-only CSV logs for one run: records plus per-loop telemetry."""

    RECORD_COLUMNS = ("t_s", "sq_db", "asq_db", "shot_ref", "loss_est",
                      "outlier", "reason")

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._files = {}
        self._writers = {}

    def _writer(self, name, columns):
        if name not in self._writers:
            fh = open(self.out_dir / f"{name}.csv", "w", newline="")
            w = csv.writer(fh)
            w.writerow(columns)
            self._files[name] = fh
            self._writers[name] = w
        return self._writers[name]

    @staticmethod
    def _fmt(x):
        if isinstance(x, bool):
            return "1" if x else "0"
        if x is None:
            return ""
        if isinstance(x, float):
            return f"{x:.10g}"
        return str(x)

    def append(self, name, columns, row):
        self._writer(name, columns).writerow([self._fmt(x) for x in row])

    def record(self, rec: MeasurementRecord):
        self.append("records", self.RECORD_COLUMNS, (
            rec.timestamp_s, rec.sq_db, rec.asq_db, rec.shot_ref,
            rec.loss_est, rec.outlier, rec.reason,
        ))

    def close(self):
        for fh in self._files.values():
            fh.close()
        self._files.clear()
        self._writers.clear()


class Sequencer:
    """Single driver of the plant and all loops; strictly serial ticking."""

    def __init__(self, plant: PlantState, cfg, seed: int, store: RunStore = None,
                 loops_off: bool = False):
        self.plant = plant
        self.cfg = cfg
        self.store = store
        self.loops_off = loops_off
        self.shutters = ShutterState(plant)
        ss = np.random.SeedSequence([int(seed), 0x5EC])
        est_ss, pol_ss = ss.spawn(2)
        self.est_rng = np.random.Generator(np.random.PCG64(est_ss))
        self.pol_rng = np.random.Generator(np.random.PCG64(pol_ss))

        self.power_probe = PowerLoop(
            PowerLoopCfg(PROBE_POWER_STAGES, loop_gain=cfg["loops.power.gain"]),
            plant, "probe")
        self.power_lo = PowerLoop(
            PowerLoopCfg(LO_POWER_STAGES, loop_gain=cfg["loops.power.gain"],
                         pd_transimpedance=(1.0e5, 1.0e4)),
            plant, "lo")
        self.opa_lock = PhaseLoop(PhaseLoopCfg(
            carrier_hz=2.0 * cfg["plant.probe.freq_offset_hz"],
            actuator="probe", beat_phase_per_actuator_rad=-2.0,
            loop_gain=cfg["loops.phase_opa.gain"],
            demod_samples=cfg["loops.phase.demod_samples"],
            sample_rate=cfg["dsp.sample_rate"],
            relock_threshold_rad=cfg["loops.phase.relock_threshold_rad"],
            relock_confirm_ticks=cfg["loops.phase.relock_confirm_ticks"],
        ), plant)
        self.hd_lock = PhaseLoop(PhaseLoopCfg(
            carrier_hz=cfg["plant.probe.freq_offset_hz"],
            actuator="lo", beat_phase_per_actuator_rad=-1.0,
            loop_gain=cfg["loops.phase_hd.gain"],
            demod_samples=cfg["loops.phase.demod_samples"],
            sample_rate=cfg["dsp.sample_rate"],
            relock_threshold_rad=cfg["loops.phase.relock_threshold_rad"],
            relock_confirm_ticks=cfg["loops.phase.relock_confirm_ticks"],
        ), plant)
        self.coupling = CouplingLoop(CouplingLoopCfg(
            gain_degc_per_v_s=cfg["loops.coupling.gain_degc_per_v_s"],
            slew_degc_per_s=cfg["loops.coupling.slew_degc_per_s"],
            window_ticks=cfg["loops.coupling.window_ticks"],
        ), plant)
        self.coupling.engaged = not loops_off
        self.pol_cfg = PolLoopCfg(
            mod_counts=cfg["loops.pol.mod_counts"],
            cycles=cfg["loops.pol.cycles"],
            threshold_angle_rad=cfg["loops.pol.threshold_angle_rad"],
            bandwidth_hz=cfg["loops.pol.bandwidth_hz"],
            step_rate_hz=cfg["loops.pol.step_rate_hz"],
            settle_s=cfg["loops.pol.settle_s"],
            subloop_max_s=cfg["loops.pol.subloop_max_s"],
        )
        self._tick_count = 0
        self.alignment_reports: list = []
        self.records: list = []

    # ----------------------------------------------------------------- ticks
    def _log_loops(self):
        if self.store is None:
            return
        dec = self.cfg["sequencer.loop_log_decimation"]
        if self._tick_count % dec:
            return
        t = self.plant.time_real
        for name, loop in (("phase_opa", self.opa_lock), ("phase_hd", self.hd_lock)):
            if loop.engaged:
                self.store.append(name, ("t_s", "error_rad", "voltage_v",
                                         "relocking", "resets"),
                                  (t, loop.last_error, loop.stretcher.voltage,
                                   loop.relocking, loop.resets))
        if self.coupling.engaged and self.plant.lo.shutter_open:
            self.store.append("coupling", ("t_s", "dc_v", "peltier_degc",
                                           "saturated"),
                              (t, self.coupling.last_dc,
                               self.plant.peltier_offset, self.coupling.saturated))
        for name, loop in (("power_probe", self.power_probe),
                           ("power_lo", self.power_lo)):
            if getattr(self.plant, loop.beam).shutter_open:
                self.store.append(name, ("t_s", "stage", "transmission",
                                         "saturated"),
                                  (t, loop.stage,
                                   getattr(self.plant, f"voa_{loop.beam}"),
                                   loop.saturated))

    def _tick(self, dt, locks=()):
        self.plant.drift_step(dt)
        self.power_probe.step(dt)
        self.power_lo.step(dt)
        self.coupling.step(dt)
        for loop in locks:
            loop.step(dt)
        self._tick_count += 1
        self._log_loops()

    def _run_for(self, duration_c, dt, locks=()):
        n = max(1, int(round(duration_c / dt)))
        for _ in range(n):
            self._tick(dt, locks)

    # ------------------------------------------------------------- alignment
    def run_alignment(self) -> AlignmentReport:
        """Three-stage realignment; stretchers held, later stages still run
        if an earlier one fails to converge."""
        cfg = self.cfg
        plant = self.plant
        t0_real = plant.time_real
        self.opa_lock.release()
        self.hd_lock.release()
        stages = []

        # stage 1: probe polarization onto the crystal axis
        self.shutters.set(probe=True, pump=True, lo=False)
        self.power_probe.set_stage("opa_align")
        self._run_for(6e-3, 1e-3)  # power restage: monitor PD steps down decades
        t_start = plant.time
        bank_before = list(plant.probe_path.bank.values)
        src = EnvelopeSource(plant, target="opa", fs=cfg["dsp.envelope_rate"],
                             mod_counts=self.pol_cfg.mod_counts)
        from .config import build_envelope_chain

        chain = build_envelope_chain(cfg)
        # error-signal slopes are recalibrated once per alignment: they move
        # with the operating point, so stale values misdirect the feedback
        res = optimize_polarization(self.pol_cfg, chain, src, {})
        mismatch = 1.0 - mode_overlap(plant.opa.crystal_axis, plant.probe_pol())
        motion = max(abs(a - b) for a, b in zip(bank_before, plant.probe_path.bank.values))
        stages.append(StageReport("opa_polarization", t_start, plant.time,
                                  res.converged,
                                  {"mismatch_loss": mismatch, "piezo_motion": motion,
                                   "events": res.events}))

        # stage 2: oscillator polarization onto the probe
        self.shutters.set(probe=True, pump=False, lo=True)
        self.power_probe.set_stage("hd_align")
        self.power_lo.set_stage("align")
        self._run_for(6e-3, 1e-3)
        t_start = plant.time
        bank_before = list(plant.lo_path.bank.values)
        src = EnvelopeSource(plant, target="hd", fs=cfg["dsp.envelope_rate"],
                             mod_counts=self.pol_cfg.mod_counts)
        chain = build_envelope_chain(cfg)
        res = optimize_polarization(self.pol_cfg, chain, src, {})
        mismatch = 1.0 - mode_overlap(plant.probe_pol(), plant.lo_pol())
        motion = max(abs(a - b) for a, b in zip(bank_before, plant.lo_path.bank.values))
        stages.append(StageReport("hd_polarization", t_start, plant.time,
                                  res.converged,
                                  {"mismatch_loss": mismatch, "piezo_motion": motion,
                                   "events": res.events}))

        # stage 3: coupling-ratio trim, after polarization by necessity
        t_start = plant.time
        was_engaged = self.coupling.engaged
        self.coupling.engaged = True
        self._run_for(20e-3, cfg["sequencer.idle_tick_s"])
        self.coupling.engaged = was_engaged
        from .plant import splitter_ratio

        ratio_err = abs(splitter_ratio(plant.bs_hd, plant.lo_pol()) - 0.5)
        stages.append(StageReport("coupling_ratio", t_start, plant.time,
                                  ratio_err < 1e-3, {"ratio_error": ratio_err}))

        report = AlignmentReport(t0_real, stages, all(s.converged for s in stages))
        self.alignment_reports.append(report)
        if self.store is not None:
            for s in stages:
                self.store.append("alignments",
                                  ("t_s", "stage", "converged", "detail"),
                                  (report.timestamp_s, s.stage, s.converged,
                                   ";".join(f"{k}={v}" for k, v in s.details.items()
                                            if k != "events")))
                for t_ev, piezo, event in s.details.get("events", ()):
                    self.store.append("pol_events",
                                      ("t_s", "stage", "piezo", "event"),
                                      (report.timestamp_s + t_ev, s.stage,
                                       piezo, event))
        return report

    # ----------------------------------------------------------- measurement
    def _sample_levels(self, n, lock_angle, duration_c, dt):
        """Mean measured variance over n model evaluations spread across the
        window, using the instantaneous lock residuals as the angle error."""
        plant = self.plant
        vals = np.empty(n)
        sat = False
        est = self.cfg["sequencer.estimator_noise"]
        lo_ref = LO_POWER_STAGES["measure"]
        ticks_per = max(1, int(round(duration_c / dt / n)))
        for j in range(n):
            for _ in range(ticks_per):
                self._tick(dt, (self.opa_lock, self.hd_lock))
            delta = self.hd_lock.quadrature_error() + self.opa_lock.quadrature_error()
            v = quadrature_variance(plant.squeeze_param(), plant.effective_loss(),
                                    lock_angle + delta)
            scale = plant.lo_power() / lo_ref
            vals[j] = v * scale * (1.0 + est * self.est_rng.normal())
            if hd_node_level(plant) > HD_NODE_HEADROOM_V:
                sat = True
        return float(np.mean(vals)), sat

    def run_measurement(self) -> MeasurementRecord:
        """One full squeezing/antisqueezing/vacuum sequence."""
        cfg = self.cfg
        plant = self.plant
        t0_real = plant.time_real
        comp = plant.compression
        dt = cfg["sequencer.lock_tick_s"]
        acquire_c = cfg["sequencer.acquire_s"] / comp
        wait_c = max(cfg["sequencer.wait_after_pump_s"],
                     5.0 * plant.opa.thermal_settle_tau_s) / comp
        levels_c = cfg["sequencer.levels_s"] / comp
        shot_c = cfg["sequencer.shot_s"] / comp
        n_var = cfg["sequencer.n_var_samples"]

        # phase 1: probe-pump lock through the thermal transient
        self.shutters.set(probe=True, pump=True, lo=True)
        self.power_probe.set_stage("measure")
        self.power_lo.set_stage("measure")
        self.opa_lock.cfg.lock_quadrature = 0.0
        self.opa_lock.engage()
        self._run_for(acquire_c + wait_c, dt, (self.opa_lock,))

        # phase 2: oscillator-probe lock at the squeezed quadrature
        self.hd_lock.cfg.lock_quadrature = 0.0
        self.hd_lock.engage()
        self._run_for(acquire_c, dt, (self.opa_lock, self.hd_lock))

        # phase 3: levels at both quadratures
        t3_start = plant.time
        v_sq, sat1 = self._sample_levels(n_var, 0.0, levels_c / 2.0, dt)
        self.hd_lock.cfg.lock_quadrature = np.pi / 2.0
        self._run_for(acquire_c / 2.0, dt, (self.opa_lock, self.hd_lock))
        v_asq, sat2 = self._sample_levels(n_var, np.pi / 2.0, levels_c / 2.0, dt)
        t3_end = plant.time
        relock_hit = (self.opa_lock.overlaps_relock(t3_start, t3_end)
                      or self.hd_lock.overlaps_relock(t3_start, t3_end))

        # phase 4: vacuum reference with the oscillator alone
        self.opa_lock.release()
        self.hd_lock.release()
        self.shutters.set(probe=False, pump=False)
        est = cfg["sequencer.estimator_noise"]
        lo_ref = LO_POWER_STAGES["measure"]
        shot_vals = np.empty(n_var)
        ticks_per = max(1, int(round(shot_c / dt / n_var)))
        for j in range(n_var):
            for _ in range(ticks_per):
                self._tick(dt)
            shot_vals[j] = (plant.lo_power() / lo_ref) * (1.0 + est * self.est_rng.normal())
        shot_ref = float(np.mean(shot_vals))

        sq_db = 10.0 * np.log10(v_sq / shot_ref)
        asq_db = 10.0 * np.log10(v_asq / shot_ref)
        outlier = bool(relock_hit or sat1 or sat2)
        reason = "none"
        if relock_hit:
            reason = "relock_overlap"
        elif sat1 or sat2:
            reason = "saturated"
        loss_est = None
        if not outlier:
            try:
                loss_est = loss_from_levels(LevelPair(sq_db, asq_db))
            except AnalysisError:
                loss_est = None
        rec = MeasurementRecord(t0_real, float(sq_db), float(asq_db), shot_ref,
                                loss_est, outlier, reason)
        self.records.append(rec)
        if self.store is not None:
            self.store.record(rec)
        return rec

    # -------------------------------------------------------------- schedule
    def run_schedule(self, sched: Schedule) -> list:
        """Interleave alignments and measurements over the full horizon."""
        m_slots = sched.measurement_slots()
        a_slots = sched.alignment_slots()
        idle_dt = self.cfg["sequencer.idle_tick_s"]
        ai = 0
        for t_m in m_slots:
            while ai < len(a_slots) and a_slots[ai] <= t_m + 1e-12:
                self._idle_until(a_slots[ai], idle_dt)
                if not self.loops_off:
                    self.run_alignment()
                ai += 1
            self._idle_until(t_m, idle_dt)
            self.run_measurement()
        return self.records

    def _idle_until(self, t_c, idle_dt):
        while self.plant.time < t_c - 1e-12:
            self._tick(min(idle_dt, t_c - self.plant.time))
