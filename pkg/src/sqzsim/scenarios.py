"""Named scenarios: each reproduces one characteristic behavior of the
station and emits CSV plus a machine-readable manifest.

    error-sweep     settled demodulated error vs polarization mismatch
                    (homodyne or amplifier-monitor target)
    phase-sweep     settled error vs optical phase at fixed mismatch
    pol-compare     dither-lock vs random-walk piezo traces under power noise
    coupling-lock   splitter-ratio stabilization vs thermistor-hold reference
    longrun         the full compressed-day campaign with all loops

Every scenario is deterministic per (seed, config): identical inputs give
byte-identical output files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import summarize_records
from .config import Config, build_chain, build_envelope_chain, build_plant
from .dsp import LockInChain
from .loops import (
    PolLoopCfg,
    RandomWalkCfg,
    _beta_slope,
    random_walk_baseline,
    track_polarization,
)
from .plant import homodyne_dc, splitter_ratio
from .polarization import PiezoBank
from .sequencer import RunStore, Schedule, Sequencer
from .streams import BeatSource, OUNoise, settled_error, stream_through

SCENARIOS = {}


def scenario(name):
    def wrap(fn):
        SCENARIOS[name] = fn
        return fn
    return wrap


def _fmt(x):
    if isinstance(x, bool):
        return "1" if x else "0"
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.10g}"
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def write_manifest(out_dir, scenario_name, seed, cfg: Config, extra=None):
    manifest = {
        "scenario": scenario_name,
        "seed": seed,
        "config_digest": cfg.digest(),
        "version": __version__,
    }
    if extra:
        manifest.update(extra)
    with open(Path(out_dir) / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _quiet_plant(cfg, seed):
    """Plant with every slow drift disabled (sweep instruments)."""
    plant = build_plant(cfg, seed)
    for gen in plant.drifts.generators.values():
        gen.kind = "none"
        gen.value = 0.0
    return plant


def _textbook_lo_path(plant, mismatch_counts=0):
    """Replace a polarization path by the clean great-circle geometry:
    piezos 1/3 at zero, no static rotation, so piezo 2 moves the state
    exactly along the V-R circle."""
    from .plant import aligned_path
    from .polarization import ControllerGeometry, JonesState

    rpv = plant.lo_path.bank.rad_per_volt
    bank = PiezoBank([0, 2048, 0], rad_per_volt=rpv)
    path = aligned_path(ControllerGeometry(), JonesState(1.0, 0.0), bank=bank)
    path.bank.values[1] += mismatch_counts
    return path


def _set_sweep_powers(plant, target):
    if target == "hd":
        plant.voa_probe = 100e-6 / (plant.probe.power * plant.pickoff_main)
        plant.voa_lo = 100e-6 / (plant.lo.power * plant.pickoff_main)
        plant.set_shutter("pump", False)
    else:
        plant.voa_probe = 1e-6 / (plant.probe.power * plant.pickoff_main)
        plant.set_shutter("lo", False)
        plant.set_shutter("pump", True)
        plant._pump_open_time = -1e9  # thermal transient long settled


def _sweep_point(cfg, seed, target, mismatch_jones_rad, allpass_phase,
                 probe_phase=0.0):
    """Settled demodulated error at one polarization mismatch."""
    plant = _quiet_plant(cfg, seed)
    _set_sweep_powers(plant, target)
    plant.probe.phase = probe_phase
    which = "lo_path" if target == "hd" else "probe_path"
    path = _textbook_lo_path(plant)
    # right-handed rotation about +s2 moves the state by -2*theta in the
    # V->R convention, so negate the commanded counts
    k = path.bank.radians_per_count(1)
    path.bank.values[1] += int(round(-2.0 * mismatch_jones_rad / k))
    setattr(plant, which, path)
    carrier = (cfg["plant.probe.freq_offset_hz"] if target == "hd"
               else 2.0 * cfg["plant.probe.freq_offset_hz"])
    chain = build_chain(cfg, carrier_hz=carrier, allpass_phase=allpass_phase)
    src = BeatSource(plant, target=target, fs=cfg["dsp.sample_rate"],
                     mod_counts=cfg["loops.pol.mod_counts"],
                     mod_freq_hz=cfg["dsp.mod_freq_hz"], mod_piezo=1)
    return settled_error(src, chain, cfg["sweep.settle_s"], cfg["sweep.read_s"])


def _calibrate_sweep_allpass(cfg, seed, target):
    from .streams import calibrate_allpass_phase

    carrier = (cfg["plant.probe.freq_offset_hz"] if target == "hd"
               else 2.0 * cfg["plant.probe.freq_offset_hz"])

    def make_source():
        plant = _quiet_plant(cfg, seed)
        _set_sweep_powers(plant, target)
        which = "lo_path" if target == "hd" else "probe_path"
        path = _textbook_lo_path(plant, mismatch_counts=-131)
        setattr(plant, which, path)
        return BeatSource(plant, target=target, fs=cfg["dsp.sample_rate"],
                          mod_counts=cfg["loops.pol.mod_counts"],
                          mod_freq_hz=cfg["dsp.mod_freq_hz"], mod_piezo=1)

    def make_chain(phase):
        return build_chain(cfg, carrier_hz=carrier, allpass_phase=phase)

    return calibrate_allpass_phase(make_source, make_chain,
                                   cfg["sweep.settle_s"], cfg["sweep.read_s"])


@scenario("error-sweep")
def scenario_error_sweep(cfg: Config, seed: int, out_dir: Path) -> dict:
    """Mismatch grid -> settled error; the law is k*sin(2*mismatch)."""
    target = cfg["sweep.target"]
    if target not in ("hd", "opa"):
        raise ValueError("sweep.target must be hd or opa")
    n = cfg["sweep.points"]
    span = cfg["sweep.span_rad"]
    center = cfg["sweep.center_rad"]
    grid = center + np.linspace(-span, span, n)
    phase = _calibrate_sweep_allpass(cfg, seed, target)
    rows = []
    for dth in grid:
        beta = _sweep_point(cfg, seed, target, float(dth), phase)
        rows.append((float(dth), beta))
    if target == "opa":
        # demonstrate the second null a quarter turn away
        for dth in (np.pi / 2 - 0.15, np.pi / 2, np.pi / 2 + 0.15):
            rows.append((float(dth), _sweep_point(cfg, seed, target, float(dth), phase)))
    write_csv(Path(out_dir) / "error_sweep.csv", ("delta_theta_rad", "beta"), rows)
    write_manifest(out_dir, "error-sweep", seed, cfg, {"target": target})
    return check_error_sweep(cfg, out_dir)


def check_error_sweep(cfg: Config, out_dir) -> dict:
    rows = np.genfromtxt(Path(out_dir) / "error_sweep.csv", delimiter=",",
                         names=True)
    dth = np.atleast_1d(rows["delta_theta_rad"])
    beta = np.atleast_1d(rows["beta"])
    span = cfg["sweep.span_rad"]
    core = np.abs(dth - cfg["sweep.center_rad"]) <= span + 1e-9
    x, y = dth[core], beta[core]
    s = np.sin(x)
    k = float(np.sum(y * s) / np.sum(s * s))
    resid = y - k * s
    r2 = float(1.0 - np.sum(resid**2) / np.sum((y - y.mean()) ** 2))
    zero_crossing = float(np.interp(0.0, y[np.argsort(y)], x[np.argsort(y)])) if k > 0 else \
        float(np.interp(0.0, (-y)[np.argsort(-y)], x[np.argsort(-y)]))
    # antisymmetry of paired points
    asym = []
    for i in range(len(x)):
        j = np.argmin(np.abs(x + x[i]))
        if abs(x[j] + x[i]) < 1e-9 and x[i] > 0:
            asym.append(abs(y[i] + y[j]) / max(abs(y[i]), 1e-30))
    checks = {
        "r2_sin_fit": r2,
        "zero_crossing_rad": zero_crossing,
        "max_antisymmetry_error": float(max(asym)) if asym else 0.0,
        "slope": k,
    }
    ok = r2 > 0.999 and abs(zero_crossing) < 1e-3
    if asym:
        ok = ok and max(asym) < 0.02
    if cfg["sweep.target"] == "opa":
        tail = beta[~core]
        if len(tail) == 3:
            checks["null_quarter_turn"] = float(tail[1])
            sign_change = tail[0] * tail[2] < 0
            small = abs(tail[1]) < 0.05 * np.max(np.abs(beta))
            checks["quarter_turn_sign_change"] = bool(sign_change)
            ok = ok and sign_change and small
    checks["ok"] = bool(ok)
    return checks


@scenario("phase-sweep")
def scenario_phase_sweep(cfg: Config, seed: int, out_dir: Path) -> dict:
    """Optical-phase immunity: settled error vs carrier phase offset."""
    target = cfg["sweep.target"]
    dth = cfg["sweep.fixed_mismatch_rad"]
    n = cfg["sweep.phase_points"]
    phase = _calibrate_sweep_allpass(cfg, seed, target)
    rows = []
    for i in range(n):
        dphi = 2.0 * np.pi * i / n
        beta = _sweep_point(cfg, seed, target, dth, phase, probe_phase=dphi)
        rows.append((dphi, beta))
    write_csv(Path(out_dir) / "phase_sweep.csv", ("delta_phi_rad", "beta"), rows)
    write_manifest(out_dir, "phase-sweep", seed, cfg, {"target": target})
    return check_phase_sweep(cfg, out_dir)


def check_phase_sweep(cfg: Config, out_dir) -> dict:
    rows = np.genfromtxt(Path(out_dir) / "phase_sweep.csv", delimiter=",", names=True)
    beta = np.atleast_1d(rows["beta"])
    spread = float((beta.max() - beta.min()) / abs(beta.mean()))
    return {"relative_spread": spread, "ok": bool(spread < 0.01)}


@scenario("pol-compare")
def scenario_pol_compare(cfg: Config, seed: int, out_dir: Path) -> dict:
    """Piezo digital-value traces: dither lock vs random walk, from the
    optimum, under residual power noise."""
    n_steps = cfg["polcmp.steps"]
    sigma = cfg["polcmp.power_noise_rms"]
    tau = cfg["polcmp.power_noise_tau_s"]
    fs = cfg["dsp.sample_rate"]

    def make(plant_seed, noise_key):
        plant = _quiet_plant(cfg, plant_seed)
        _set_sweep_powers(plant, "hd")
        ss = np.random.SeedSequence([plant_seed, noise_key])
        c1, c2, c3 = ss.spawn(3)
        src = BeatSource(
            plant, target="hd", fs=fs,
            mod_counts=cfg["loops.pol.mod_counts"],
            mod_freq_hz=cfg["dsp.mod_freq_hz"],
            probe_noise=OUNoise(sigma, tau, np.random.Generator(np.random.PCG64(c1))),
            lo_noise=OUNoise(sigma, tau, np.random.Generator(np.random.PCG64(c2))),
        )
        return plant, src, np.random.Generator(np.random.PCG64(c3))

    # dither lock
    plant, src, _ = make(seed, 1)
    chain = build_chain(cfg, carrier_hz=cfg["plant.probe.freq_offset_hz"])
    pol_cfg = PolLoopCfg(
        mod_counts=cfg["loops.pol.mod_counts"], cycles=cfg["loops.pol.cycles"],
        threshold_angle_rad=cfg["loops.pol.threshold_angle_rad"],
        bandwidth_hz=cfg["loops.pol.bandwidth_hz"],
        step_rate_hz=cfg["loops.pol.step_rate_hz"],
        settle_s=cfg["loops.pol.settle_s"],
        subloop_max_s=cfg["loops.pol.subloop_max_s"],
    )
    trace_mod = track_polarization(pol_cfg, chain, src, n_steps)
    write_csv(Path(out_dir) / "pol_modulation.csv",
              ("step", "piezo1", "piezo2", "piezo3"),
              [(i, *row) for i, row in enumerate(trace_mod)])

    # random walk
    plant, src, rw_rng = make(seed, 2)
    rw_cfg = RandomWalkCfg(step_counts=cfg["loops.rw.step_counts"],
                           rate_hz=cfg["loops.rw.rate_hz"])
    trace_rw = random_walk_baseline(rw_cfg, src, n_steps, rw_rng)
    write_csv(Path(out_dir) / "pol_random_walk.csv",
              ("step", "piezo1", "piezo2", "piezo3"),
              [(i, *row) for i, row in enumerate(trace_rw)])

    write_manifest(out_dir, "pol-compare", seed, cfg)
    return check_pol_compare(cfg, out_dir)


def check_pol_compare(cfg: Config, out_dir) -> dict:
    mod = np.genfromtxt(Path(out_dir) / "pol_modulation.csv", delimiter=",",
                        names=True)
    rw = np.genfromtxt(Path(out_dir) / "pol_random_walk.csv", delimiter=",",
                       names=True)
    mod_std = [float(np.std(mod[f"piezo{k}"])) for k in (1, 2, 3)]
    rw_std = [float(np.std(rw[f"piezo{k}"])) for k in (1, 2, 3)]
    ok = (max(mod_std) < 2.0
          and all(r >= 10.0 * m for r, m in zip(rw_std, mod_std)))
    return {"modulation_std": mod_std, "random_walk_std": rw_std, "ok": bool(ok)}


@scenario("coupling-lock")
def scenario_coupling_lock(cfg: Config, seed: int, out_dir: Path) -> dict:
    """Coupling-ratio traces over a compressed day: locked vs held."""
    from .loops import CouplingLoop, CouplingLoopCfg

    total_c = cfg["sequencer.total_s"] / cfg["plant.compression"]
    dt = 2.0e-3

    def run(locked):
        plant = build_plant(cfg, seed)
        # isolate the temperature mechanism: polarization inputs held still
        for name in ("pol_probe_s2", "pol_probe_s3", "pol_lo_s2", "pol_lo_s3",
                     "pol_lo_creep", "power_probe", "power_lo",
                     "phase_pump", "phase_probe", "phase_lo"):
            plant.drifts.generators[name].kind = "none"
            plant.drifts.generators[name].value = 0.0
        plant.voa_lo = 16.0e-3 / (plant.lo.power * plant.pickoff_main)
        plant.set_shutter("probe", False)
        plant.set_shutter("pump", False)
        loop = CouplingLoop(CouplingLoopCfg(
            gain_degc_per_v_s=cfg["loops.coupling.gain_degc_per_v_s"],
            slew_degc_per_s=cfg["loops.coupling.slew_degc_per_s"],
            window_ticks=cfg["loops.coupling.window_ticks"]), plant)
        loop.engaged = locked
        rows = []
        n = int(round(total_c / dt))
        for _ in range(n):
            plant.drift_step(dt)
            loop.step(dt)
            rows.append((plant.time_real,
                         splitter_ratio(plant.bs_hd, plant.lo_pol()),
                         plant.bs_hd.temperature,
                         homodyne_dc(plant).volts))
        return rows

    write_csv(Path(out_dir) / "coupling_locked.csv",
              ("t_s", "ratio", "temperature_degc", "dc_volts"), run(True))
    write_csv(Path(out_dir) / "coupling_held.csv",
              ("t_s", "ratio", "temperature_degc", "dc_volts"), run(False))
    write_manifest(out_dir, "coupling-lock", seed, cfg)
    return check_coupling_lock(cfg, out_dir)


def check_coupling_lock(cfg: Config, out_dir) -> dict:
    locked = np.genfromtxt(Path(out_dir) / "coupling_locked.csv", delimiter=",",
                           names=True)
    held = np.genfromtxt(Path(out_dir) / "coupling_held.csv", delimiter=",",
                         names=True)
    r = locked["ratio"]
    h = held["ratio"]
    out = {
        "locked_std": float(r.std()),
        "locked_max_dev": float(np.abs(r - 0.5).max()),
        "held_pp_excursion": float(h.max() - h.min()),
    }
    out["ok"] = bool(out["locked_std"] <= 2.0e-4
                     and out["locked_max_dev"] <= 1.0e-3
                     and out["held_pp_excursion"] >= 5.0e-3)
    return out


@scenario("longrun")
def scenario_longrun(cfg: Config, seed: int, out_dir: Path) -> dict:
    """Full compressed-day campaign; optionally without the polarization
    and coupling loops to produce the uncontrolled reference."""
    plant = build_plant(cfg, seed)
    store = RunStore(out_dir)
    seq = Sequencer(plant, cfg, seed, store=store,
                    loops_off=cfg["longrun.loops_off"])
    sched = Schedule(
        measure_period_s=cfg["sequencer.measure_period_s"],
        align_period_s=cfg["sequencer.align_period_s"],
        total_s=cfg["sequencer.total_s"],
        compression=cfg["plant.compression"],
    )
    records = seq.run_schedule(sched)
    store.close()
    try:
        stats = summarize_records(records)
        write_csv(Path(out_dir) / "summary.csv",
                  ("n_total", "n_outliers", "mean_sq_db", "std_sq_db",
                   "mean_asq_db", "std_asq_db", "mean_loss", "std_loss",
                   "max_loss_excursion"),
                  [(stats.n_total, stats.n_outliers, stats.mean_sq, stats.std_sq,
                    stats.mean_asq, stats.std_asq, stats.mean_loss,
                    stats.std_loss, stats.max_loss_excursion)])
    except Exception:
        stats = None
    write_manifest(out_dir, "longrun", seed, cfg,
                   {"loops_off": cfg["longrun.loops_off"],
                    "n_records": len(records),
                    "n_alignments": len(seq.alignment_reports)})
    return check_longrun(cfg, out_dir)


def check_longrun(cfg: Config, out_dir) -> dict:
    rows = np.genfromtxt(Path(out_dir) / "records.csv", delimiter=",", names=True)
    n = len(np.atleast_1d(rows["sq_db"]))
    out = {"n_records": int(n)}
    good = np.atleast_1d(rows["outlier"]) == 0
    out["outlier_fraction"] = float(1.0 - good.mean())
    sq = np.atleast_1d(rows["sq_db"])[good]
    loss = np.atleast_1d(rows["loss_est"])[good]
    out["std_sq_db"] = float(sq.std())
    out["mean_loss"] = float(np.mean(loss))
    out["std_loss"] = float(np.std(loss))
    expected = int(cfg["sequencer.total_s"] / cfg["sequencer.measure_period_s"])
    if cfg["longrun.loops_off"]:
        k = max(1, n // 10)
        first = sq[:k].mean()
        last = np.atleast_1d(rows["sq_db"])[-k:].mean()
        out["degradation_db"] = float(last - first)
        out["ok"] = bool(n == expected and out["degradation_db"] >= 0.5)
    else:
        out["ok"] = bool(
            n == expected
            and out["outlier_fraction"] < 0.05
            and out["std_sq_db"] <= 0.1
            and out["std_loss"] <= 0.01
            and abs(out["mean_loss"] - 0.27) <= 0.02
        )
    return out


def run_scenario(name: str, cfg: Config, seed: int, out_dir) -> dict:
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from "
                         f"{sorted(SCENARIOS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return SCENARIOS[name](cfg, seed, out)
