"""Declarative experiment execution: configs, co-simulation, metrics, files.

A scenario is a UTF-8 JSON document in SI base units describing the coil
link, the transmitter hop schedule, the interceptor (switched branch plus
controller), and a bank of fixed-resonance receivers.  ``run_scenario``
co-simulates the transient engine with the event-driven controller and
reduces the trace to per-hop metrics: lock time in carrier cycles, steady
RMS load powers, and power ratios normalized to the strongest load.
"""

from __future__ import annotations

import bisect
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .controller import (
    ControllerConfig,
    ControllerMode,
    InterceptorController,
    RegulatorConfig,
)
from .engine import (
    SimConfig,
    TraceBuffer,
    TransientEngine,
    default_trace_columns,
    energy_audit,
)
from .link import (
    CircuitTopology,
    CoilSpec,
    FixedCapacitorBranch,
    LinkError,
    LoadModel,
    MagneticLinkModel,
    SwitchedCapacitorBranch,
    TransmitterDrive,
    build_link_model,
    resonant_frequency,
    tunable_range,
)

SCHEMA_VERSION = 1
LOSSY_SWITCH_RESISTANCE = 0.05
LOSSY_DIODE_DROP = 0.7


class ScenarioError(ValueError):
    """Invalid scenario document; ``problems`` lists every violation found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class LoadConfig:
    kind: str = "resistive"
    resistance: float = 10.0
    filter_capacitance: float | None = None
    diode_drop: float = 0.0

    def to_model(self) -> LoadModel:
        return LoadModel(kind=self.kind, resistance=self.resistance,
                         filter_capacitance=self.filter_capacitance,
                         diode_drop=self.diode_drop)


@dataclass
class ControllerSettings:
    parameter_free: bool = True
    deadband_deg: float = 2.0
    gain: float = 0.15
    quantum_div: int = 256
    initial_step_frac: float = 0.5
    lock_hold: int = 3
    fixed_t_on: float | None = None


@dataclass
class InterceptorConfig:
    coil: str
    c1: float
    c2: float
    switch_on_resistance: float = 0.0
    diode_drop: float = 0.0
    load: LoadConfig = field(default_factory=LoadConfig)
    controller: ControllerSettings = field(default_factory=ControllerSettings)


@dataclass
class ReceiverConfig:
    coil: str
    capacitance: float
    load: LoadConfig = field(default_factory=LoadConfig)


@dataclass
class MetricsSettings:
    steady_cycles: int = 10
    lock_threshold: float = 0.9
    lock_hold_cycles: int = 2
    min_hop_cycles: int = 15


@dataclass
class SimSettings:
    dt: float | None = None
    steps_per_cycle: int = 1000
    event_tolerance_frac: float = 0.01  # of dt
    sample_stride: int = 4


@dataclass
class ScenarioConfig:
    coils: list[CoilSpec]
    couplings: list[dict]
    transmitter: str
    sensor: str | None
    amplitude: float
    phase: float
    hops: list[tuple[float, float]]       # (start time, frequency)
    duration: float
    interceptor: InterceptorConfig | None
    receivers: list[ReceiverConfig]
    sim: SimSettings
    metrics: MetricsSettings
    probes: list[str] | None
    cross_coupling: bool
    description: str = ""
    # Derived during load:
    dt: float = 0.0
    link: MagneticLinkModel | None = None
    tunable: tuple[float, float] | None = None
    receiver_resonances: dict[str, float] = field(default_factory=dict)
    source: dict | None = None

    def header(self) -> dict:
        """Resolved quantities echoed into every report."""
        couplings = {}
        if self.link is not None:
            names = self.link.names
            for i in range(len(names)):
                for j in range(i + 1, len(names)):
                    k = self.link.coupling(names[i], names[j])
                    if k != 0.0:
                        couplings[f"{names[i]}-{names[j]}"] = k
        return {
            "schema_version": SCHEMA_VERSION,
            "description": self.description,
            "dt": self.dt,
            "drive_amplitude": self.amplitude,
            "hops": [{"time": t, "frequency": f} for t, f in self.hops],
            "duration": self.duration,
            "coupling_coefficients": couplings,
            "receiver_resonances": self.receiver_resonances,
            "interceptor_tunable_range": list(self.tunable) if self.tunable else None,
        }


def _require(doc: dict, key: str, problems: list[str]):
    if key not in doc:
        problems.append(f"missing required field {key!r}")
        return None
    return doc[key]


def load_scenario(document) -> ScenarioConfig:
    """Parse and validate a scenario document (path, JSON text, or dict)."""
    if isinstance(document, (str, Path)):
        p = Path(document)
        if p.exists():
            doc = json.loads(p.read_text(encoding="utf-8"))
        else:
            doc = json.loads(str(document))
    else:
        doc = dict(document)

    problems: list[str] = []
    version = _require(doc, "schema_version", problems)
    if version is not None and version != SCHEMA_VERSION:
        problems.append(f"unsupported schema_version {version}")

    coils = []
    for c in doc.get("coils", []):
        try:
            coils.append(CoilSpec(name=c["name"],
                                  self_inductance=float(c["self_inductance"]),
                                  series_resistance=float(
                                      c.get("series_resistance", 0.1))))
        except (KeyError, LinkError, TypeError, ValueError) as exc:
            problems.append(f"bad coil entry {c!r}: {exc}")
    if not coils:
        problems.append("no coils defined")

    transmitter = _require(doc, "transmitter", problems)
    sensor = doc.get("sensor")
    drive = _require(doc, "drive", problems) or {}
    amplitude = float(drive.get("amplitude", 0.0))
    phase = float(drive.get("phase", 0.0))
    hops_doc = drive.get("hops", [])
    if not hops_doc:
        problems.append("drive.hops must list at least one (time, frequency) entry")
    hops = []
    for h in hops_doc:
        try:
            hops.append((float(h["time"]), float(h["frequency"])))
        except (KeyError, TypeError, ValueError):
            problems.append(f"bad hop entry {h!r}")
    if hops and hops[0][0] != 0.0:
        problems.append("first hop must start at time 0")
    for (t0, _), (t1, _) in zip(hops, hops[1:]):
        if t1 <= t0:
            problems.append("hop times must be strictly increasing")

    duration = doc.get("duration")
    if duration is None:
        problems.append("missing required field 'duration'")
        duration = 0.0
    duration = float(duration)

    def load_load(d) -> LoadConfig:
        return LoadConfig(kind=d.get("kind", "resistive"),
                          resistance=float(d.get("resistance", 10.0)),
                          filter_capacitance=(
                              float(d["filter_capacitance"])
                              if d.get("filter_capacitance") is not None else None),
                          diode_drop=float(d.get("diode_drop", 0.0)))

    interceptor = None
    if doc.get("interceptor"):
        i = doc["interceptor"]
        try:
            csettings = ControllerSettings(**i.get("controller", {}))
            interceptor = InterceptorConfig(
                coil=i["coil"], c1=float(i["c1"]), c2=float(i["c2"]),
                switch_on_resistance=float(i.get("switch_on_resistance", 0.0)),
                diode_drop=float(i.get("diode_drop", 0.0)),
                load=load_load(i.get("load", {})),
                controller=csettings)
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"bad interceptor entry: {exc}")

    receivers = []
    for r in doc.get("receivers", []):
        try:
            receivers.append(ReceiverConfig(coil=r["coil"],
                                            capacitance=float(r["capacitance"]),
                                            load=load_load(r.get("load", {}))))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"bad receiver entry {r!r}: {exc}")

    sim = SimSettings(**doc.get("sim", {}))
    metrics = MetricsSettings(**doc.get("metrics", {}))
    probes = doc.get("probes")
    cross = bool(doc.get("cross_coupling", True))

    couplings = list(doc.get("couplings", []))
    if problems:
        raise ScenarioError(problems)

    cfg = ScenarioConfig(
        coils=coils, couplings=couplings, transmitter=transmitter,
        sensor=sensor, amplitude=amplitude, phase=phase, hops=hops,
        duration=duration, interceptor=interceptor, receivers=receivers,
        sim=sim, metrics=metrics, probes=probes, cross_coupling=cross,
        description=doc.get("description", ""), source=doc)
    _resolve(cfg, problems)
    if problems:
        raise ScenarioError(problems)
    return cfg


def _resolve(cfg: ScenarioConfig, problems: list[str]) -> None:
    """Derive dt, the link model and range checks; extend ``problems``."""
    try:
        cfg.link = build_link_model(cfg.coils, _effective_couplings(cfg))
    except LinkError as exc:
        problems.append(str(exc))
        return
    names = set(cfg.link.names)
    for required in [cfg.transmitter] + ([cfg.sensor] if cfg.sensor else []):
        if required not in names:
            problems.append(f"unknown coil {required!r}")
            return
    pickup = [c.coil for c in cfg.receivers]
    if cfg.interceptor:
        pickup.append(cfg.interceptor.coil)
    for c in pickup:
        if c not in names:
            problems.append(f"unknown pickup coil {c!r}")
            return
    if len(set(pickup)) != len(pickup):
        problems.append("a coil appears in more than one pickup role")

    f_max = max(f for _, f in cfg.hops)
    dt = cfg.sim.dt if cfg.sim.dt else 1.0 / (f_max * cfg.sim.steps_per_cycle)
    if dt > 1.0 / (200.0 * f_max):
        problems.append(
            f"dt={dt:g} exceeds 1/200 of the smallest carrier period")
    cfg.dt = dt
    # Snap hop boundaries and duration to the integration grid.
    cfg.hops = [(round(t / dt) * dt, f) for t, f in cfg.hops]
    cfg.duration = round(cfg.duration / dt) * dt

    for r in cfg.receivers:
        cfg.receiver_resonances[r.coil] = resonant_frequency(
            cfg.link.coil(r.coil).self_inductance, r.capacitance)

    if cfg.interceptor:
        branch = SwitchedCapacitorBranch(c_h1=cfg.interceptor.c1,
                                         c_h2=cfg.interceptor.c2)
        l_h = cfg.link.coil(cfg.interceptor.coil).self_inductance
        cfg.tunable = tunable_range(branch, l_h)
        lo, hi = cfg.tunable
        bad = [f for _, f in cfg.hops if not lo * (1 - 1e-9) <= f <= hi * (1 + 1e-9)]
        if bad:
            problems.append(
                "hop frequencies outside the interceptor tunable range "
                f"[{lo:.1f}, {hi:.1f}] Hz: {sorted(set(bad))}")

    bounds = [t for t, _ in cfg.hops] + [cfg.duration]
    for (t0, f), t1 in zip(cfg.hops, bounds[1:]):
        span_cycles = (t1 - t0) * f
        if span_cycles < cfg.metrics.min_hop_cycles:
            problems.append(
                f"hop at {f:g} Hz spans {span_cycles:.1f} cycles; "
                f"need >= {cfg.metrics.min_hop_cycles} for a probe window")


def _effective_couplings(cfg: ScenarioConfig) -> list[dict]:
    if cfg.cross_coupling:
        return cfg.couplings
    pickups = {r.coil for r in cfg.receivers}
    if cfg.interceptor:
        pickups.add(cfg.interceptor.coil)
    return [c for c in cfg.couplings
            if not (c.get("a") in pickups and c.get("b") in pickups)]


def build_topology(cfg: ScenarioConfig, lossy: bool = False) -> CircuitTopology:
    branches: dict = {}
    loads: dict = {}
    if cfg.interceptor:
        ic = cfg.interceptor
        rsw = LOSSY_SWITCH_RESISTANCE if lossy else ic.switch_on_resistance
        drop = LOSSY_DIODE_DROP if lossy else ic.diode_drop
        branches[ic.coil] = SwitchedCapacitorBranch(
            c_h1=ic.c1, c_h2=ic.c2, switch_on_resistance=rsw, diode_drop=drop)
        loads[ic.coil] = ic.load.to_model()
    for r in cfg.receivers:
        branches[r.coil] = FixedCapacitorBranch(capacitance=r.capacitance)
        loads[r.coil] = r.load.to_model()
    drive = TransmitterDrive(amplitude=max(cfg.amplitude, 1e-30),
                             frequency=cfg.hops[0][1], phase=cfg.phase)
    return CircuitTopology(link=cfg.link, drive=drive,
                           transmitter=cfg.transmitter, branches=branches,
                           loads=loads, sensor=cfg.sensor)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class HopMetrics:
    frequency: float
    start_time: float
    end_time: float
    first_sensor_crossing: float | None
    no_field: bool
    lock_time_cycles: float | None
    steady_power: dict[str, float]
    power_ratios: dict[str, float]
    locked_t_on: float | None
    phase_error_at_lock: float | None
    controller_locked: bool
    energy: dict | None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsReport:
    header: dict
    hops: list[HopMetrics]

    def to_dict(self) -> dict:
        return {"header": self.header,
                "hops": [h.to_dict() for h in self.hops]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def power_metrics(trace: TraceBuffer, window: tuple[float, float],
                  loads: dict[str, LoadModel],
                  period: float | None = None) -> dict:
    """Steady RMS load power per coil over ``window`` plus normalized ratios.

    The window must span at least one carrier cycle when ``period`` is
    given.  Ratios are normalized to the strongest load, which reports
    exactly 1.
    """
    t0, t1 = window
    if period is not None and t1 - t0 < period * (1.0 - 1e-9):
        raise ValueError("metrics window shorter than one carrier cycle")
    idx = trace.window(t0, t1)
    if idx.size < 2:
        raise ValueError("metrics window holds fewer than two samples")
    powers = {}
    for coil, load in loads.items():
        v = trace.column(f"vload_{coil}")[idx]
        powers[coil] = float(np.mean(v * v) / load.resistance)
    peak = max(powers.values()) if powers else 0.0
    if peak > 0.0:
        ratios = {c: p / peak for c, p in powers.items()}
    else:
        ratios = {c: 0.0 for c in powers}
    return {"power": powers, "ratios": ratios}


def per_cycle_rms(trace: TraceBuffer, column: str, t_start: float,
                  period: float, t_end: float) -> np.ndarray:
    """RMS of a trace column over consecutive cycles from ``t_start``."""
    times = trace.times
    v = trace.column(column)
    n = int(math.floor((t_end - t_start) / period + 1e-12))
    edges = t_start + period * np.arange(n + 1)
    cuts = np.searchsorted(times, edges - 1e-15)
    out = np.zeros(n)
    for k in range(n):
        seg = v[cuts[k]:cuts[k + 1]]
        if seg.size >= 2:
            out[k] = float(np.sqrt(np.mean(seg * seg)))
    return out


def per_cycle_power(trace: TraceBuffer, coil: str, resistance: float,
                    t_start: float, period: float, t_end: float) -> np.ndarray:
    """Mean load power over consecutive carrier cycles from ``t_start``."""
    rms = per_cycle_rms(trace, f"vload_{coil}", t_start, period, t_end)
    return rms * rms / resistance


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

class _ControllerGates:
    """Adapts the controller's schedule to the engine's gate protocol."""

    def __init__(self, controller: InterceptorController, coil: str):
        self.controller = controller
        self.coil = coil

    def next_edge(self, after: float):
        edge = self.controller.next_edge(after)
        if edge is None:
            return None
        return (edge[0], self.coil, edge[1])


def _controller_for(cfg: ScenarioConfig) -> InterceptorController | None:
    if cfg.interceptor is None:
        return None
    cs = cfg.interceptor.controller
    init_params = None
    if not cs.parameter_free:
        l_h = cfg.link.coil(cfg.interceptor.coil).self_inductance
        init_params = (l_h, cfg.interceptor.c1, cfg.interceptor.c2)
    reg = RegulatorConfig(deadband=math.radians(cs.deadband_deg),
                          gain=cs.gain, quantum_div=cs.quantum_div,
                          initial_step_frac=cs.initial_step_frac,
                          lock_hold=cs.lock_hold)
    return InterceptorController(ControllerConfig(
        regulator=reg, init_params=init_params, fixed_t_on=cs.fixed_t_on))


def run_scenario(cfg: ScenarioConfig, lossy: bool = False,
                 controller: InterceptorController | None = None,
                 ) -> tuple[TraceBuffer, MetricsReport]:
    """Co-simulate the scenario and reduce it to a metrics report."""
    top = build_topology(cfg, lossy=lossy)
    columns = default_trace_columns(top)
    if controller is None:
        controller = _controller_for(cfg)
    watch = []
    gates = None
    if cfg.interceptor is not None:
        hk = cfg.interceptor.coil
        load_row = (f"vload_{hk}" if cfg.interceptor.load.kind == "resistive"
                    else f"i_{hk}")
        watch = [(load_row, "load"), ("v_sensor", "sensor")]
        if controller is not None:
            gates = _ControllerGates(controller, hk)

    engine = TransientEngine(
        top, SimConfig(dt=cfg.dt,
                       event_tolerance=cfg.dt * cfg.sim.event_tolerance_frac,
                       sample_stride=cfg.sim.sample_stride),
        probe_watch=watch, trace_columns=columns)

    def listener(label: str, t: float) -> None:
        if controller is None:
            return
        if label == "load":
            controller.observe_load_crossing(t)
        elif label == "sensor":
            controller.observe_sensor_crossing(t)

    events = []
    theta = cfg.phase
    bounds = [t for t, _ in cfg.hops] + [cfg.duration]
    for (t0, f), t1 in zip(cfg.hops, bounds[1:]):
        engine.drive = TransmitterDrive(
            amplitude=max(cfg.amplitude, 1e-30), frequency=f,
            phase=theta - 2.0 * math.pi * f * t0)
        events.extend(engine.run(t1, gates=gates, listener=listener))
        theta += 2.0 * math.pi * f * (t1 - t0)

    report = _build_report(cfg, top, engine.trace, events, controller, lossy)
    return engine.trace, report


def _build_report(cfg, top, trace, events, controller, lossy) -> MetricsReport:
    sensor_crossings = [e.time for e in events
                        if e.kind == "signal-zero-cross" and e.signal == "sensor"]
    loads = dict(top.loads)
    header = cfg.header()
    header["lossy_devices"] = bool(
        lossy or (cfg.interceptor and (cfg.interceptor.switch_on_resistance > 0
                                       or cfg.interceptor.diode_drop > 0)))
    hops_out = []
    bounds = [t for t, _ in cfg.hops] + [cfg.duration]
    for (t0, f), t1 in zip(cfg.hops, bounds[1:]):
        period = 1.0 / f
        fc = next((t for t in sensor_crossings if t >= t0 and t < t1), None)
        no_field = fc is None
        steady_t0 = t1 - cfg.metrics.steady_cycles * period
        steady_t0 = max(steady_t0, t0)
        pm = power_metrics(trace, (steady_t0, t1), loads, period=period)

        lock_cycles = None
        locked_t_on = None
        phase_at_lock = None
        ctrl_locked = False
        if cfg.interceptor and not no_field:
            hk = cfg.interceptor.coil
            steady = pm["power"].get(hk, 0.0)
            if steady > 0.0:
                pc = per_cycle_power(trace, hk, loads[hk].resistance,
                                     fc, period, t1)
                thr = cfg.metrics.lock_threshold * steady
                hold = cfg.metrics.lock_hold_cycles
                for k in range(len(pc) - hold + 1):
                    if np.all(pc[k:k + hold] >= thr):
                        lock_cycles = float(k)
                        break
            if controller is not None:
                for (tl, ton, dphi) in controller.lock_events:
                    if t0 <= tl < t1:
                        ctrl_locked = True
                        locked_t_on = ton
                        phase_at_lock = dphi
                        break
                if locked_t_on is None:
                    recs = [r for r in controller.history if t0 <= r.time < t1]
                    if recs:
                        locked_t_on = recs[-1].t_on
                        ctrl_locked = recs[-1].mode == ControllerMode.LOCKED

        energy = None
        if cfg.interceptor and not no_field:
            n_cycles = math.floor((t1 - steady_t0) / period)
            if n_cycles >= 1:
                try:
                    energy = energy_audit(trace, top,
                                          t1 - n_cycles * period, t1)
                except ValueError:
                    energy = None

        hops_out.append(HopMetrics(
            frequency=f, start_time=t0, end_time=t1,
            first_sensor_crossing=fc, no_field=no_field,
            lock_time_cycles=lock_cycles,
            steady_power=pm["power"], power_ratios=pm["ratios"],
            locked_t_on=locked_t_on, phase_error_at_lock=phase_at_lock,
            controller_locked=ctrl_locked, energy=energy))
    return MetricsReport(header=header, hops=hops_out)


# ---------------------------------------------------------------------------
# Frequency sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    frequency: float
    power: dict[str, float]
    ratios: dict[str, float]
    hacker_to_best_receiver: float | None
    locked_t_on: float | None
    controller_locked: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _sweep_chunk(payload) -> list[dict]:
    doc, frequencies, dwell_cycles, lossy = payload
    dt_probe = load_scenario(doc)
    # Build a continuous hop schedule over this chunk; controller state
    # persists point to point, so small steps are tracked seamlessly.
    hops = []
    t = 0.0
    for f in frequencies:
        hops.append({"time": t, "frequency": f})
        t += dwell_cycles / f
    doc = dict(doc)
    doc["drive"] = dict(doc["drive"])
    doc["drive"]["hops"] = hops
    doc["duration"] = t
    cfg = load_scenario(doc)
    _, report = run_scenario(cfg, lossy=lossy)
    rows = []
    hk = cfg.interceptor.coil if cfg.interceptor else None
    for hop in report.hops:
        rx_best = max((p for c, p in hop.steady_power.items() if c != hk),
                      default=0.0)
        hval = hop.steady_power.get(hk, 0.0) if hk else 0.0
        rows.append(SweepRow(
            frequency=hop.frequency, power=hop.steady_power,
            ratios=hop.power_ratios,
            hacker_to_best_receiver=(hval / rx_best if rx_best > 0 else None),
            locked_t_on=hop.locked_t_on,
            controller_locked=hop.controller_locked).to_dict())
    return rows


def sweep_frequencies(cfg: ScenarioConfig, f_lo: float, f_hi: float,
                      step: float, dwell_cycles: int = 24, lossy: bool = False,
                      jobs: int = 1, chunks: int = 1) -> list[dict]:
    """Steady-state powers and ratios across a frequency sweep.

    The sweep runs as a continuous hop schedule so the controller tracks
    point to point.  ``chunks`` splits the range into independent cold-start
    segments (a deterministic function of the argument, not of ``jobs``), so
    parallel execution cannot change the result.
    """
    if step <= 0.0:
        raise ScenarioError(["sweep step must be positive"])
    if cfg.interceptor is None:
        raise ScenarioError(["sweep requires an interceptor"])
    lo, hi = cfg.tunable
    if not (lo * (1 - 1e-9) <= f_lo <= hi and f_lo <= f_hi <= hi * (1 + 1e-9)):
        raise ScenarioError(
            [f"sweep range [{f_lo:g}, {f_hi:g}] outside tunable range "
             f"[{lo:.1f}, {hi:.1f}]"])
    n = int(math.floor((f_hi - f_lo) / step + 1e-9)) + 1
    frequencies = [f_lo + i * step for i in range(n)]
    doc = dict(cfg.source or {})
    doc.setdefault("metrics", {})
    chunks = max(1, min(chunks, len(frequencies)))
    size = math.ceil(len(frequencies) / chunks)
    groups = [frequencies[i:i + size] for i in range(0, len(frequencies), size)]
    payloads = [(doc, g, dwell_cycles, lossy) for g in groups]
    if jobs > 1 and len(groups) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_chunk, payloads))
    else:
        results = [_sweep_chunk(p) for p in payloads]
    rows = [row for group_rows in results for row in group_rows]
    return rows


# ---------------------------------------------------------------------------
# File outputs
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def default_probe_columns(trace: TraceBuffer) -> list[str]:
    keep = []
    for c in trace.columns:
        if c == "time_s" or c.startswith(("i_", "v1_", "v2_", "vload_",
                                          "gate_", "vdc_")) or c == "v_sensor":
            if not c.startswith("didt_"):
                keep.append(c)
    return keep


def emit_outputs(trace: TraceBuffer, report: MetricsReport, destination,
                 probes: list[str] | None = None) -> dict[str, Path]:
    """Write waveform CSV, metrics JSON and the resolved-config echo.

    Floats are written with round-trip ``repr`` so identical runs produce
    byte-identical files.
    """
    dest = Path(destination)
    dest.mkdir(parents=True, exist_ok=True)
    cols = probes if probes else default_probe_columns(trace)
    for c in cols:
        if c != "time_s" and c not in trace.columns:
            raise ValueError(f"unknown probe column {c!r}")
    if "time_s" not in cols:
        cols = ["time_s"] + list(cols)

    wave = dest / "waveforms.csv"
    with wave.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        mats = [trace.column(c) for c in cols]
        for i in range(len(trace)):
            fh.write(",".join(_fmt(m[i]) for m in mats) + "\n")

    metrics = dest / "metrics.json"
    metrics.write_text(report.to_json() + "\n", encoding="utf-8")

    resolved = dest / "scenario_resolved.json"
    resolved.write_text(json.dumps(report.header, indent=2) + "\n",
                        encoding="utf-8")
    return {"waveforms": wave, "metrics": metrics, "resolved": resolved}


def sweep_to_csv(rows: list[dict], destination) -> Path:
    dest = Path(destination)
    dest.parent.mkdir(parents=True, exist_ok=True)
    load_names = sorted({c for r in rows for c in r["power"]})
    cols = (["frequency_hz"] + [f"p_{c}_w" for c in load_names]
            + [f"ratio_{c}" for c in load_names]
            + ["hacker_to_best_receiver", "t_on_s", "locked"])
    with dest.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            vals = [_fmt(r["frequency"])]
            vals += [_fmt(r["power"].get(c, 0.0)) for c in load_names]
            vals += [_fmt(r["ratios"].get(c, 0.0)) for c in load_names]
            hb = r["hacker_to_best_receiver"]
            vals.append(_fmt(hb) if hb is not None else "nan")
            ton = r["locked_t_on"]
            vals.append(_fmt(ton) if ton is not None else "nan")
            vals.append("1" if r["controller_locked"] else "0")
            fh.write(",".join(vals) + "\n")
    return dest
