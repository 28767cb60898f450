"""Interceptor control: frequency detection, phase regulation, gate timing.

The controller consumes two streams of timestamps, the upward zero
crossings of the sense-coil voltage and of the interceptor load voltage,
and emits conduction windows for the switched compensation branch.  It
never reads amplitudes: carrier frequency comes from crossing spacing, and
the tuning error from the crossing offset between the two signals.

Sign convention: positive phase error means the load voltage crossing
arrives earlier than the sensor crossing, i.e. the loop is capacitive and
the effective capacitance must rise, so the on-time grows.  Negative means
inductive, so the on-time shrinks.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field, replace
from enum import Enum

TWO_PI = 2.0 * math.pi


class ControllerMode(str, Enum):
    DETECT = "DETECT"
    INIT = "INIT"
    TRACK = "TRACK"
    LOCKED = "LOCKED"


@dataclass(frozen=True)
class FrequencyEstimate:
    f_est: float
    last_upward_crossing: float
    crossings_used: int


@dataclass(frozen=True)
class PhaseError:
    """Wrapped crossing offset in radians, positive when the load leads."""

    delta_phi: float = 0.0
    stale: bool = False


@dataclass(frozen=True)
class RegulatorState:
    t_on: float
    step: float
    mode: ControllerMode
    lock_counter: int = 0
    last_sign: int = 0
    saturated: bool = False


@dataclass(frozen=True)
class GateWindow:
    on: float
    off: float


@dataclass
class GateSchedule:
    """Ordered, non-overlapping conduction windows; contiguous ones merge."""

    windows: list[GateWindow] = field(default_factory=list)
    clamped: bool = False

    def merged(self) -> "GateSchedule":
        out: list[GateWindow] = []
        for w in sorted(self.windows, key=lambda w: w.on):
            if w.off <= w.on:
                continue
            if out and w.on <= out[-1].off * (1.0 + 1e-12):
                out[-1] = GateWindow(out[-1].on, max(out[-1].off, w.off))
            else:
                out.append(w)
        return GateSchedule(out, self.clamped)

    def state_at(self, t: float) -> bool:
        return any(w.on <= t < w.off for w in self.windows)

    def edges_after(self, after: float) -> list[tuple[float, bool]]:
        edges = []
        for w in self.windows:
            if w.on > after:
                edges.append((w.on, True))
            if w.off > after:
                edges.append((w.off, False))
        edges.sort()
        return edges


def detect_frequency(upward_crossing_times, window: int = 3,
                     ) -> FrequencyEstimate | None:
    """Estimate the carrier from the last few upward crossings.

    Averages the periods spanned by up to ``window`` retained crossings;
    with fewer than two there is no estimate.
    """
    ts = list(upward_crossing_times)[-window:]
    if len(ts) < 2:
        return None
    f = (len(ts) - 1) / (ts[-1] - ts[0])
    return FrequencyEstimate(f_est=f, last_upward_crossing=ts[-1],
                             crossings_used=len(ts))


def init_t_on(f: float, l: float, c1: float, c2: float) -> float:
    """Parameterized on-time for carrier ``f``: the tracking start point.

    Evaluates (1 / (pi f)) * arcsin((c1+c2)/c2 * (1 - (2 pi f)^2 l c1)) with
    the arcsine argument clamped to [0, 1] and the result clamped to half a
    period, so frequencies outside the tunable range land on an endpoint.
    """
    if f <= 0.0 or l <= 0.0 or c1 <= 0.0 or c2 <= 0.0:
        raise ValueError("init_t_on requires positive f, l, c1, c2")
    arg = (c1 + c2) / c2 * (1.0 - (TWO_PI * f) ** 2 * l * c1)
    arg = min(1.0, max(0.0, arg))
    t_on = math.asin(arg) / (math.pi * f)
    return min(t_on, 1.0 / (2.0 * f))


def phase_error(vs_crossing: float, vhr_crossing: float | None,
                period: float) -> PhaseError:
    """Crossing offset wrapped into (-pi, pi].

    The load crossing must fall within one period before the sensor
    crossing, otherwise the measurement is stale and the regulator holds.
    """
    if vhr_crossing is None:
        return PhaseError(stale=True)
    lag = vs_crossing - vhr_crossing
    if lag < 0.0 or lag >= period:
        return PhaseError(stale=True)
    delta = TWO_PI * lag / period
    delta -= TWO_PI * math.ceil((delta - math.pi) / TWO_PI)
    return PhaseError(delta_phi=delta)


@dataclass
class RegulatorConfig:
    """Phase-regulator knobs (the step quantum and deadband carry defaults
    of half-period/256 and 2 degrees)."""

    deadband: float = math.radians(2.0)
    gain: float = 0.15                 # seconds of on-time per radian-period
    quantum_div: int = 256             # quantum = half_period / quantum_div
    step_floor_div: int = 16           # halving floor = quantum / this
    initial_step_frac: float = 0.5     # of the half period
    lock_hold: int = 3


def regulate_step(error: PhaseError, state: RegulatorState, f_est: float,
                  cfg: RegulatorConfig | None = None) -> RegulatorState:
    """One proportional, step-bounded on-time adjustment.

    The adjustment magnitude is min(step, gain * |dphi| * period); the step
    halves whenever the error changes sign, so large detunings binary-search
    while small ones refine below the quantum.  Inside the deadband the
    on-time holds and the lock counter advances.
    """
    cfg = cfg or RegulatorConfig()
    if error.stale:
        return state
    period = 1.0 / f_est
    half = 0.5 * period
    quantum = half / cfg.quantum_div
    dphi = error.delta_phi

    if abs(dphi) <= cfg.deadband:
        lc = state.lock_counter + 1
        mode = state.mode
        step = state.step
        if mode == ControllerMode.TRACK and lc >= cfg.lock_hold:
            mode = ControllerMode.LOCKED
            step = quantum
        return replace(state, lock_counter=lc, mode=mode, step=step,
                       saturated=False)

    sign = 1 if dphi > 0.0 else -1
    step = state.step
    if state.last_sign and sign != state.last_sign:
        step = max(step / 2.0, quantum / cfg.step_floor_div)
    mag = min(step, cfg.gain * abs(dphi) * period)
    t_new = min(max(state.t_on + sign * mag, 0.0), half)
    saturated = t_new == state.t_on
    if saturated:
        # Railed at a range edge: the carrier sits at (or beyond) the edge
        # of the tunable span, and holding the rail is the converged answer.
        lc = state.lock_counter + 1
        mode = state.mode
        if mode == ControllerMode.TRACK and lc >= cfg.lock_hold:
            mode = ControllerMode.LOCKED
            step = quantum
        return replace(state, lock_counter=lc, mode=mode, step=step,
                       last_sign=sign, saturated=True)
    return replace(state, t_on=t_new, step=step, lock_counter=0,
                   last_sign=sign, saturated=False)


def schedule_gates(f_est: float, t_on: float, reference_crossing: float,
                   cycles: int = 2) -> GateSchedule:
    """Conduction windows centered on the predicted coil-current peaks.

    One window per half cycle, each of width ``t_on``, centered a quarter
    period past ``reference_crossing`` (an upward current zero crossing)
    and every half period thereafter.  Peak centering is what makes the
    switch close at zero voltage: between conduction intervals the C2
    voltage holds while C1 keeps integrating the coil current, and the two
    voltages meet again exactly when conduction is symmetric about the
    current peak, so the steady state closes the switch with no voltage
    across it and C2 ramps between +-V_H2* half cycle by half cycle.
    On-times beyond the half period clamp, flagged on the schedule.
    """
    if f_est <= 0.0:
        raise ValueError("schedule_gates requires a positive frequency")
    half = 0.5 / f_est
    clamped = t_on > half
    width = min(max(t_on, 0.0), half)
    windows = []
    if width > 0.0:
        for k in range(2 * cycles + 1):
            c = reference_crossing + 0.5 * half + k * half
            windows.append(GateWindow(c - 0.5 * width, c + 0.5 * width))
    return GateSchedule(windows, clamped).merged()


@dataclass
class ControllerConfig:
    """Full controller configuration.

    ``init_params`` holds (inductance, c1, c2) for the parameterized
    initial on-time; None means parameter-free operation, which starts the
    tracker from half of the half period.  ``fixed_t_on`` freezes the
    on-time (no regulation), used by calibration sweeps.
    """

    regulator: RegulatorConfig = field(default_factory=RegulatorConfig)
    init_params: tuple[float, float, float] | None = None
    fixed_t_on: float | None = None
    detect_crossings: int = 3
    detect_tolerance: float = 0.01
    hop_tolerance: float = 0.02
    estimate_window: int = 3
    schedule_cycles: int = 3
    anchor_gain: float = 0.3
    # After a large retune the measured phase lags the plant by a cycle or
    # two; hold off that many ticks before trusting the next reading.
    settle_ticks: int = 1
    settle_threshold_quanta: float = 4.0


@dataclass
class TickRecord:
    time: float
    mode: ControllerMode
    f_est: float | None
    t_on: float
    delta_phi: float | None
    stale: bool


class InterceptorController:
    """Event-driven tracking FSM (DETECT -> INIT -> TRACK -> LOCKED).

    Drive it with :meth:`observe_load_crossing` and
    :meth:`observe_sensor_crossing` timestamps, in time order; read gate
    edges from :meth:`next_edge`.  A period change beyond the hop tolerance
    re-enters DETECT; losing the field freezes the state and empties the
    schedule.
    """

    def __init__(self, cfg: ControllerConfig | None = None):
        self.cfg = cfg or ControllerConfig()
        self.reg = RegulatorState(t_on=0.0, step=0.0, mode=ControllerMode.DETECT)
        self.estimate: FrequencyEstimate | None = None
        self.history: list[TickRecord] = []
        self._sensor_crossings: list[float] = []
        self._load_crossings: list[float] = []
        self._last_period: float | None = None
        self._stable_periods = 0
        self._windows: list[GateWindow] = []
        self._anchor: float | None = None
        self._misses = 0
        self._settle = 0
        self._edge_times: list[float] | None = None
        self._edge_states: list[bool] | None = None
        self.lock_events: list[tuple[float, float, float]] = []  # (t, t_on, dphi)

    # -- inputs -------------------------------------------------------------

    def observe_load_crossing(self, t: float) -> None:
        # The load signal can be small and heavily distorted while the
        # branch is detuned, producing spurious extra crossings.  Accept
        # only crossings near the predicted once-per-period grid, and
        # re-seed after persistent misses; the accepted stream drives a
        # first-order-filtered gate anchor so waveform wobble does not feed
        # straight back into the window placement.
        if self.estimate is not None and self._anchor is not None:
            period = 1.0 / self.estimate.f_est
            n = round((t - self._anchor) / period)
            pred = self._anchor + n * period
            err = t - pred
            if abs(err) > 0.3 * period or n < 1:
                self._misses += 1
                if self._misses >= 4:
                    self._anchor = None
                    self._misses = 0
                return
            self._misses = 0
            self._anchor = pred + self.cfg.anchor_gain * err
        else:
            self._anchor = t
        self._load_crossings.append(t)
        if len(self._load_crossings) > 8:
            del self._load_crossings[:-8]
        self._reschedule(anchor=self._anchor)

    def observe_sensor_crossing(self, t: float) -> None:
        self.controller_tick(t)

    # -- core tick ------------------------------------------------------—--

    def controller_tick(self, t: float) -> None:
        cfg = self.cfg
        xs = self._sensor_crossings
        xs.append(t)
        if len(xs) > 8:
            del xs[:-8]

        period = None
        if len(xs) >= 2:
            period = xs[-1] - xs[-2]
            if self._last_period is not None:
                change = abs(period - self._last_period) / self._last_period
                if change > cfg.hop_tolerance:
                    # Frequency hop: measurements spanning it are polluted.
                    self._enter_detect(keep=[t])
                    self._record(t, None, None)
                    self._last_period = None
                    return
                if change <= cfg.detect_tolerance:
                    self._stable_periods += 1
                else:
                    self._stable_periods = max(0, self._stable_periods - 1)
            self._last_period = period

        self.estimate = detect_frequency(xs, cfg.estimate_window)

        if self.reg.mode == ControllerMode.DETECT:
            if (self.estimate is not None
                    and len(xs) >= cfg.detect_crossings
                    and self._stable_periods >= 1):
                self._initialise(t)
            self._record(t, None, None)
            return

        if self._settle > 0:
            self._settle -= 1
            self._record(t, None, None)
            return
        pe = self._measure_phase(t)
        before = self.reg.t_on
        self.reg = regulate_step(pe, self.reg, self.estimate.f_est,
                                 cfg.regulator)
        quantum = 0.5 / (self.estimate.f_est * cfg.regulator.quantum_div)
        if abs(self.reg.t_on - before) > cfg.settle_threshold_quanta * quantum:
            self._settle = cfg.settle_ticks
        if self.cfg.fixed_t_on is not None:
            self.reg = replace(self.reg, t_on=self.cfg.fixed_t_on)
        if (self.reg.mode == ControllerMode.LOCKED
                and (not self.lock_events
                     or self.lock_events[-1][0] < self._detect_epoch)):
            self.lock_events.append((t, self.reg.t_on,
                                     0.0 if pe.stale else pe.delta_phi))
        self._reschedule()
        self._record(t, None if pe.stale else pe.delta_phi, pe.stale)

    _detect_epoch = -math.inf

    def _initialise(self, t: float) -> None:
        f = self.estimate.f_est
        half = 0.5 / f
        if self.cfg.fixed_t_on is not None:
            t_on = min(self.cfg.fixed_t_on, half)
        elif self.cfg.init_params is not None:
            t_on = init_t_on(f, *self.cfg.init_params)
        else:
            t_on = 0.5 * half
        self.reg = RegulatorState(
            t_on=t_on,
            step=self.cfg.regulator.initial_step_frac * half,
            mode=ControllerMode.INIT)
        self.history.append(TickRecord(t, ControllerMode.INIT, f, t_on,
                                       None, True))
        self.reg = replace(self.reg, mode=ControllerMode.TRACK)
        self._reschedule()

    def _enter_detect(self, keep):
        self._detect_epoch = keep[-1] if keep else -math.inf
        self._sensor_crossings = list(keep)
        self._stable_periods = 0
        self.estimate = None
        self.reg = replace(self.reg, mode=ControllerMode.DETECT,
                           lock_counter=0, last_sign=0)
        self._settle = 0
        self._misses = 0
        self._windows = [w for w in self._windows if w.on <= self._detect_epoch]
        self._anchor = None
        self._edge_times = None

    def _measure_phase(self, t_sensor: float) -> PhaseError:
        period = 1.0 / self.estimate.f_est
        latest = None
        for tc in reversed(self._load_crossings):
            if tc <= t_sensor:
                latest = tc
                break
        return phase_error(t_sensor, latest, period)

    def _record(self, t, dphi, stale):
        self.history.append(TickRecord(
            t, self.reg.mode,
            self.estimate.f_est if self.estimate else None,
            self.reg.t_on, dphi, bool(stale) if stale is not None else True))

    # -- gate schedule ----------------------------------------------------—

    def _reschedule(self, anchor: float | None = None) -> None:
        if self.reg.mode in (ControllerMode.DETECT, ControllerMode.INIT):
            return
        if self.estimate is None or not self._load_crossings:
            return
        self._edge_times = None
        if self.reg.t_on <= 0.0:
            if anchor is not None:
                self._windows = [w for w in self._windows if w.on <= anchor]
            return
        ref = anchor if anchor is not None else self._load_crossings[-1]
        sched = schedule_gates(self.estimate.f_est, self.reg.t_on, ref,
                               cycles=self.cfg.schedule_cycles)
        # Windows already begun keep their committed geometry.
        kept = [w for w in self._windows if w.on < ref]
        fresh = [w for w in sched.windows if w.on >= ref]
        horizon = ref - 2.0 / self.estimate.f_est
        self._windows = ([w for w in kept if w.off >= horizon] + fresh)

    @property
    def schedule(self) -> GateSchedule:
        return GateSchedule(list(self._windows)).merged()

    def next_edge(self, after: float) -> tuple[float, bool] | None:
        if self._edge_times is None:
            edges = self.schedule.edges_after(-math.inf)
            self._edge_times = [e[0] for e in edges]
            self._edge_states = [e[1] for e in edges]
        i = bisect.bisect_right(self._edge_times, after)
        if i >= len(self._edge_times):
            return None
        return (self._edge_times[i], self._edge_states[i])
