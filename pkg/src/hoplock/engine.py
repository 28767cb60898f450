"""Fixed-step transient integration with event localization.

The circuit is piecewise linear: between discrete events (gate edges, diode
commutations) the state obeys dx/dt = A x + B u(t) for constant matrices.
Each interval is advanced with the classical 4th-order Runge-Kutta rule.
Because A and B are constant, one RK4 step is a fixed affine map of the
state and the three input samples, which we precompute per (configuration,
step size) and reuse; this is algebraically identical to evaluating the
four stages.

Events are located by bisection over re-integrated sub-steps: gate edges
are known times, diode commutations and probe zero-crossings are found from
sign changes of monitor signals.  State continuity holds across every
event: inductor currents and capacitor voltages never jump, with one
documented exception, an ideal (zero-resistance) switch gating on against a
forward-biased diode, where the capacitors equalize charge instantaneously
as in the physical small-resistance limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Protocol

import numpy as np

from .link import (
    CircuitTopology,
    ConductionState,
    SwitchedCapacitorBranch,
    SystemMatrices,
    TransmitterDrive,
    assemble_state_space,
)

# RK4 stays stable for |eig(A)|*h below ~2.8 on both the real and the
# imaginary axis; steps are subdivided to keep a margin below that.
_STABILITY_MARGIN = 2.0
_PROP_CACHE_LIMIT = 64


class EngineError(RuntimeError):
    """Raised when integration fails (non-finite state, commutation livelock)."""


@dataclass
class SimConfig:
    """Integration settings.

    ``dt`` is the base step; scenario validation keeps it at or below 1/200
    of the smallest carrier period (default 1/1000).  ``event_tolerance``
    bounds the time error of localized events.
    """

    dt: float
    event_tolerance: float | None = None
    max_step_subdivisions: int = 64
    max_events_per_step: int = 64
    sample_stride: int = 1

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.event_tolerance is None:
            self.event_tolerance = self.dt / 100.0
        if not 0.0 < self.event_tolerance < self.dt:
            raise ValueError("event_tolerance must lie in (0, dt)")
        if self.sample_stride < 1:
            raise ValueError("sample_stride must be >= 1")


@dataclass
class CircuitState:
    """Integrator state snapshot: time plus the packed state vector."""

    time: float
    x: np.ndarray

    def copy(self) -> "CircuitState":
        return CircuitState(self.time, self.x.copy())


@dataclass(frozen=True)
class Event:
    kind: str  # gate-on | gate-off | diode-commutation | signal-zero-cross
    time: float
    signal: str


class GateSource(Protocol):
    """Supplier of commanded gate edges for switched branches."""

    def next_edge(self, after: float) -> tuple[float, str, bool] | None:
        """Earliest edge strictly after ``after`` as (time, coil, closed)."""


class TraceBuffer:
    """Uniformly sampled run record: strictly increasing, constant interval."""

    def __init__(self, columns: Iterable[str], sample_interval: float):
        self.columns = tuple(columns)
        self.sample_interval = float(sample_interval)
        self._index = {name: i for i, name in enumerate(self.columns)}
        self._times = np.empty(1024)
        self._data = np.empty((1024, len(self.columns)))
        self._n = 0

    def __len__(self) -> int:
        return self._n

    def append(self, t: float, row: np.ndarray) -> None:
        if self._n == self._times.shape[0]:
            self._times = np.concatenate([self._times, np.empty_like(self._times)])
            self._data = np.concatenate([self._data, np.empty_like(self._data)])
        self._times[self._n] = t
        self._data[self._n] = row
        self._n += 1

    @property
    def times(self) -> np.ndarray:
        return self._times[:self._n]

    @property
    def data(self) -> np.ndarray:
        return self._data[:self._n]

    def column(self, name: str) -> np.ndarray:
        return self._data[:self._n, self._index[name]]

    def window(self, t0: float, t1: float) -> np.ndarray:
        """Indices of samples with t0 <= t <= t1 (float-noise slack only)."""
        t = self.times
        slack = 1e-9 * self.sample_interval
        i0 = int(np.searchsorted(t, t0 - slack, side="left"))
        i1 = int(np.searchsorted(t, t1 + slack, side="right"))
        return np.arange(i0, i1)


# ---------------------------------------------------------------------------
# One-step integration
# ---------------------------------------------------------------------------

def rk4_step(a: np.ndarray, b: np.ndarray, u: Callable[[float], np.ndarray],
             t: float, x: np.ndarray, h: float) -> np.ndarray:
    """Classical 4th-order step for dx/dt = a x + b u(t), evaluated stagewise."""
    k1 = a @ x + b @ u(t)
    k2 = a @ (x + 0.5 * h * k1) + b @ u(t + 0.5 * h)
    k3 = a @ (x + 0.5 * h * k2) + b @ u(t + 0.5 * h)
    k4 = a @ (x + h * k3) + b @ u(t + h)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_propagator(a: np.ndarray, b: np.ndarray,
                   h: float) -> tuple[np.ndarray, np.ndarray]:
    """Affine form of one RK4 step for a constant-coefficient system.

    Returns (phi, g) with x+ = phi @ x + g @ [u(t); u(t+h/2); u(t+h)].
    Identical algebra to :func:`rk4_step`, collected in powers of A*h.
    """
    n = a.shape[0]
    eye = np.eye(n)
    ah = a * h
    ah2 = ah @ ah
    ah3 = ah2 @ ah
    phi = eye + ah + ah2 / 2.0 + ah3 / 6.0 + (ah2 @ ah2) / 24.0
    g1 = (h / 6.0) * (eye + ah + ah2 / 2.0 + ah3 / 4.0) @ b
    g2 = (h / 6.0) * (4.0 * eye + 2.0 * ah + ah2 / 2.0) @ b
    g3 = (h / 6.0) * b
    return phi, np.hstack([g1, g2, g3])


def integrate_interval(state: CircuitState, matrices: SystemMatrices,
                       drive: TransmitterDrive, dt: float) -> CircuitState:
    """Advance one event-free interval with a single classical RK4 step."""
    x = rk4_step(matrices.a, matrices.b, drive.input_vector, state.time,
                 state.x, dt)
    if not np.all(np.isfinite(x)):
        raise EngineError(
            f"non-finite state after step at t={state.time:.9e} (dt={dt:.3e})")
    return CircuitState(state.time + dt, x)


def locate_event(signal: Callable[[float], float], t_lo: float, t_hi: float,
                 tol: float, max_iter: int = 200) -> float:
    """Bisect a sign change of ``signal`` on [t_lo, t_hi] to within ``tol``."""
    f_lo = signal(t_lo)
    f_hi = signal(t_hi)
    if f_lo == 0.0:
        return t_lo
    if f_lo * f_hi > 0.0:
        raise EngineError(
            f"no sign change on [{t_lo:.9e}, {t_hi:.9e}] "
            f"({f_lo:.3e} -> {f_hi:.3e})")
    it = 0
    while t_hi - t_lo > tol:
        it += 1
        if it > max_iter:
            raise EngineError("event bisection failed to converge")
        mid = 0.5 * (t_lo + t_hi)
        f_mid = signal(mid)
        if f_lo * f_mid <= 0.0:
            t_hi = mid
        else:
            t_lo, f_lo = mid, f_mid
    return t_hi


def _bisect_upward(signal: Callable[[float], float], t_lo: float,
                   t_hi: float, tol: float) -> float:
    """Bisection for a known upward crossing: the caller has already
    established the endpoint signs, so endpoints are never re-evaluated and
    last-ulp disagreements between evaluation paths cannot raise."""
    while t_hi - t_lo > tol:
        mid = 0.5 * (t_lo + t_hi)
        if signal(mid) > 0.0:
            t_hi = mid
        else:
            t_lo = mid
    return t_hi


def sensor_voltage(didt: dict[str, float], link, sensor: str) -> float:
    """Open-coil sense voltage: sum of mutual-flux derivatives.

    ``didt`` maps coil names (transmitter included) to their current
    derivative; coils absent from the map contribute nothing.
    """
    si = link.index(sensor)
    v = 0.0
    for name, d in didt.items():
        if name == sensor:
            continue
        v += link.mutuals[link.index(name), si] * d
    return v


# ---------------------------------------------------------------------------
# Monitors
# ---------------------------------------------------------------------------

# Tie-break priority at equal localized times: external gate commands come
# first (handled as exact segment boundaries), then diode commutations,
# then probe crossings, load probe before sensor probe so a same-instant
# pair measures zero phase error.
_PRIO_DIODE = 1
_PRIO_PROBE = 2


@dataclass(frozen=True)
class _Monitor:
    name: str
    priority: int
    kind: str        # scc-enter | scc-exit | rect-enter | rect-exit | probe
    coil: str
    direction: int   # entry/conduction direction; 0 for probes
    row: str         # output row evaluated as the signal
    label: str = ""  # probe label passed to the listener


class TransientEngine:
    """Integrates one topology through time, managing conduction changes.

    A fresh engine starts from the topology's initial state; ``run`` may be
    called repeatedly with increasing ``t_end`` (the scenario harness does
    so per frequency-hop segment, swapping ``drive`` in between).
    """

    def __init__(self, topology: CircuitTopology, config: SimConfig,
                 probe_watch: Iterable[tuple[str, str]] = (),
                 trace_columns: Iterable[str] | None = None):
        self.topology = topology
        self.config = config
        self.layout = topology.layout()
        self.drive = topology.drive
        self._x = topology.initial_state()
        self._k = 0       # base-grid index
        self._frac = 0.0  # offset past the last grid point (mid-step only)
        self._cond = ConductionState.initial(topology, self.layout)
        self._cache: dict[ConductionState, dict] = {}
        self._probe_watch = tuple(probe_watch)
        self._events_this_step = 0
        self._gate_cursor = -math.inf
        self._last_fire: dict[str, float] = {}
        # Cold-start bookkeeping: a switched branch whose previous window
        # passed without any conduction gets an equalizing boot closure.
        self._scc_idle = {c: 1 for c in self.layout.scc_coils}
        self._scc_conducted = {c: False for c in self.layout.scc_coils}
        self._started = False
        self._trace: TraceBuffer | None = None
        self._record_columns: tuple[str, ...] = tuple(trace_columns or ())
        if trace_columns is not None:
            self._trace = TraceBuffer(
                self._record_columns, config.dt * config.sample_stride)
        # Scalar drive constants for the hot loop; refreshed in run().
        self._dw = 0.0
        self._daw = 0.0
        self._dph = 0.0

    # -- public accessors ---------------------------------------------------

    @property
    def time(self) -> float:
        return self._k * self.config.dt + self._frac

    @property
    def state(self) -> CircuitState:
        return CircuitState(self.time, self._x.copy())

    @property
    def conduction(self) -> ConductionState:
        return self._cond

    @property
    def trace(self) -> TraceBuffer | None:
        return self._trace

    def value(self, name: str, t: float | None = None) -> float:
        sys = self._system(self._cond)["sys"]
        u = self.drive.input_vector(self.time if t is None else t)
        return sys.output(name, self._x, u)

    # -- configuration cache --------------------------------------------—--

    def _system(self, cond: ConductionState) -> dict:
        entry = self._cache.get(cond)
        if entry is None:
            sys = assemble_state_space(self.topology, cond)
            eig = np.linalg.eigvals(sys.a)
            rho = float(np.max(np.abs(eig))) if eig.size else 0.0
            monitors = self._build_monitors(cond, sys)
            mc = (np.array([sys.outputs[m.row][0] for m in monitors])
                  if monitors else np.zeros((0, self.layout.size)))
            md = (np.array([sys.outputs[m.row][1] for m in monitors])
                  if monitors else np.zeros((0, 2)))
            entry = {"sys": sys, "rho": rho, "monitors": monitors,
                     "mc": mc, "md0": md[:, 0].copy(), "md1": md[:, 1].copy(),
                     "prop": {}, "record": self._record_program(sys)}
            self._cache[cond] = entry
        return entry

    def _propagator(self, entry: dict, h: float):
        prop = entry["prop"].get(h)
        if prop is None:
            phi, g = rk4_propagator(entry["sys"].a, entry["sys"].b, h)
            # u = [dI_tx/dt, 1]: split the input map into the derivative
            # columns and the summed constant column.
            prop = (phi, np.ascontiguousarray(g[:, 0::2]),
                    g[:, 1::2].sum(axis=1))
            if len(entry["prop"]) < _PROP_CACHE_LIMIT:
                entry["prop"][h] = prop
        return prop

    def _substeps(self, entry: dict, h: float) -> int:
        n = max(1, math.ceil(h * entry["rho"] / _STABILITY_MARGIN))
        if n > self.config.max_step_subdivisions:
            raise EngineError(
                f"configuration too stiff: {n} substeps needed for h={h:.3e}")
        return n

    def _build_monitors(self, cond: ConductionState,
                        sys: SystemMatrices) -> list[_Monitor]:
        mon: list[_Monitor] = []
        for i, c in enumerate(self.layout.scc_coils):
            if cond.scc[i] != 0:
                mon.append(_Monitor(f"sccx_{c}", _PRIO_DIODE, "scc-exit", c,
                                    cond.scc[i], f"sccx_{c}"))
            elif cond.gate[i]:
                mon.append(_Monitor(f"sccp_{c}", _PRIO_DIODE, "scc-enter", c,
                                    +1, f"sccp_{c}"))
                mon.append(_Monitor(f"sccn_{c}", _PRIO_DIODE, "scc-enter", c,
                                    -1, f"sccn_{c}"))
        for i, c in enumerate(self.layout.rect_coils):
            if cond.rect[i] != 0:
                mon.append(_Monitor(f"rectx_{c}", _PRIO_DIODE, "rect-exit", c,
                                    cond.rect[i], f"rectx_{c}"))
            else:
                mon.append(_Monitor(f"rectp_{c}", _PRIO_DIODE, "rect-enter", c,
                                    +1, f"rectp_{c}"))
                mon.append(_Monitor(f"rectn_{c}", _PRIO_DIODE, "rect-enter", c,
                                    -1, f"rectn_{c}"))
        for row, label in self._probe_watch:
            if row in sys.outputs:
                mon.append(_Monitor(f"probe_{label}", _PRIO_PROBE, "probe",
                                    "", 0, row, label))
        return mon

    def _record_program(self, sys: SystemMatrices):
        """Precompiled trace-row builder for one configuration."""
        specials: list[tuple[int, str, object]] = []
        out_cols: list[int] = []
        out_c: list[np.ndarray] = []
        out_d: list[np.ndarray] = []
        for j, name in enumerate(self._record_columns):
            if name == "time_s":
                specials.append((j, "time", None))
            elif name == "i_tx":
                specials.append((j, "i_tx", None))
            elif name in sys.outputs:
                out_cols.append(j)
                c, d = sys.outputs[name]
                out_c.append(c)
                out_d.append(d)
            elif name.startswith("gate_"):
                specials.append((j, "gate",
                                 self.layout.scc_coils.index(name[5:])))
            elif name.startswith("rectdir_"):
                specials.append((j, "rectdir",
                                 self.layout.rect_coils.index(name[8:])))
            elif name in self.layout.state_names:
                specials.append((j, "state",
                                 self.layout.state_names.index(name)))
            else:
                raise KeyError(f"unknown trace column {name!r}")
        if out_cols:
            rc = np.array(out_c)
            rd = np.array(out_d)
            return (np.array(out_cols), rc, rd[:, 0].copy(),
                    rd[:, 1].copy(), specials)
        return (np.array([], dtype=int), np.zeros((0, self.layout.size)),
                np.zeros(0), np.zeros(0), specials)

    # -- integration pieces ---------------------------------------------—--

    def _didt(self, t: float) -> float:
        return self._daw * math.cos(self._dw * t + self._dph)

    def _advance(self, entry: dict, t0: float, x0: np.ndarray, h: float,
                 ) -> tuple[np.ndarray, list[tuple[float, np.ndarray]]]:
        """Integrate h forward; returns endpoint and micro-step endpoints."""
        if h <= 0.0:
            return x0, []
        nsub = self._substeps(entry, h)
        hs = h / nsub
        phi, gd, gc = self._propagator(entry, hs)
        micro = []
        x = x0
        t = t0
        aw, w, ph = self._daw, self._dw, self._dph
        half = 0.5 * hs
        for _ in range(nsub):
            d = np.array([aw * math.cos(w * t + ph),
                          aw * math.cos(w * (t + half) + ph),
                          aw * math.cos(w * (t + hs) + ph)])
            x = phi @ x + gd @ d + gc
            t += hs
            micro.append((t, x))
        if not math.isfinite(float(x @ x)):
            raise EngineError(f"non-finite state at t={t:.9e}")
        return x, micro

    def _integrate_to(self, entry: dict, t0: float, x0: np.ndarray,
                      t1: float) -> np.ndarray:
        """Trial integration (event search); stagewise RK4, uncached."""
        if t1 <= t0:
            return x0
        h = t1 - t0
        nsub = self._substeps(entry, h)
        hs = h / nsub
        a, b = entry["sys"].a, entry["sys"].b
        x = x0
        t = t0
        for _ in range(nsub):
            x = rk4_step(a, b, self.drive.input_vector, t, x, hs)
            t += hs
        return x

    def _monitor_values(self, entry: dict, t: float, x: np.ndarray) -> np.ndarray:
        return entry["mc"] @ x + entry["md0"] * self._didt(t) + entry["md1"]

    # -- event application ----------------------------------------------—--

    def _scc_index(self, coil: str) -> int:
        return self.layout.scc_coils.index(coil)

    def _rect_index(self, coil: str) -> int:
        return self.layout.rect_coils.index(coil)

    def _apply_monitor(self, mon: _Monitor, t: float) -> Event | None:
        """Apply the discrete change for a fired monitor; None if ignored."""
        if mon.kind == "probe":
            return Event("signal-zero-cross", t, mon.label)
        if mon.kind == "scc-enter":
            i = self._scc_index(mon.coil)
            br = self.topology.branches[mon.coil]
            if br.switch_on_resistance == 0.0:
                # Lockstep conduction is valid only if the diode would carry
                # forward current; the crossing direction guarantees it
                # because v1 - v2 moves with the coil current while blocked.
                i_h = self._x[self.layout.current_index[mon.coil]]
                if mon.direction * i_h < 0.0:
                    return None
            self._cond = self._cond.with_scc(i, mon.direction)
            self._scc_conducted[mon.coil] = True
            return Event("diode-commutation", t, mon.name)
        if mon.kind == "scc-exit":
            self._cond = self._cond.with_scc(self._scc_index(mon.coil), 0)
            return Event("diode-commutation", t, mon.name)
        if mon.kind == "rect-enter":
            self._cond = self._cond.with_rect(self._rect_index(mon.coil),
                                              mon.direction)
            return Event("diode-commutation", t, mon.name)
        if mon.kind == "rect-exit":
            self._cond = self._cond.with_rect(self._rect_index(mon.coil), 0)
            return Event("diode-commutation", t, mon.name)
        raise AssertionError(mon.kind)

    def _apply_gate(self, coil: str, closed: bool, t: float) -> Event | None:
        i = self._scc_index(coil)
        if self._cond.gate[i] == closed:
            return None
        self._cond = self._cond.with_gate(i, closed)
        if closed:
            self._recheck_entries(t, boot_coils={coil})
        else:
            if self._scc_conducted[coil]:
                self._scc_idle[coil] = 0
            else:
                self._scc_idle[coil] += 1
            self._scc_conducted[coil] = False
        return Event("gate-on" if closed else "gate-off", t, coil)

    def _recheck_entries(self, t: float, boot_coils: set | frozenset = frozenset(),
                         ) -> None:
        """Immediate conduction starts after a discrete change.

        A forward-biased path begins conducting at once when doing so is
        continuous: always for a resistive switch, and for the ideal switch
        when the boundary is met to within rounding.  Otherwise the ideal
        branch waits for a boundary crossing, which is the natural
        zero-voltage turn-on the switched capacitor settles into.  The one
        exception is a cold start: if the previous window passed with no
        conduction at all (the held C2 voltage is parked outside the reach
        of C1's swing), a gate closing in ``boot_coils`` conducts through
        the small equalization resistance until the capacitors meet, like
        the physical device inrush.  A bridge whose forward voltage jumped
        past threshold starts from zero current.
        """
        u = self.drive.input_vector(t)
        for i, c in enumerate(self.layout.scc_coils):
            if not self._cond.gate[i] or self._cond.scc[i] != 0:
                continue
            br = self.topology.branches[c]
            sys = self._system(self._cond)["sys"]
            gp = sys.output(f"sccp_{c}", self._x, u)
            gn = sys.output(f"sccn_{c}", self._x, u)
            s = +1 if gp > 0.0 else (-1 if gn > 0.0 else 0)
            if s == 0:
                continue
            g = gp if s > 0 else gn
            if br.switch_on_resistance == 0.0:
                iv1, iv2 = self.layout.cap_indices[c]
                v1, v2 = self._x[iv1], self._x[iv2]
                vscale = max(1.0, abs(v1), abs(v2))
                i_h = self._x[self.layout.current_index[c]]
                if g > 1e-9 * vscale:
                    if c in boot_coils and self._scc_idle[c] >= 1:
                        self._cond = self._cond.with_scc(i, 2 * s)
                        self._scc_conducted[c] = True
                    continue
                if s * i_h < 0.0:
                    continue
            self._cond = self._cond.with_scc(i, s)
            self._scc_conducted[c] = True
        for i, c in enumerate(self.layout.rect_coils):
            if self._cond.rect[i] != 0:
                continue
            sys = self._system(self._cond)["sys"]
            fp = sys.output(f"rectp_{c}", self._x, u)
            fn = sys.output(f"rectn_{c}", self._x, u)
            if fp > 0.0:
                self._cond = self._cond.with_rect(i, +1)
            elif fn > 0.0:
                self._cond = self._cond.with_rect(i, -1)

    # -- sampling ---------------------------------------------------------—

    def _record(self, entry: dict) -> None:
        if self._trace is None:
            return
        cols, rc, rd0, rd1, specials = entry["record"]
        t = self.time
        row = np.empty(len(self._record_columns))
        if cols.size:
            row[cols] = rc @ self._x + rd0 * self._didt(t) + rd1
        for j, kind, payload in specials:
            if kind == "time":
                row[j] = t
            elif kind == "i_tx":
                row[j] = self.drive.current(t)
            elif kind == "gate":
                row[j] = 1.0 if self._cond.gate[payload] else 0.0
            elif kind == "rectdir":
                row[j] = float(self._cond.rect[payload])
            else:
                row[j] = self._x[payload]
        self._trace.append(t, row)

    # -- main loop ----------------------------------------------------------

    def run(self, t_end: float, gates: GateSource | None = None,
            listener: Callable[[str, float], None] | None = None) -> list[Event]:
        """Advance to ``t_end``, emitting events in time order.

        Probe crossings are reported to ``listener(label, time)`` as they
        occur, so a controller can update the gate source mid-run.
        """
        dt = self.config.dt
        tol = self.config.event_tolerance
        stride = self.config.sample_stride
        self._dw = 2.0 * math.pi * self.drive.frequency
        self._daw = self.drive.amplitude * self._dw
        self._dph = self.drive.phase
        events: list[Event] = []
        if not self._started:
            self._started = True
            self._record(self._system(self._cond))
        vals_at = None  # (cond, time) for which _last_vals is valid
        last_vals = None

        while True:
            t = self.time
            if t >= t_end - 1e-12 * dt:
                break
            grid_next = (self._k + 1) * dt
            on_grid = self._frac == 0.0
            seg_end = min(grid_next, t_end)

            pending_gate = None
            if gates is not None:
                edge = gates.next_edge(self._gate_cursor)
                # Apply edges already due (late schedule updates).
                while edge is not None and edge[0] <= t:
                    self._gate_cursor = edge[0]
                    ev = self._apply_gate(edge[1], edge[2], t)
                    if ev is not None:
                        events.append(ev)
                        vals_at = None
                    edge = gates.next_edge(self._gate_cursor)
                if edge is not None and edge[0] <= seg_end:
                    pending_gate = edge
                    seg_end = edge[0]

            entry = self._system(self._cond)
            if vals_at == (self._cond, t) and last_vals is not None:
                vals0 = last_vals
            else:
                vals0 = self._monitor_values(entry, t, self._x)
            full_step = on_grid and seg_end == grid_next and seg_end <= t_end
            h = dt if full_step else seg_end - t
            x_new, micro = self._advance(entry, t, self._x, h)
            seg_t_end = t + h

            fired, end_vals = self._scan_crossings(entry, t, self._x, vals0,
                                                   micro, tol)
            if fired is not None:
                t_ev, x_ev, mons = fired
                self._x = x_ev
                self._frac = t_ev - self._k * dt
                vals_at = None
                self._events_this_step += len(mons)
                if self._events_this_step > self.config.max_events_per_step:
                    raise EngineError(
                        f"commutation livelock near t={t_ev:.9e} "
                        f"({self._events_this_step} events in one base step)")
                for mon in mons:
                    ev = self._apply_monitor(mon, t_ev)
                    if ev is not None:
                        events.append(ev)
                        if ev.kind == "diode-commutation":
                            self._recheck_entries(t_ev)
                        if ev.kind == "signal-zero-cross" and listener:
                            listener(ev.signal, t_ev)
                continue

            self._x = x_new
            last_vals = end_vals if end_vals is not None else vals0
            if pending_gate is not None:
                self._frac = seg_end - self._k * dt
                self._gate_cursor = pending_gate[0]
                ev = self._apply_gate(pending_gate[1], pending_gate[2], seg_end)
                vals_at = None
                if ev is not None:
                    events.append(ev)
                if seg_end == grid_next:
                    self._k += 1
                    self._frac = 0.0
                    self._events_this_step = 0
                    if self._k % stride == 0:
                        self._record(self._system(self._cond))
            elif full_step or seg_end == grid_next:
                self._k += 1
                self._frac = 0.0
                self._events_this_step = 0
                vals_at = (self._cond, self.time)
                if self._k % stride == 0:
                    self._record(entry)
            else:
                self._frac = seg_end - self._k * dt
                vals_at = (self._cond, self.time)
        return events

    def _scan_crossings(self, entry: dict, t0: float, x0: np.ndarray,
                        vals0: np.ndarray, micro, tol: float):
        """Earliest upward monitor crossing inside the integrated interval.

        Monitors fire when their signal moves from <= 0 to > 0; ties are
        broken by priority then name for determinism.  Returns
        ((time, state, fired monitors) or None, endpoint values or None).
        """
        monitors = entry["monitors"]
        if not monitors or not micro:
            return None, None
        prev_t, prev_x, prev_vals = t0, x0, vals0
        for (t_m, x_m) in micro:
            vals = self._monitor_values(entry, t_m, x_m)
            up = (prev_vals <= 0.0) & (vals > 0.0)
            if up.any():
                hits = []
                for idx in np.nonzero(up)[0]:
                    mon = monitors[idx]

                    def sig(tau, _c=entry["mc"][idx], _d0=entry["md0"][idx],
                            _d1=entry["md1"][idx], _t0=prev_t, _x0=prev_x):
                        x_tau = self._integrate_to(entry, _t0, _x0, tau)
                        return float(_c @ x_tau + _d0 * self._didt(tau) + _d1)

                    t_cross = _bisect_upward(sig, prev_t, t_m, tol)
                    # Refractory: rounding noise around a localized probe
                    # crossing must not fire the same monitor twice.
                    if t_cross <= self._last_fire.get(mon.name, -math.inf) \
                            + 4.0 * tol:
                        continue
                    hits.append((t_cross, mon.priority, mon.name, mon))
                if hits:
                    hits.sort(key=lambda h: (h[0], h[1], h[2]))
                    t_ev = hits[0][0]
                    fired = [h[3] for h in hits if h[0] == t_ev]
                    for h in hits:
                        if h[0] == t_ev:
                            self._last_fire[h[2]] = t_ev
                    x_ev = self._integrate_to(entry, prev_t, prev_x, t_ev)
                    return (t_ev, x_ev, fired), None
            prev_t, prev_x, prev_vals = t_m, x_m, vals
        return None, vals


def advance_with_events(state: CircuitState, topology: CircuitTopology,
                        gate_schedule: GateSource | None, t_end: float,
                        config: SimConfig | None = None,
                        trace_columns: Iterable[str] | None = None,
                        ) -> tuple[CircuitState, list[Event], TransientEngine]:
    """Integrate ``topology`` from ``state`` (grid-aligned time) to ``t_end``.

    The engine is also returned so callers can inspect the trace and the
    final conduction configuration.
    """
    if config is None:
        config = SimConfig(dt=1.0 / (topology.drive.frequency * 1000.0))
    engine = TransientEngine(topology, config, trace_columns=trace_columns)
    engine._x = state.x.copy()
    engine._k = int(round(state.time / config.dt))
    events = engine.run(t_end, gates=gate_schedule)
    return engine.state, events, engine


# ---------------------------------------------------------------------------
# Energy accounting
# ---------------------------------------------------------------------------

def default_trace_columns(top: CircuitTopology) -> tuple[str, ...]:
    """Every column the metrics and audits can consume."""
    lay = top.layout()
    cols = ["time_s", "i_tx", "didt_tx"]
    for c in lay.coils:
        cols += [f"i_{c}", f"didt_{c}"]
    for c in lay.coils:
        br = top.branches[c]
        if isinstance(br, SwitchedCapacitorBranch):
            cols += [f"v1_{c}", f"v2_{c}", f"i2_{c}", f"gate_{c}"]
        else:
            cols += [f"vc_{c}"]
    for c in lay.rect_coils:
        cols += [f"vdc_{c}", f"rectdir_{c}"]
    for c in lay.coils:
        cols += [f"vload_{c}"]
    if top.sensor is not None:
        cols += ["v_sensor"]
    return tuple(cols)


def energy_audit(trace: TraceBuffer, top: CircuitTopology, t0: float,
                 t1: float, period: float | None = None) -> dict:
    """Energy bookkeeping over a trace window.

    If ``period`` is given the window must span an integer number of carrier
    cycles.  Sources, stores and sinks are tallied so the residual exposes
    integration or modelling error:

        source = delta_stored + dissipated + residual
    """
    if period is not None:
        cycles = (t1 - t0) / period
        if abs(cycles - round(cycles)) > 1e-6 * max(1.0, cycles):
            raise ValueError("audit window must cover an integer cycle count")
    idx = trace.window(t0, t1)
    if idx.size < 2:
        raise ValueError("audit window holds fewer than two samples")
    t = trace.times[idx]
    lay = top.layout()
    link = top.link

    names = [top.transmitter] + list(lay.coils)
    cur = np.column_stack([trace.column("i_tx")[idx]] +
                          [trace.column(f"i_{c}")[idx] for c in lay.coils])
    didt = np.column_stack([trace.column("didt_tx")[idx]] +
                           [trace.column(f"didt_{c}")[idx] for c in lay.coils])
    m = link.mutuals[np.ix_([link.index(n) for n in names],
                            [link.index(n) for n in names])]

    w_mag = 0.5 * np.einsum("ti,ij,tj->t", cur, m, cur)
    v_tx = didt @ m[0]
    source = float(np.trapz(cur[:, 0] * v_tx, t))

    w_cap = np.zeros_like(t)
    p_load = np.zeros_like(t)
    p_coil = np.zeros_like(t)
    p_dev = np.zeros_like(t)
    peak_l = {}
    peak_c = {}
    for j, c in enumerate(lay.coils):
        i_c = cur[:, j + 1]
        p_coil += link.coil(c).series_resistance * i_c ** 2
        br = top.branches[c]
        if isinstance(br, SwitchedCapacitorBranch):
            v1 = trace.column(f"v1_{c}")[idx]
            v2 = trace.column(f"v2_{c}")[idx]
            i2 = trace.column(f"i2_{c}")[idx]
            w_cap += 0.5 * br.c_h1 * v1 ** 2 + 0.5 * br.c_h2 * v2 ** 2
            p_dev += br.switch_on_resistance * i2 ** 2
            p_dev += br.diode_drop * np.abs(i2)
            peak_c[c] = float(0.5 * br.c_h1 * np.max(v1 ** 2) +
                              0.5 * br.c_h2 * np.max(v2 ** 2))
        else:
            vc = trace.column(f"vc_{c}")[idx]
            w_cap += 0.5 * br.capacitance * vc ** 2
            peak_c[c] = float(0.5 * br.capacitance * np.max(vc ** 2))
        load = top.loads[c]
        if load.kind == "resistive":
            p_load += load.resistance * i_c ** 2
        else:
            vdc = trace.column(f"vdc_{c}")[idx]
            w_cap += 0.5 * load.filter_capacitance * vdc ** 2
            p_load += vdc ** 2 / load.resistance
            p_dev += 2.0 * load.diode_drop * np.abs(i_c)
        li = link.coil(c).self_inductance
        peak_l[c] = float(0.5 * li * np.max(i_c ** 2))

    stored = w_mag + w_cap
    load_e = float(np.trapz(p_load, t))
    coil_e = float(np.trapz(p_coil, t))
    dev_e = float(np.trapz(p_dev, t))
    delta = float(stored[-1] - stored[0])
    residual = source - delta - load_e - coil_e - dev_e
    scale = max(abs(source), abs(load_e), 1e-30)
    return {
        "source_energy": source,
        "load_dissipated": load_e,
        "parasitic_dissipated": coil_e,
        "device_dissipated": dev_e,
        "delta_stored": delta,
        "residual": residual,
        "residual_fraction": residual / scale,
        "peak_inductor_energy": peak_l,
        "peak_capacitor_energy": peak_c,
    }
