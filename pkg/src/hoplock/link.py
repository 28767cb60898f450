"""Coupled-coil link description and per-configuration state-space assembly.

Everything is SI base units: henries, farads, ohms, volts, amperes, hertz,
seconds.  A link is a set of magnetically coupled coils: one transmitter
driven as an ideal current source, any number of compensated pickup coils,
and an optional open-circuited sense coil.  Each pickup coil carries either
a fixed series capacitor or a two-capacitor switched branch, and terminates
in a resistive or rectified load.

For one discrete conduction configuration (switch gate, branch diodes,
bridge diodes) the circuit is linear,

    d(state)/dt = A @ state + B @ u(t),    u(t) = [dI_tx/dt, 1],

with the constant input channel carrying diode-drop offsets.  State
ordering is coil currents (transmitter excluded, sense coil carries none),
then compensation capacitor voltages in coil order (a switched branch
contributes two), then rectifier filter voltages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


class LinkError(ValueError):
    """Raised for physically inconsistent link or topology descriptions."""


# ---------------------------------------------------------------------------
# Elementary relations
# ---------------------------------------------------------------------------

def mutual_from_coupling(k: float, l1: float, l2: float) -> float:
    """Mutual inductance M = k * sqrt(l1 * l2) for |k| < 1."""
    if not abs(k) < 1.0:
        raise LinkError(f"coupling coefficient |k| must be < 1, got {k}")
    if l1 <= 0.0 or l2 <= 0.0:
        raise LinkError("self inductances must be positive")
    return k * math.sqrt(l1 * l2)


def coupling_from_mutual(m: float, l1: float, l2: float) -> float:
    """Inverse of :func:`mutual_from_coupling`."""
    if l1 <= 0.0 or l2 <= 0.0:
        raise LinkError("self inductances must be positive")
    return m / math.sqrt(l1 * l2)


def resonant_frequency(l: float, c: float) -> float:
    """Series LC resonant frequency 1 / (2*pi*sqrt(l*c))."""
    if l <= 0.0 or c <= 0.0:
        raise LinkError("inductance and capacitance must be positive")
    return 1.0 / (TWO_PI * math.sqrt(l * c))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoilSpec:
    """One physical coil: name, self inductance, parasitic winding resistance."""

    name: str
    self_inductance: float
    series_resistance: float = 0.0

    def __post_init__(self):
        if not self.name:
            raise LinkError("coil name must be non-empty")
        if self.self_inductance <= 0.0:
            raise LinkError(f"coil {self.name}: self_inductance must be > 0")
        if self.series_resistance < 0.0:
            raise LinkError(f"coil {self.name}: series_resistance must be >= 0")


@dataclass(frozen=True)
class MagneticLinkModel:
    """Ordered coils plus the full symmetric inductance matrix (henries)."""

    coils: tuple[CoilSpec, ...]
    mutuals: np.ndarray

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.coils)

    def index(self, name: str) -> int:
        for i, c in enumerate(self.coils):
            if c.name == name:
                return i
        raise KeyError(name)

    def coil(self, name: str) -> CoilSpec:
        return self.coils[self.index(name)]

    def mutual(self, a: str, b: str) -> float:
        return float(self.mutuals[self.index(a), self.index(b)])

    def coupling(self, a: str, b: str) -> float:
        i, j = self.index(a), self.index(b)
        return float(self.mutuals[i, j] / math.sqrt(self.mutuals[i, i] * self.mutuals[j, j]))


def build_link_model(coils: Sequence[CoilSpec],
                     couplings: Sequence[Mapping]) -> MagneticLinkModel:
    """Assemble and validate the inductance matrix.

    ``couplings`` entries are mappings with coil names ``a`` and ``b`` plus
    exactly one of ``k`` (coupling coefficient) or ``m`` (mutual inductance
    in henries).  Unlisted pairs are uncoupled.  Rejects |k| >= 1, duplicate
    conflicting pair entries, and matrices that are not positive definite.
    """
    coils = tuple(coils)
    names = [c.name for c in coils]
    if len(set(names)) != len(names):
        raise LinkError("duplicate coil names")
    n = len(coils)
    m = np.zeros((n, n))
    for i, c in enumerate(coils):
        m[i, i] = c.self_inductance

    seen: dict[tuple[int, int], float] = {}
    for entry in couplings:
        try:
            a, b = entry["a"], entry["b"]
        except KeyError as exc:
            raise LinkError(f"coupling entry missing coil name: {entry}") from exc
        if a not in names or b not in names:
            raise LinkError(f"coupling references unknown coil: {entry}")
        if a == b:
            raise LinkError(f"coupling of coil {a} with itself")
        if ("k" in entry) == ("m" in entry):
            raise LinkError(f"coupling entry needs exactly one of k or m: {entry}")
        i, j = sorted((names.index(a), names.index(b)))
        la, lb = m[i, i], m[j, j]
        mutual = float(entry["m"]) if "m" in entry else mutual_from_coupling(
            float(entry["k"]), la, lb)
        if not abs(mutual) < math.sqrt(la * lb):
            raise LinkError(
                f"coupling {a}-{b} implies |k| >= 1 (M={mutual:g} H)")
        if (i, j) in seen and seen[(i, j)] != mutual:
            raise LinkError(f"conflicting duplicate coupling for pair {a}-{b}")
        seen[(i, j)] = mutual
        m[i, j] = m[j, i] = mutual

    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise LinkError("inductance matrix is not positive definite") from exc
    return MagneticLinkModel(coils=coils, mutuals=m)


@dataclass
class SwitchedCapacitorBranch:
    """Two-capacitor compensation: C1 in the loop, C2 behind a gated switch.

    The switch pair conducts only while gated on and only through its diode
    path, so C2 connects and disconnects without capacitor-voltage jumps.
    ``v_h1``/``v_h2`` are the initial capacitor voltages; ``switch_closed``
    and ``diode_state`` the initial discrete state (diode_state is -1/0/+1
    for the conducting direction).
    """

    c_h1: float
    c_h2: float
    v_h1: float = 0.0
    v_h2: float = 0.0
    switch_closed: bool = False
    switch_on_resistance: float = 0.0
    diode_drop: float = 0.0
    diode_state: int = 0

    def __post_init__(self):
        if self.c_h1 <= 0.0 or self.c_h2 <= 0.0:
            raise LinkError("switched branch capacitances must be > 0")
        if self.switch_on_resistance < 0.0:
            raise LinkError("switch_on_resistance must be >= 0")
        if self.diode_drop < 0.0:
            raise LinkError("diode_drop must be >= 0")
        if self.diode_state not in (-1, 0, 1):
            raise LinkError("diode_state must be -1, 0 or +1")
        if self.diode_state and not self.switch_closed:
            raise LinkError("branch diode cannot conduct with the switch gated off")


@dataclass
class FixedCapacitorBranch:
    """Plain series compensation capacitor with its voltage state."""

    capacitance: float
    v_c: float = 0.0

    def __post_init__(self):
        if self.capacitance <= 0.0:
            raise LinkError("compensation capacitance must be > 0")


@dataclass
class LoadModel:
    """Coil termination: direct resistive load or diode bridge + filter + R."""

    kind: str
    resistance: float
    filter_capacitance: float | None = None
    dc_voltage: float = 0.0
    diode_drop: float = 0.0

    def __post_init__(self):
        if self.kind not in ("resistive", "rectified"):
            raise LinkError(f"unknown load kind {self.kind!r}")
        if self.resistance <= 0.0:
            raise LinkError("load resistance must be > 0")
        if self.kind == "rectified":
            if not self.filter_capacitance or self.filter_capacitance <= 0.0:
                raise LinkError("rectified load needs filter_capacitance > 0")
        if self.diode_drop < 0.0:
            raise LinkError("diode_drop must be >= 0")


@dataclass(frozen=True)
class TransmitterDrive:
    """Ideal sinusoidal current source I(t) = amplitude * sin(2*pi*f*t + phase)."""

    amplitude: float
    frequency: float
    phase: float = 0.0

    def __post_init__(self):
        if self.amplitude < 0.0:
            raise LinkError("drive amplitude must be >= 0")
        if self.frequency <= 0.0:
            raise LinkError("drive frequency must be > 0")

    def current(self, t: float) -> float:
        return self.amplitude * math.sin(TWO_PI * self.frequency * t + self.phase)

    def current_derivative(self, t: float) -> float:
        w = TWO_PI * self.frequency
        return self.amplitude * w * math.cos(w * t + self.phase)

    def input_vector(self, t: float) -> np.ndarray:
        return np.array([self.current_derivative(t), 1.0])


def tunable_range(branch: SwitchedCapacitorBranch, l: float) -> tuple[float, float]:
    """Resonant frequency span reachable by varying the switch on-time.

    Zero on-time leaves only C1 in the loop (upper edge); permanent
    conduction parallels C2 (lower edge).
    """
    f_max = resonant_frequency(l, branch.c_h1)
    f_min = resonant_frequency(l, branch.c_h1 + branch.c_h2)
    return f_min, f_max


# ---------------------------------------------------------------------------
# Topology and state layout
# ---------------------------------------------------------------------------

@dataclass
class CircuitTopology:
    """Full circuit description consumed by the transient engine.

    The sense coil is open-circuited (no branch, no load, zero current);
    every other non-transmitter coil has exactly one compensation branch and
    one load.
    """

    link: MagneticLinkModel
    drive: TransmitterDrive
    transmitter: str
    branches: dict[str, FixedCapacitorBranch | SwitchedCapacitorBranch]
    loads: dict[str, LoadModel]
    sensor: str | None = None

    def __post_init__(self):
        names = set(self.link.names)
        if self.transmitter not in names:
            raise LinkError(f"unknown transmitter coil {self.transmitter!r}")
        if self.sensor is not None and self.sensor not in names:
            raise LinkError(f"unknown sensor coil {self.sensor!r}")
        if self.sensor == self.transmitter:
            raise LinkError("sensor coil cannot be the transmitter")
        passive = {self.transmitter} | ({self.sensor} if self.sensor else set())
        for coil in (self.branches.keys() | self.loads.keys()):
            if coil in passive:
                raise LinkError(f"coil {coil!r} cannot carry a branch or load")
            if coil not in names:
                raise LinkError(f"branch/load references unknown coil {coil!r}")
        for coil in names - passive:
            if coil not in self.branches or coil not in self.loads:
                raise LinkError(
                    f"pickup coil {coil!r} needs one compensation branch and one load")

    def layout(self) -> "StateLayout":
        return StateLayout.from_topology(self)

    def initial_state(self) -> np.ndarray:
        lay = self.layout()
        x = np.zeros(lay.size)
        for c in lay.scc_coils:
            br = self.branches[c]
            x[lay.cap_indices[c][0]] = br.v_h1
            x[lay.cap_indices[c][1]] = br.v_h2
        for c in lay.coils:
            br = self.branches[c]
            if isinstance(br, FixedCapacitorBranch):
                x[lay.cap_indices[c][0]] = br.v_c
        for c in lay.rect_coils:
            x[lay.filter_index[c]] = self.loads[c].dc_voltage
        return x


@dataclass(frozen=True)
class StateLayout:
    """Index map for the engine state vector; ordering is documented and stable."""

    coils: tuple[str, ...]
    scc_coils: tuple[str, ...]
    rect_coils: tuple[str, ...]
    size: int
    current_index: dict[str, int]
    cap_indices: dict[str, tuple[int, ...]]
    filter_index: dict[str, int]
    state_names: tuple[str, ...]

    @classmethod
    def from_topology(cls, top: CircuitTopology) -> "StateLayout":
        passive = {top.transmitter} | ({top.sensor} if top.sensor else set())
        coils = tuple(c.name for c in top.link.coils if c.name not in passive)
        scc = tuple(c for c in coils
                    if isinstance(top.branches[c], SwitchedCapacitorBranch))
        rect = tuple(c for c in coils if top.loads[c].kind == "rectified")

        names: list[str] = []
        cur = {}
        for c in coils:
            cur[c] = len(names)
            names.append(f"i_{c}")
        caps = {}
        for c in coils:
            if c in scc:
                caps[c] = (len(names), len(names) + 1)
                names.append(f"v1_{c}")
                names.append(f"v2_{c}")
            else:
                caps[c] = (len(names),)
                names.append(f"vc_{c}")
        filt = {}
        for c in rect:
            filt[c] = len(names)
            names.append(f"vdc_{c}")
        return cls(coils=coils, scc_coils=scc, rect_coils=rect, size=len(names),
                   current_index=cur, cap_indices=caps, filter_index=filt,
                   state_names=tuple(names))


BOOT_RESISTANCE = 5.0  # ohms; equalization path for a cold ideal switch


@dataclass(frozen=True)
class ConductionState:
    """Discrete conduction configuration.

    ``gate[i]``: commanded switch gate per switched branch (layout order).
    ``scc[i]``: branch conduction, -1/0/+1 for diode-path conduction plus
    -2/+2 for the cold-start equalization mode of an ideal switch (conducts
    through :data:`BOOT_RESISTANCE` until the capacitors meet); nonzero
    requires the gate on.
    ``rect[i]``: bridge direction per rectified load, -1/0/+1.
    """

    gate: tuple[bool, ...]
    scc: tuple[int, ...]
    rect: tuple[int, ...]

    @classmethod
    def initial(cls, top: CircuitTopology, lay: StateLayout | None = None) -> "ConductionState":
        lay = lay or top.layout()
        gate = tuple(top.branches[c].switch_closed for c in lay.scc_coils)
        scc = tuple(top.branches[c].diode_state for c in lay.scc_coils)
        return cls(gate=gate, scc=scc, rect=tuple(0 for _ in lay.rect_coils))

    def with_gate(self, i: int, closed: bool) -> "ConductionState":
        gate = list(self.gate)
        gate[i] = closed
        scc = list(self.scc)
        if not closed:
            scc[i] = 0
        return ConductionState(tuple(gate), tuple(scc), self.rect)

    def with_scc(self, i: int, direction: int) -> "ConductionState":
        scc = list(self.scc)
        scc[i] = direction
        return ConductionState(self.gate, tuple(scc), self.rect)

    def with_rect(self, i: int, direction: int) -> "ConductionState":
        rect = list(self.rect)
        rect[i] = direction
        return ConductionState(self.gate, self.scc, tuple(rect))


@dataclass
class SystemMatrices:
    """Constant matrices for one conduction configuration plus linear probes.

    ``outputs[name] = (c, d)`` with value = c @ x + d @ u.
    """

    a: np.ndarray
    b: np.ndarray
    outputs: dict[str, tuple[np.ndarray, np.ndarray]]
    conduction: ConductionState

    def output(self, name: str, x: np.ndarray, u: np.ndarray) -> float:
        c, d = self.outputs[name]
        return float(c @ x + d @ u)


def assemble_state_space(top: CircuitTopology,
                         cond: ConductionState) -> SystemMatrices:
    """Build A, B and the probe/monitor rows for one conduction configuration.

    Raises :class:`LinkError` for structurally inconsistent configurations
    (a branch diode conducting while its gate is off).
    """
    lay = top.layout()
    link = top.link
    if len(cond.gate) != len(lay.scc_coils) or len(cond.rect) != len(lay.rect_coils):
        raise LinkError("conduction state does not match topology layout")
    for g, s in zip(cond.gate, cond.scc):
        if s and not g:
            raise LinkError("inconsistent conduction state: diode conducting with gate off")

    n = lay.size
    a = np.zeros((n, n))
    b = np.zeros((n, 2))
    m = link.mutuals
    tx = link.index(top.transmitter)
    scc_dir = dict(zip(lay.scc_coils, cond.scc))
    gate_on = dict(zip(lay.scc_coils, cond.gate))
    rect_dir = dict(zip(lay.rect_coils, cond.rect))

    # Coils with a closed current path: resistive always, rectified only
    # while the bridge conducts.  Blocked coils hold zero current and drop
    # out of the flux coupling entirely.
    conducting = [c for c in lay.coils
                  if top.loads[c].kind == "resistive" or rect_dir[c] != 0]
    if conducting:
        kidx = [link.index(c) for c in conducting]
        l_kk = m[np.ix_(kidx, kidx)]
        rx = np.zeros((len(conducting), n))
        rb = np.zeros((len(conducting), 2))
        for j, c in enumerate(conducting):
            load = top.loads[c]
            r_tot = link.coil(c).series_resistance
            if load.kind == "resistive":
                r_tot += load.resistance
            i_c = lay.current_index[c]
            rx[j, i_c] -= r_tot
            br = top.branches[c]
            if isinstance(br, SwitchedCapacitorBranch):
                rx[j, lay.cap_indices[c][0]] -= 1.0
            else:
                rx[j, lay.cap_indices[c][0]] -= 1.0
            if load.kind == "rectified":
                s = rect_dir[c]
                rx[j, lay.filter_index[c]] -= s
                rb[j, 1] -= s * 2.0 * load.diode_drop
            rb[j, 0] -= m[link.index(c), tx]
        sol_a = np.linalg.solve(l_kk, rx)
        sol_b = np.linalg.solve(l_kk, rb)
        for j, c in enumerate(conducting):
            a[lay.current_index[c]] = sol_a[j]
            b[lay.current_index[c]] = sol_b[j]

    # Compensation branch rows.
    for c in lay.coils:
        br = top.branches[c]
        i_c = lay.current_index[c]
        if isinstance(br, FixedCapacitorBranch):
            a[lay.cap_indices[c][0], i_c] = 1.0 / br.capacitance
            continue
        iv1, iv2 = lay.cap_indices[c]
        s = scc_dir[c]
        if s == 0:
            a[iv1, i_c] = 1.0 / br.c_h1
        elif abs(s) == 1 and br.switch_on_resistance == 0.0:
            # Ideal switch + constant-drop diode: the two capacitors move in
            # lockstep at the offset fixed when conduction began.
            c12 = br.c_h1 + br.c_h2
            a[iv1, i_c] = 1.0 / c12
            a[iv2, i_c] = 1.0 / c12
        else:
            rsw = br.switch_on_resistance if abs(s) == 1 else BOOT_RESISTANCE
            sgn = 1 if s > 0 else -1
            a[iv1, i_c] = 1.0 / br.c_h1
            a[iv1, iv1] -= 1.0 / (rsw * br.c_h1)
            a[iv1, iv2] += 1.0 / (rsw * br.c_h1)
            b[iv1, 1] += sgn * br.diode_drop / (rsw * br.c_h1)
            a[iv2, iv1] += 1.0 / (rsw * br.c_h2)
            a[iv2, iv2] -= 1.0 / (rsw * br.c_h2)
            b[iv2, 1] -= sgn * br.diode_drop / (rsw * br.c_h2)

    # Rectifier filter rows.
    for c in lay.rect_coils:
        load = top.loads[c]
        ivdc = lay.filter_index[c]
        a[ivdc, ivdc] = -1.0 / (load.resistance * load.filter_capacitance)
        s = rect_dir[c]
        if s:
            a[ivdc, lay.current_index[c]] = s / load.filter_capacitance

    outputs: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def _put(name, c_row, d_row):
        outputs[name] = (np.asarray(c_row, dtype=float),
                         np.asarray(d_row, dtype=float))

    for c in lay.coils:
        i_c = lay.current_index[c]
        e = np.zeros(n)
        e[i_c] = 1.0
        _put(f"i_{c}", e, [0.0, 0.0])
        _put(f"didt_{c}", a[i_c], b[i_c])
    _put("didt_tx", np.zeros(n), [1.0, 0.0])

    if top.sensor is not None:
        si = link.index(top.sensor)
        c_row = np.zeros(n)
        d_row = np.array([m[tx, si], 0.0])
        for c in lay.coils:
            mc = m[link.index(c), si]
            c_row = c_row + mc * a[lay.current_index[c]]
            d_row = d_row + mc * b[lay.current_index[c]]
        _put("v_sensor", c_row, d_row)

    for c in lay.coils:
        load = top.loads[c]
        if load.kind == "resistive":
            e = np.zeros(n)
            e[lay.current_index[c]] = load.resistance
            _put(f"vload_{c}", e, [0.0, 0.0])
        else:
            e = np.zeros(n)
            e[lay.filter_index[c]] = 1.0
            _put(f"vload_{c}", e, [0.0, 0.0])

    # Switched-branch internals and commutation monitors.
    for c in lay.scc_coils:
        br = top.branches[c]
        iv1, iv2 = lay.cap_indices[c]
        i_c = lay.current_index[c]
        s = scc_dir[c]
        sgn = 0 if s == 0 else (1 if s > 0 else -1)
        c_i2 = np.zeros(n)
        d_i2 = np.zeros(2)
        if s != 0:
            if abs(s) == 1 and br.switch_on_resistance == 0.0:
                c_i2[i_c] = br.c_h2 / (br.c_h1 + br.c_h2)
            else:
                rsw = br.switch_on_resistance if abs(s) == 1 else BOOT_RESISTANCE
                c_i2[iv1] = 1.0 / rsw
                c_i2[iv2] = -1.0 / rsw
                d_i2[1] = -sgn * br.diode_drop / rsw
        _put(f"i2_{c}", c_i2, d_i2)

        gp = np.zeros(n)
        gp[iv1], gp[iv2] = 1.0, -1.0
        _put(f"sccp_{c}", gp, [0.0, -br.diode_drop])
        _put(f"sccn_{c}", -gp, [0.0, -br.diode_drop])
        if s != 0:
            _put(f"sccx_{c}", -sgn * c_i2, -sgn * d_i2)

    # Bridge forward-voltage monitors for blocked rectified coils, and the
    # current-zero monitor while conducting.
    for c in lay.rect_coils:
        load = top.loads[c]
        i_c = lay.current_index[c]
        s = rect_dir[c]
        if s == 0:
            ci = link.index(c)
            c_open = np.zeros(n)
            d_open = np.array([-m[ci, tx], 0.0])
            for bcoil in conducting:
                mc = m[ci, link.index(bcoil)]
                c_open = c_open - mc * a[lay.current_index[bcoil]]
                d_open = d_open - mc * b[lay.current_index[bcoil]]
            c_open[lay.cap_indices[c][0]] -= 1.0
            cf = c_open.copy()
            cf[lay.filter_index[c]] -= 1.0
            _put(f"rectp_{c}", cf, d_open + [0.0, -2.0 * load.diode_drop])
            cf = (-c_open).copy()
            cf[lay.filter_index[c]] -= 1.0
            _put(f"rectn_{c}", cf, -d_open + [0.0, -2.0 * load.diode_drop])
        else:
            e = np.zeros(n)
            e[i_c] = -float(s)
            _put(f"rectx_{c}", e, [0.0, 0.0])

    return SystemMatrices(a=a, b=b, outputs=outputs, conduction=cond)
