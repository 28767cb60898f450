"""Transient simulation of frequency-hopping wireless power links with a
self-tuning interceptor."""

from .link import (
    CircuitTopology,
    CoilSpec,
    ConductionState,
    FixedCapacitorBranch,
    LinkError,
    LoadModel,
    MagneticLinkModel,
    SwitchedCapacitorBranch,
    SystemMatrices,
    TransmitterDrive,
    assemble_state_space,
    build_link_model,
    coupling_from_mutual,
    mutual_from_coupling,
    resonant_frequency,
    tunable_range,
)
from .engine import (
    CircuitState,
    EngineError,
    Event,
    SimConfig,
    TraceBuffer,
    TransientEngine,
    advance_with_events,
    default_trace_columns,
    energy_audit,
    integrate_interval,
    locate_event,
    rk4_propagator,
    rk4_step,
    sensor_voltage,
)
from .controller import (
    ControllerConfig,
    ControllerMode,
    FrequencyEstimate,
    GateSchedule,
    InterceptorController,
    PhaseError,
    RegulatorConfig,
    RegulatorState,
    detect_frequency,
    init_t_on,
    phase_error,
    regulate_step,
    schedule_gates,
)
from .scenario import (
    MetricsReport,
    ScenarioConfig,
    ScenarioError,
    build_topology,
    emit_outputs,
    load_scenario,
    power_metrics,
    run_scenario,
    sweep_frequencies,
    sweep_to_csv,
)

__version__ = "0.1.0"
