"""Deterministic spiking-network simulation of neuronal flooding/jamming attacks."""

from .errors import ConfigurationError, RuntimeFailure
from .model import (
    NeuronParams,
    Synapse,
    Topology,
    TopologySpec,
    build_topology,
    load_topology,
    save_topology,
    validate_topology,
)
from .stimgen import (
    FeedSpec,
    InputSpikeSet,
    StimulusEvent,
    StimulusTimeline,
    TrialSpec,
    build_input_set,
    flash_timeline,
    generate_bkg_spikes,
    generate_lgn_spikes,
    gratings_timeline,
    movie_timeline,
    resolve_trial,
)
from .engine import SimConfig, Simulation, SpikeRecord, run
from .attacks import (
    AttackConfig,
    TargetSet,
    attack_schedule,
    build_attack,
    flo_hook,
    jam_hook,
    read_attack_files,
    select_targets,
    write_attack_files,
)
from .metrics import (
    ImpactReport,
    IntervalSeries,
    build_impact_report,
    impact_delta,
    interval_counts,
    rebound_detect,
    recovery_time,
    shift_percentage,
)
from .harness import (
    ExperimentConfig,
    RunManifest,
    replay_manifest,
    run_experiment,
    run_grid,
)

__version__ = "0.1.0"
