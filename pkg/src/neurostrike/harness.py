"""Experiment orchestration: baseline + attacked repetitions, grid, replay.

One experiment is a single attack configuration run against one stimulus: a
baseline run with no attack plus ``repetitions`` attacked runs that share the
baseline's input and engine seeds and differ only in the target-selection
seed (selection_seed + repetition index). The full grid covers 2 attacks x
3 stimuli x 3 events x 2 target fractions = 36 cells at a configurable scale
of the 230,924-neuron reference size.
"""

from __future__ import annotations

import json
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import engine, metrics, stimgen
from .errors import ConfigurationError, RuntimeFailure
from .model import Topology, TopologySpec, build_topology, load_topology

FULL_SCALE_N = 230_924
MANIFEST_FORMAT_VERSION = 1
GRID_FRACTIONS = (0.25, 0.5)


@dataclass
class ExperimentConfig:
    stimulus: str
    attack: atk.AttackConfig
    output_dir: str | Path = "out"
    topology_spec: TopologySpec | None = None
    topology_path: str | None = None
    topology_seed: int = 1
    orientation_deg: float = 90.0
    temporal_freq: float = 2.0
    lgn_trial: int = 9
    repetitions: int = 10
    base_seed: int = 0
    feed: stimgen.FeedSpec = field(default_factory=stimgen.FeedSpec)
    sim: engine.SimConfig = field(default_factory=engine.SimConfig)
    write_spikes: bool = True
    resample_inputs: bool = False
    experiment_id: str | None = None

    def validate(self) -> None:
        if self.stimulus not in stimgen.STIMULI:
            raise ConfigurationError(f"unknown stimulus {self.stimulus!r}")
        if self.repetitions < 1:
            raise ConfigurationError(f"repetitions must be >= 1, got {self.repetitions}")
        if self.topology_spec is None and self.topology_path is None:
            raise ConfigurationError("need topology_spec or topology_path")
        self.sim.validate()
        self.attack.validate_timing(self.sim.dt, self.sim.duration)

    def resolve_id(self) -> str:
        if self.experiment_id:
            return self.experiment_id
        a = self.attack
        if a.kind == atk.NONE:
            return f"{self.stimulus}_baseline"
        if a.kind == atk.FLO:
            param = f"t{a.t_attack:g}"
        else:
            param = f"w{a.window[0]:g}-{a.window[1]:g}"
        return f"{self.stimulus}_{a.kind}_{param}_f{round(a.target_fraction * 100)}"

    def to_jsonable(self) -> dict:
        return {
            "stimulus": self.stimulus,
            "attack": self.attack.to_jsonable(),
            "output_dir": str(self.output_dir),
            "topology_spec": self.topology_spec.to_jsonable() if self.topology_spec else None,
            "topology_path": self.topology_path,
            "topology_seed": self.topology_seed,
            "orientation_deg": self.orientation_deg,
            "temporal_freq": self.temporal_freq,
            "lgn_trial": self.lgn_trial,
            "repetitions": self.repetitions,
            "base_seed": self.base_seed,
            "feed": asdict(self.feed),
            "sim": asdict(self.sim),
            "write_spikes": self.write_spikes,
            "resample_inputs": self.resample_inputs,
            "experiment_id": self.experiment_id,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "ExperimentConfig":
        feed = stimgen.FeedSpec(**{
            k: tuple(v) if isinstance(v, list) else v for k, v in d["feed"].items()
        })
        return cls(
            stimulus=d["stimulus"],
            attack=atk.AttackConfig.from_jsonable(d["attack"]),
            output_dir=d["output_dir"],
            topology_spec=TopologySpec.from_jsonable(d["topology_spec"]) if d.get("topology_spec") else None,
            topology_path=d.get("topology_path"),
            topology_seed=d.get("topology_seed", 1),
            orientation_deg=d.get("orientation_deg", 90.0),
            temporal_freq=d.get("temporal_freq", 2.0),
            lgn_trial=d.get("lgn_trial", 9),
            repetitions=d.get("repetitions", 10),
            base_seed=d.get("base_seed", 0),
            feed=feed,
            sim=engine.SimConfig(**d["sim"]),
            write_spikes=d.get("write_spikes", True),
            resample_inputs=d.get("resample_inputs", False),
            experiment_id=d.get("experiment_id"),
        )


@dataclass
class RunManifest:
    experiment_id: str
    config: dict
    runs: list[dict]
    created_at: str = ""
    runtime_s: float = 0.0
    status: str = "complete"
    format_version: int = MANIFEST_FORMAT_VERSION
    output_dir: str = ""

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        if d["format_version"] != MANIFEST_FORMAT_VERSION:
            raise ConfigurationError(f"unsupported manifest version {d['format_version']}")
        return cls(**d)


# Worker-local caches: topology generation, input synthesis and the shared
# baseline run dominate grid runtime, and repeat identically across cells.
_TOPO_CACHE: dict[str, Topology] = {}
_INPUT_CACHE: dict[str, tuple] = {}
_BASELINE_CACHE: dict[str, tuple[np.ndarray, np.ndarray]] = {}
_CACHE_CAP = 4


def _cache_put(cache: dict, key, value) -> None:
    if key not in cache and len(cache) >= _CACHE_CAP:
        cache.pop(next(iter(cache)))
    cache[key] = value


def _topology_for(config: ExperimentConfig) -> Topology:
    if config.topology_path:
        key = f"path:{config.topology_path}"
        if key not in _TOPO_CACHE:
            _cache_put(_TOPO_CACHE, key, load_topology(config.topology_path))
        return _TOPO_CACHE[key]
    key = json.dumps(
        {"spec": config.topology_spec.to_jsonable(), "seed": config.topology_seed},
        sort_keys=True,
    )
    if key not in _TOPO_CACHE:
        _cache_put(_TOPO_CACHE, key, build_topology(config.topology_spec, config.topology_seed))
    return _TOPO_CACHE[key]


def _inputs_for(config: ExperimentConfig, n_neurons: int, input_seed: int):
    key = json.dumps(
        {
            "stimulus": config.stimulus,
            "orientation": config.orientation_deg,
            "temporal_freq": config.temporal_freq,
            "lgn_trial": config.lgn_trial,
            "n": n_neurons,
            "feed": asdict(config.feed),
            "seed": input_seed,
        },
        sort_keys=True,
    )
    if key not in _INPUT_CACHE:
        timeline = stimgen.timeline_for(config.stimulus, config.orientation_deg, config.temporal_freq)
        trial = stimgen.resolve_trial(config.stimulus, config.lgn_trial, config.orientation_deg)
        inputs = stimgen.build_input_set(timeline, trial, n_neurons, input_seed, config.feed)
        _cache_put(_INPUT_CACHE, key, (timeline, trial, inputs))
    return _INPUT_CACHE[key]


def _run_baseline(config, topology, inputs, trial, input_key: str) -> engine.SpikeRecord:
    key = input_key
    if key not in _BASELINE_CACHE:
        record = engine.run(config.sim, topology, inputs)
        _cache_put(_BASELINE_CACHE, key, (record.times, record.neuron_ids))
    times, ids = _BASELINE_CACHE[key]
    return engine.SpikeRecord(times=times, neuron_ids=ids, meta={})


def _baseline_key(config: ExperimentConfig, n_neurons: int, input_seed: int) -> str:
    return json.dumps(
        {
            "topo": config.topology_path or [config.topology_spec.to_jsonable(), config.topology_seed],
            "stimulus": config.stimulus,
            "orientation": config.orientation_deg,
            "lgn_trial": config.lgn_trial,
            "n": n_neurons,
            "feed": asdict(config.feed),
            "input_seed": input_seed,
            "sim": asdict(config.sim),
        },
        sort_keys=True,
    )


def _run_meta(config, trial, run_id: str, attack: atk.AttackConfig) -> dict:
    return {
        "run_id": run_id,
        "attack": attack.kind if attack.kind != atk.NONE else "NONE",
        "attack_param": attack.param_string(),
        "lgn_trial": trial.lgn_trial,
        "bkg_trial": trial.bkg_trial,
        "seed": config.base_seed,
    }


def _target_stats(
    attack: atk.AttackConfig,
    targets: atk.TargetSet,
    record: engine.SpikeRecord,
    baseline: engine.SpikeRecord,
    topology: Topology,
) -> dict:
    """Per-run attack bookkeeping used by the acceptance checks."""
    target_mask = np.zeros(topology.n_neurons, dtype=bool)
    target_mask[targets.neuron_ids] = True
    stats: dict = {"n_targets": targets.size}
    if attack.kind == atk.FLO:
        t = attack.t_attack
        at_instant = record.times == t
        stats["target_spikes_at_instant"] = int(np.sum(at_instant & target_mask[record.neuron_ids]))
        stats["nontarget_spikes_at_instant"] = int(np.sum(at_instant & ~target_mask[record.neuron_ids]))
        # refractory at the instant: last spike s in (t - t_ref, t)
        before = record.times < t
        ids = record.neuron_ids[before]
        times = record.times[before]
        t_ref = topology.t_refractory[ids]
        refr_ids = np.unique(ids[(times + t_ref > t) & target_mask[ids]])
        stats["targets_refractory_at_instant"] = int(refr_ids.size)
        stats["baseline_nontarget_spikes_at_instant"] = int(
            np.sum((baseline.times == t) & ~target_mask[baseline.neuron_ids])
        )
    elif attack.kind == atk.JAM:
        t0, t1 = attack.window
        in_window = (record.times >= t0) & (record.times < t1)
        base_window = (baseline.times >= t0) & (baseline.times < t1)
        stats["target_spikes_in_window"] = int(np.sum(in_window & target_mask[record.neuron_ids]))
        stats["window_spikes_attacked"] = int(np.sum(in_window))
        stats["window_spikes_baseline"] = int(np.sum(base_window))
        stats["baseline_target_spikes_in_window"] = int(
            np.sum(base_window & target_mask[baseline.neuron_ids])
        )
    return stats


def run_experiment(config: ExperimentConfig) -> tuple[RunManifest, metrics.ImpactReport]:
    """Baseline plus attacked repetitions for one attack configuration."""
    config.validate()
    started = time.time()
    exp_id = config.resolve_id()
    out = Path(config.output_dir) / exp_id
    out.mkdir(parents=True, exist_ok=True)

    topology = _topology_for(config)
    n = topology.n_neurons
    runs: list[dict] = []
    status = "complete"

    def _maybe_write(record: engine.SpikeRecord, name: str) -> str:
        if not config.write_spikes:
            return ""
        try:
            return str(record.to_csv(out / name))
        except OSError as exc:
            raise RuntimeFailure(f"failed writing {name}: {exc}") from exc

    try:
        baselines: list[engine.SpikeRecord] = []
        attacked: list[engine.SpikeRecord] = []
        rep_stats: list[dict] = []
        trial = stimgen.resolve_trial(config.stimulus, config.lgn_trial, config.orientation_deg)

        if not config.resample_inputs:
            input_seed = config.base_seed
            _, trial, inputs = _inputs_for(config, n, input_seed)
            baseline = _run_baseline(config, topology, inputs, trial, _baseline_key(config, n, input_seed))
            baseline.meta = _run_meta(config, trial, f"{exp_id}__baseline", atk.none_config())
            baselines.append(baseline)
            path = _maybe_write(baseline, "spikes_baseline.csv")
            runs.append(
                {
                    "run_id": baseline.meta["run_id"],
                    "kind": "baseline",
                    "input_seed": input_seed,
                    "engine_seed": config.sim.seed,
                    "selection_seed": None,
                    "spike_csv": path,
                    "n_spikes": baseline.n_spikes,
                }
            )

        for rep in range(config.repetitions if config.attack.kind != atk.NONE else 0):
            input_seed = config.base_seed + 7919 * (rep + 1) if config.resample_inputs else config.base_seed
            _, trial, inputs = _inputs_for(config, n, input_seed)
            if config.resample_inputs:
                baseline = _run_baseline(config, topology, inputs, trial, _baseline_key(config, n, input_seed))
                baseline.meta = _run_meta(config, trial, f"{exp_id}__baseline{rep:02d}", atk.none_config())
                baselines.append(baseline)
                path = _maybe_write(baseline, f"spikes_baseline{rep:02d}.csv")
                runs.append(
                    {
                        "run_id": baseline.meta["run_id"],
                        "kind": "baseline",
                        "input_seed": input_seed,
                        "engine_seed": config.sim.seed,
                        "selection_seed": None,
                        "spike_csv": path,
                        "n_spikes": baseline.n_spikes,
                    }
                )
            rep_attack = config.attack.with_selection_seed(config.attack.selection_seed + rep)
            targets, hook = atk.build_attack(rep_attack, topology)
            record = engine.run(
                config.sim,
                topology,
                inputs,
                hook,
                meta=_run_meta(config, trial, f"{exp_id}__rep{rep:02d}", rep_attack),
            )
            attacked.append(record)
            stats = _target_stats(rep_attack, targets, record, baselines[-1], topology)
            stats["selection_seed"] = rep_attack.selection_seed
            rep_stats.append(stats)
            path = _maybe_write(record, f"spikes_rep{rep:02d}.csv")
            runs.append(
                {
                    "run_id": record.meta["run_id"],
                    "kind": "attacked",
                    "rep_index": rep,
                    "input_seed": input_seed,
                    "engine_seed": config.sim.seed,
                    "selection_seed": rep_attack.selection_seed,
                    "spike_csv": path,
                    "n_spikes": record.n_spikes,
                    "attack_stats": stats,
                }
            )

        if config.attack.kind == atk.NONE:
            # a no-attack experiment reports the baseline against itself
            attacked = []
        report = metrics.build_impact_report(
            baselines if config.resample_inputs else baselines[0],
            attacked,
            attack_kind=config.attack.kind if config.attack.kind != atk.NONE else "none",
            t_attack=config.attack.t_attack,
            window=config.attack.window,
            duration=config.sim.duration,
            dt=config.sim.dt,
            meta={
                "experiment_id": exp_id,
                "stimulus": config.stimulus,
                "target_fraction": config.attack.target_fraction if config.attack.kind != atk.NONE else 0.0,
                "n_neurons": n,
                "lgn_trial": trial.lgn_trial,
                "bkg_trial": trial.bkg_trial,
                "paired_seeds": not config.resample_inputs,
            },
        )
        metrics.report_to_csv(report, out / "impact_report.csv")
        metrics.report_to_json(report, out / "impact_report.json")
        atk.write_attack_files(config.attack, out)
    except RuntimeFailure:
        status = "aborted"
        manifest = RunManifest(
            experiment_id=exp_id,
            config=config.to_jsonable(),
            runs=runs,
            created_at=datetime.now(timezone.utc).isoformat(),
            runtime_s=time.time() - started,
            status=status,
            output_dir=str(out),
        )
        manifest.save(out / "manifest.json")
        raise

    manifest = RunManifest(
        experiment_id=exp_id,
        config=config.to_jsonable(),
        runs=runs,
        created_at=datetime.now(timezone.utc).isoformat(),
        runtime_s=time.time() - started,
        status=status,
        output_dir=str(out),
    )
    manifest.save(out / "manifest.json")
    return manifest, report


def replay_manifest(manifest_path: str | Path, output_dir: str | Path) -> tuple[RunManifest, metrics.ImpactReport]:
    """Regenerate every run recorded in a manifest from its stored seeds."""
    manifest = RunManifest.load(manifest_path)
    config = ExperimentConfig.from_jsonable(manifest.config)
    config.output_dir = str(output_dir)
    config.write_spikes = True
    return run_experiment(config)


def grid_cells(
    repetitions: int = 10,
    fractions: tuple[float, ...] = GRID_FRACTIONS,
) -> list[dict]:
    """Descriptors for the 36 grid cells (stimulus x attack x event x fraction)."""
    cells = []
    for stimulus in stimgen.STIMULI:
        for kind in (atk.FLO, atk.JAM):
            for event_index, cfg in enumerate(atk.attack_schedule(stimulus, kind)):
                for fraction in fractions:
                    cells.append(
                        {
                            "stimulus": stimulus,
                            "kind": kind,
                            "event_index": event_index,
                            "fraction": fraction,
                            "t_attack": cfg.t_attack,
                            "window": cfg.window,
                            "repetitions": repetitions,
                        }
                    )
    return cells


def _cell_config(cell: dict, scale: float, output_dir, base_seed: int, write_spikes: bool,
                 feed: stimgen.FeedSpec | None, sim: engine.SimConfig | None) -> ExperimentConfig:
    n = atk.round_half_up(scale * FULL_SCALE_N)
    attack = atk.AttackConfig(
        kind=cell["kind"],
        target_fraction=cell["fraction"],
        t_attack=cell["t_attack"],
        window=cell["window"],
        selection_seed=base_seed,
    )
    return ExperimentConfig(
        stimulus=cell["stimulus"],
        attack=attack,
        output_dir=output_dir,
        topology_spec=TopologySpec(n_neurons=n),
        topology_seed=base_seed + 1,
        repetitions=cell["repetitions"],
        base_seed=base_seed,
        feed=feed or stimgen.FeedSpec(),
        sim=sim or engine.SimConfig(),
        write_spikes=write_spikes,
    )


def _cell_worker(payload: dict) -> dict:
    cell = payload["cell"]
    config = ExperimentConfig.from_jsonable(payload["config"])
    started = time.time()
    row = {
        "cell": config.resolve_id(),
        "stimulus": cell["stimulus"],
        "attack": cell["kind"],
        "event_index": cell["event_index"],
        "param": config.attack.param_string(),
        "fraction": cell["fraction"],
        "n_neurons": config.topology_spec.n_neurons,
        "repetitions": cell["repetitions"],
        "status": "ok",
        "error": "",
    }
    try:
        manifest, report = run_experiment(config)
        first_iv = report.meta.get("attack_interval_first")
        last_iv = report.meta.get("attack_interval_last")
        row["manifest_path"] = str(Path(manifest.output_dir) / "manifest.json")
        row["baseline_total"] = float(report.baseline_mean.sum())
        row["attacked_total_mean"] = float(report.attacked_mean.sum())
        row["delta_attack_interval"] = float(report.delta[first_iv]) if first_iv is not None else float("nan")
        row["percent_attack_interval"] = (
            float(report.percent[first_iv]) if first_iv is not None else float("nan")
        )
        if cell["kind"] == atk.JAM and last_iv is not None:
            base_w = float(report.baseline_mean[first_iv : last_iv + 1].sum())
            att_w = float(report.attacked_mean[first_iv : last_iv + 1].sum())
            row["suppression_pct"] = 100.0 * (base_w - att_w) / base_w if base_w > 0 else float("nan")
        else:
            row["suppression_pct"] = float("nan")
        row["recovery_intervals"] = report.recovery_intervals
        row["rebound_interval"] = report.rebound_peak["interval"] if report.rebound_peak else None
        row["shift_attack_interval"] = (
            float(report.shift_pct[first_iv]) if first_iv is not None else float("nan")
        )
    except Exception as exc:  # keep remaining cells running
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
        row["traceback"] = traceback.format_exc()
    row["runtime_s"] = time.time() - started
    return row


def run_grid(
    scale: float,
    output_dir: str | Path,
    repetitions: int = 10,
    workers: int = 1,
    base_seed: int = 0,
    write_spikes: bool = True,
    fractions: tuple[float, ...] = GRID_FRACTIONS,
    feed: stimgen.FeedSpec | None = None,
    sim: engine.SimConfig | None = None,
) -> list[RunManifest]:
    """Run all grid cells at round(scale * 230,924) neurons; never stops early.

    Emits grid_summary.csv; failed cells appear there with their error and are
    skipped in the returned manifest list.
    """
    if not 0.0 < scale <= 1.0:
        raise ConfigurationError(f"scale must be in (0, 1], got {scale}")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = grid_cells(repetitions, fractions)
    payloads = [
        {
            "cell": cell,
            "config": _cell_config(cell, scale, out, base_seed, write_spikes, feed, sim).to_jsonable(),
        }
        for cell in cells
    ]
    if workers > 1:
        # cells are independent; worker-local caches rebuild topology/inputs
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_cell_worker, payloads))
    else:
        rows = [_cell_worker(p) for p in payloads]

    import pandas as pd

    summary = pd.DataFrame(rows)
    if "traceback" in summary.columns:
        summary = summary.drop(columns=["traceback"])
    summary.to_csv(out / "grid_summary.csv", index=False)

    manifests = []
    for row in rows:
        if row["status"] == "ok":
            manifests.append(RunManifest.load(row["manifest_path"]))
    return manifests
