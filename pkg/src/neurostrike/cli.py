"""Command-line front end.

Subcommands: ``topology build``, ``stimulus gen``, ``run``, ``grid``,
``report``. Flags override config-file keys; environment variables prefixed
NEUROSTRIKE_ (OUT, SEED, SCALE, WORKERS, REPS) supply defaults. Exit codes:
0 success, 1 configuration/usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import attacks as atk
from . import engine, harness, metrics, stimgen
from .errors import ConfigurationError, RuntimeFailure
from .model import TopologySpec, build_topology, save_topology, validate_topology


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we want 1
        raise _UsageError(message)


def _env(name: str, default, cast=str):
    raw = os.environ.get(f"NEUROSTRIKE_{name}")
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigurationError(f"bad NEUROSTRIKE_{name}={raw!r}: {exc}") from exc


def _parse_window(text: str) -> tuple[float, float]:
    try:
        t0, t1 = text.split(":")
        return float(t0), float(t1)
    except ValueError as exc:
        raise ConfigurationError(f"window must be t0:t1, got {text!r}") from exc


def _build_parser() -> _Parser:
    parser = _Parser(prog="neurostrike", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    topo = sub.add_parser("topology", help="topology tools")
    topo_sub = topo.add_subparsers(dest="subcommand")
    tb = topo_sub.add_parser("build", help="generate and save a topology")
    tb.add_argument("--n", type=int, default=None, help="neuron count")
    tb.add_argument("--scale", type=float, default=_env("SCALE", None, float),
                    help="fraction of the 230,924-neuron reference size")
    tb.add_argument("--seed", type=int, default=_env("SEED", 1, int))
    tb.add_argument("--out", default=_env("OUT", "out/topology"))
    tb.add_argument("--p-base", type=float, default=None)
    tb.add_argument("--distance-scale", type=float, default=None)

    stim = sub.add_parser("stimulus", help="stimulus tools")
    stim_sub = stim.add_subparsers(dest="subcommand")
    sg = stim_sub.add_parser("gen", help="export timeline JSON and input spike CSVs")
    sg.add_argument("--stimulus", required=True, choices=stimgen.STIMULI)
    sg.add_argument("--lgn-trial", type=int, default=9)
    sg.add_argument("--orientation", type=float, default=90.0)
    sg.add_argument("--n-neurons", type=int, default=2309, help="network size the feed is wired for")
    sg.add_argument("--seed", type=int, default=_env("SEED", 0, int))
    sg.add_argument("--out", default=_env("OUT", "out/stimulus"))

    run_p = sub.add_parser("run", help="run one experiment (baseline + repetitions)")
    run_p.add_argument("--config", default=None, help="JSON experiment file; flags win")
    run_p.add_argument("--stimulus", choices=stimgen.STIMULI, default=None)
    run_p.add_argument("--attack", choices=[atk.FLO, atk.JAM, "none"], default=None)
    run_p.add_argument("--instant", type=float, default=None, help="FLO attack instant (ms)")
    run_p.add_argument("--window", default=None, help="JAM window t0:t1 (ms)")
    run_p.add_argument("--fraction", type=float, default=None)
    run_p.add_argument("--attack-files", default=None,
                       help="directory with type_attack.txt / *_attributes.txt")
    run_p.add_argument("--type-attack-file", default=None,
                       help="path to type_attack.txt (its directory is read)")
    run_p.add_argument("--reps", type=int, default=None)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--scale", type=float, default=None)
    run_p.add_argument("--n-neurons", type=int, default=None)
    run_p.add_argument("--topology", default=None, help="saved topology directory")
    run_p.add_argument("--lgn-trial", type=int, default=None)
    run_p.add_argument("--orientation", type=float, default=None)
    run_p.add_argument("--out", default=None)
    run_p.add_argument("--no-spikes", action="store_true", help="skip per-run spike CSVs")
    run_p.add_argument("--resample-inputs", action="store_true")

    grid_p = sub.add_parser("grid", help="run the full 36-cell experiment grid")
    grid_p.add_argument("--scale", type=float, default=_env("SCALE", 0.01, float))
    grid_p.add_argument("--out", default=_env("OUT", "out/grid"))
    grid_p.add_argument("--reps", type=int, default=_env("REPS", 10, int))
    grid_p.add_argument("--workers", type=int, default=_env("WORKERS", 1, int))
    grid_p.add_argument("--seed", type=int, default=_env("SEED", 0, int))
    grid_p.add_argument("--no-spikes", action="store_true")

    rep_p = sub.add_parser("report", help="compute an impact report from spike CSVs")
    rep_p.add_argument("--baseline", required=True)
    rep_p.add_argument("--attacked", nargs="+", required=True)
    rep_p.add_argument("--attack", choices=[atk.FLO, atk.JAM], default=None)
    rep_p.add_argument("--instant", type=float, default=None)
    rep_p.add_argument("--window", default=None)
    rep_p.add_argument("--out", default=_env("OUT", "out/report"))
    return parser


def _cmd_topology_build(args) -> int:
    if args.n is None and args.scale is None:
        raise ConfigurationError("topology build needs --n or --scale")
    n = args.n if args.n is not None else atk.round_half_up(args.scale * harness.FULL_SCALE_N)
    spec = TopologySpec(n_neurons=n)
    if args.p_base is not None:
        spec.p_base = args.p_base
    if args.distance_scale is not None:
        spec.distance_scale = args.distance_scale
    topo = build_topology(spec, args.seed)
    problems = validate_topology(topo)
    if problems:
        raise RuntimeFailure(f"generated topology failed validation: {problems[:3]}")
    paths = save_topology(topo, args.out)
    print(f"topology: {topo.n_neurons} neurons, {topo.n_synapses} synapses -> {paths['meta'].parent}")
    return 0


def _cmd_stimulus_gen(args) -> int:
    timeline = stimgen.timeline_for(args.stimulus, args.orientation)
    trial = stimgen.resolve_trial(args.stimulus, args.lgn_trial, args.orientation)
    inputs = stimgen.build_input_set(timeline, trial, args.n_neurons, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.stimulus}_timeline.json").write_text(timeline.to_json())
    paths = stimgen.export_input_csvs(inputs, out)
    print(
        f"{args.stimulus}: lgn trial {trial.lgn_trial} ({inputs.lgn_times.size} spikes), "
        f"bkg trial {trial.bkg_trial} ({inputs.bkg_times.size} spikes) -> {out}"
    )
    for p in paths.values():
        print(f"  {p}")
    return 0


def _attack_from_args(args, base: atk.AttackConfig | None) -> atk.AttackConfig:
    files_dir = args.attack_files
    if args.type_attack_file:
        files_dir = str(Path(args.type_attack_file).parent)
    if files_dir:
        base = atk.read_attack_files(files_dir)
    kind = args.attack if args.attack is not None else (base.kind if base else None)
    if kind is None:
        raise ConfigurationError("run needs --attack, --attack-files or a config file")
    if kind == "none":
        return atk.none_config()
    fraction = args.fraction if args.fraction is not None else (base.target_fraction if base else 0.25)
    if kind == atk.FLO:
        t_attack = args.instant if args.instant is not None else (base.t_attack if base else None)
        if t_attack is None:
            raise ConfigurationError("FLO needs --instant")
        return atk.AttackConfig(kind=atk.FLO, target_fraction=fraction, t_attack=t_attack)
    window = _parse_window(args.window) if args.window else (base.window if base else None)
    if window is None:
        raise ConfigurationError("JAM needs --window t0:t1")
    return atk.AttackConfig(kind=atk.JAM, target_fraction=fraction, window=window)


def _cmd_run(args) -> int:
    base_cfg = None
    if args.config:
        base_cfg = harness.ExperimentConfig.from_jsonable(json.loads(Path(args.config).read_text()))
    base_attack = base_cfg.attack if base_cfg else None
    attack = _attack_from_args(args, base_attack)

    stimulus = args.stimulus or (base_cfg.stimulus if base_cfg else None)
    if stimulus is None:
        raise ConfigurationError("run needs --stimulus or a config file")
    seed = args.seed if args.seed is not None else (base_cfg.base_seed if base_cfg else _env("SEED", 0, int))
    out = args.out or (str(base_cfg.output_dir) if base_cfg else _env("OUT", "out"))
    reps = args.reps if args.reps is not None else (base_cfg.repetitions if base_cfg else _env("REPS", 10, int))

    topology_spec = base_cfg.topology_spec if base_cfg else None
    topology_path = args.topology or (base_cfg.topology_path if base_cfg else None)
    if args.n_neurons is not None:
        topology_spec = TopologySpec(n_neurons=args.n_neurons)
    elif args.scale is not None:
        topology_spec = TopologySpec(n_neurons=atk.round_half_up(args.scale * harness.FULL_SCALE_N))
    elif topology_spec is None and topology_path is None:
        scale = _env("SCALE", 0.01, float)
        topology_spec = TopologySpec(n_neurons=atk.round_half_up(scale * harness.FULL_SCALE_N))

    config = harness.ExperimentConfig(
        stimulus=stimulus,
        attack=attack.with_selection_seed(seed),
        output_dir=out,
        topology_spec=topology_spec,
        topology_path=topology_path,
        topology_seed=(base_cfg.topology_seed if base_cfg else seed + 1),
        lgn_trial=args.lgn_trial if args.lgn_trial is not None else (base_cfg.lgn_trial if base_cfg else 9),
        orientation_deg=args.orientation if args.orientation is not None else (base_cfg.orientation_deg if base_cfg else 90.0),
        repetitions=reps,
        base_seed=seed,
        feed=(base_cfg.feed if base_cfg else stimgen.FeedSpec()),
        sim=(base_cfg.sim if base_cfg else engine.SimConfig()),
        write_spikes=not args.no_spikes,
        resample_inputs=args.resample_inputs or (base_cfg.resample_inputs if base_cfg else False),
    )
    manifest, report = harness.run_experiment(config)
    first_iv = report.meta.get("attack_interval_first")
    print(f"experiment {manifest.experiment_id}: {len(manifest.runs)} runs -> {manifest.output_dir}")
    if first_iv is not None:
        print(
            f"  attack interval {first_iv}: delta {report.delta[first_iv]:+.1f} "
            f"({report.percent[first_iv]:+.2f}%), shift {report.shift_pct[first_iv]:.1f}%"
        )
        print(f"  recovery: {report.recovery_intervals} intervals; rebound: {report.rebound_peak}")
    return 0


def _cmd_grid(args) -> int:
    manifests = harness.run_grid(
        scale=args.scale,
        output_dir=args.out,
        repetitions=args.reps,
        workers=args.workers,
        base_seed=args.seed,
        write_spikes=not args.no_spikes,
    )
    print(f"grid: {len(manifests)} cells completed -> {args.out}/grid_summary.csv")
    return 0 if len(manifests) == 36 else 2


def _cmd_report(args) -> int:
    baseline = engine.SpikeRecord.from_csv(args.baseline)
    attacked = [engine.SpikeRecord.from_csv(p) for p in args.attacked]
    kind = args.attack or (attacked[0].meta.get("attack", "none") if attacked else "none")
    window = _parse_window(args.window) if args.window else None
    report = metrics.build_impact_report(
        baseline,
        attacked,
        attack_kind=kind if kind in (atk.FLO, atk.JAM) else "none",
        t_attack=args.instant,
        window=window,
    )
    out = Path(args.out)
    metrics.report_to_csv(report, out / "impact_report.csv")
    metrics.report_to_json(report, out / "impact_report.json")
    print(f"report over {len(attacked)} repetitions -> {out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage()
            return 1
        if args.command == "topology":
            if getattr(args, "subcommand", None) != "build":
                parser.print_usage()
                return 1
            return _cmd_topology_build(args)
        if args.command == "stimulus":
            if getattr(args, "subcommand", None) != "gen":
                parser.print_usage()
                return 1
            return _cmd_stimulus_gen(args)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "grid":
            return _cmd_grid(args)
        if args.command == "report":
            return _cmd_report(args)
        parser.print_usage()
        return 1
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except RuntimeFailure as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
