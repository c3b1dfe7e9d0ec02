"""FLO/JAM attack hooks, random target selection, and per-stimulus schedules.

FLO (flooding) forces targeted voltages to each neuron's own threshold at a
single instant, so every non-refractory target fires right then. JAM (jamming)
clamps targeted voltages to each neuron's reset value at every step of a time
window, silencing the targets for its whole duration. Hooks are immutable
after construction and safe to share across parallel runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .engine import AttackHook, SimState
from .errors import ConfigurationError
from .model import Topology

FLO = "FLO"
JAM = "JAM"
NONE = "none"

VOLTAGE_MODE_THRESHOLD = "threshold"
VOLTAGE_MODE_RESET = "reset"

DEFAULT_JAM_WINDOW_MS = 100.0

# Attack instants / windows per (stimulus, kind): three relevant events each.
SCHEDULE_INSTANTS = {
    ("flash", FLO): (625.0, 1300.0, 1875.0),
    ("movie", FLO): (450.0, 550.0, 1600.0),
    ("gratings", FLO): (450.0, 600.0, 1600.0),
}
SCHEDULE_WINDOWS = {
    ("flash", JAM): ((600.0, 700.0), (1300.0, 1400.0), (1800.0, 1900.0)),
    ("movie", JAM): ((400.0, 500.0), (500.0, 600.0), (1600.0, 1700.0)),
    ("gratings", JAM): ((400.0, 500.0), (600.0, 700.0), (1600.0, 1700.0)),
}

TYPE_ATTACK_FILE = "type_attack.txt"
FLO_ATTRIBUTES_FILE = "FLO_attributes.txt"
JAM_ATTRIBUTES_FILE = "JAM_attributes.txt"


@dataclass(frozen=True)
class AttackConfig:
    kind: str  # FLO | JAM | none
    target_fraction: float = 0.25
    t_attack: float | None = None
    window: tuple[float, float] | None = None
    voltage_mode: str | None = None
    selection_seed: int = 0

    def __post_init__(self):
        if self.kind not in (FLO, JAM, NONE):
            raise ConfigurationError(f"unknown attack kind {self.kind!r}")
        if self.kind != NONE and not 0.0 < self.target_fraction <= 1.0:
            raise ConfigurationError(
                f"target_fraction must be in (0, 1], got {self.target_fraction}"
            )
        if self.kind == FLO:
            if self.t_attack is None:
                raise ConfigurationError("FLO requires t_attack")
            mode = self.voltage_mode or VOLTAGE_MODE_THRESHOLD
            if mode != VOLTAGE_MODE_THRESHOLD:
                raise ConfigurationError("FLO voltage_mode must be 'threshold'")
            object.__setattr__(self, "voltage_mode", mode)
        elif self.kind == JAM:
            if self.window is None:
                raise ConfigurationError("JAM requires a window")
            t0, t1 = self.window
            if not t1 - t0 > 0:
                raise ConfigurationError(f"JAM window must have t1 > t0, got {self.window}")
            mode = self.voltage_mode or VOLTAGE_MODE_RESET
            if mode != VOLTAGE_MODE_RESET:
                raise ConfigurationError("JAM voltage_mode must be 'reset'")
            object.__setattr__(self, "voltage_mode", mode)

    def validate_timing(self, dt: float, duration: float) -> None:
        if self.kind == FLO:
            step = self.t_attack / dt
            if abs(step - round(step)) > 1e-9:
                raise ConfigurationError(
                    f"t_attack {self.t_attack} is not aligned to the {dt} ms grid"
                )
            if not 0.0 <= self.t_attack < duration:
                raise ConfigurationError(f"t_attack {self.t_attack} outside [0, {duration})")
        elif self.kind == JAM:
            t0, t1 = self.window
            if not (0.0 <= t0 and t1 <= duration):
                raise ConfigurationError(f"window {self.window} outside [0, {duration}]")

    def param_string(self) -> str:
        if self.kind == FLO:
            return f"t={self.t_attack:g}"
        if self.kind == JAM:
            return f"w={self.window[0]:g}-{self.window[1]:g}"
        return ""

    def with_selection_seed(self, seed: int) -> "AttackConfig":
        return replace(self, selection_seed=seed)

    def to_jsonable(self) -> dict:
        return {
            "kind": self.kind,
            "target_fraction": self.target_fraction,
            "t_attack": self.t_attack,
            "window": list(self.window) if self.window else None,
            "voltage_mode": self.voltage_mode,
            "selection_seed": self.selection_seed,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "AttackConfig":
        return cls(
            kind=d["kind"],
            target_fraction=d["target_fraction"],
            t_attack=d["t_attack"],
            window=tuple(d["window"]) if d.get("window") else None,
            voltage_mode=d.get("voltage_mode"),
            selection_seed=d.get("selection_seed", 0),
        )


def none_config() -> AttackConfig:
    return AttackConfig(kind=NONE, target_fraction=1.0)


@dataclass(frozen=True)
class TargetSet:
    """Randomly selected victim neurons; size is round-half-up(fraction * N)."""

    neuron_ids: np.ndarray
    fraction_requested: float
    seed: int

    @property
    def size(self) -> int:
        return int(self.neuron_ids.shape[0])


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def select_targets(topology: Topology, fraction: float, seed: int) -> TargetSet:
    """Uniform sample without replacement over all neurons, all layers."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"fraction must be in (0, 1], got {fraction}")
    n = topology.n_neurons
    k = round_half_up(fraction * n)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(9,)))
    ids = np.sort(rng.choice(n, size=k, replace=False)).astype(np.int64)
    ids.flags.writeable = False
    return TargetSet(neuron_ids=ids, fraction_requested=fraction, seed=int(seed))


def flo_hook(targets: TargetSet, t_attack: float) -> AttackHook:
    """Force v := per-neuron threshold for every target at exactly t_attack."""
    ids = targets.neuron_ids

    def hook(t: float, state: SimState) -> None:
        if state.step == int(round(t_attack / state.dt)):
            state.v[ids] = state.v_threshold[ids]

    return hook


def jam_hook(targets: TargetSet, window: tuple[float, float]) -> AttackHook:
    """Clamp v := per-neuron reset for every target at each step in [t0, t1)."""
    ids = targets.neuron_ids
    t0, t1 = window

    def hook(t: float, state: SimState) -> None:
        s0 = int(math.ceil(t0 / state.dt - 1e-9))
        s1 = int(math.ceil(t1 / state.dt - 1e-9))
        if s0 <= state.step < s1:
            state.v[ids] = state.v_reset[ids]

    return hook


def build_attack(config: AttackConfig, topology: Topology) -> tuple[TargetSet | None, AttackHook | None]:
    """Select targets and construct the matching hook; (None, None) for no attack."""
    if config.kind == NONE:
        return None, None
    targets = select_targets(topology, config.target_fraction, config.selection_seed)
    if config.kind == FLO:
        return targets, flo_hook(targets, config.t_attack)
    return targets, jam_hook(targets, config.window)


def attack_schedule(
    stimulus: str,
    kind: str,
    target_fraction: float = 0.25,
    selection_seed: int = 0,
) -> list[AttackConfig]:
    """The three per-event attack configs for one (stimulus, kind) pair.

    Each config is meant to be run individually; combined multi-event runs are
    deliberately not representable.
    """
    if stimulus not in ("flash", "movie", "gratings"):
        raise ConfigurationError(f"unknown stimulus {stimulus!r}")
    if kind == FLO:
        return [
            AttackConfig(kind=FLO, target_fraction=target_fraction, t_attack=t, selection_seed=selection_seed)
            for t in SCHEDULE_INSTANTS[(stimulus, FLO)]
        ]
    if kind == JAM:
        return [
            AttackConfig(kind=JAM, target_fraction=target_fraction, window=w, selection_seed=selection_seed)
            for w in SCHEDULE_WINDOWS[(stimulus, JAM)]
        ]
    raise ConfigurationError(f"attack_schedule expects FLO or JAM, got {kind!r}")


def write_attack_files(config: AttackConfig, out_dir: str | Path) -> dict[str, Path]:
    """Write the external parameter files describing one attack configuration."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"type": out / TYPE_ATTACK_FILE}
    kind_label = config.kind if config.kind != NONE else "NONE"
    paths["type"].write_text(f"type_attack={kind_label}\n")
    if config.kind == FLO:
        paths["attributes"] = out / FLO_ATTRIBUTES_FILE
        paths["attributes"].write_text(
            f"t_attack_ms={config.t_attack:g}\n"
            f"target_fraction={config.target_fraction:g}\n"
            f"voltage_mode={config.voltage_mode}\n"
        )
    elif config.kind == JAM:
        paths["attributes"] = out / JAM_ATTRIBUTES_FILE
        paths["attributes"].write_text(
            f"t0_ms={config.window[0]:g}\n"
            f"t1_ms={config.window[1]:g}\n"
            f"target_fraction={config.target_fraction:g}\n"
            f"voltage_mode={config.voltage_mode}\n"
        )
    return paths


def _parse_kv(path: Path) -> dict[str, str]:
    entries = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path.name}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def read_attack_files(in_dir: str | Path, selection_seed: int = 0) -> AttackConfig:
    """Reconstruct an AttackConfig from the external parameter files."""
    src = Path(in_dir)
    type_path = src / TYPE_ATTACK_FILE
    if not type_path.exists():
        raise ConfigurationError(f"missing {TYPE_ATTACK_FILE} in {src}")
    kind = _parse_kv(type_path).get("type_attack", "").upper()
    if kind == "NONE":
        return none_config()
    if kind == FLO:
        attrs = _parse_kv(src / FLO_ATTRIBUTES_FILE)
        return AttackConfig(
            kind=FLO,
            target_fraction=float(attrs["target_fraction"]),
            t_attack=float(attrs["t_attack_ms"]),
            voltage_mode=attrs.get("voltage_mode", VOLTAGE_MODE_THRESHOLD),
            selection_seed=selection_seed,
        )
    if kind == JAM:
        attrs = _parse_kv(src / JAM_ATTRIBUTES_FILE)
        return AttackConfig(
            kind=JAM,
            target_fraction=float(attrs["target_fraction"]),
            window=(float(attrs["t0_ms"]), float(attrs["t1_ms"])),
            voltage_mode=attrs.get("voltage_mode", VOLTAGE_MODE_RESET),
            selection_seed=selection_seed,
        )
    raise ConfigurationError(f"{TYPE_ATTACK_FILE}: unknown attack type {kind!r}")
