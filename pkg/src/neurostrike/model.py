"""Neuron/synapse parameterization and layered topology generation.

Builds scaled analogs of a six-layer visual-cortex microcircuit: leaky
integrate-and-fire point neurons (hard threshold, reset, absolute refractory)
placed in a cylindrical volume, connected with distance-dependent probability
and polarity-signed weights. Generation is a pure function of (spec, seed).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigurationError

LAYERS = ("L1", "L23", "L4", "L5", "L6")

# Stacked slab thickness per layer, micrometers (top of L1 at z=0, z grows down).
LAYER_THICKNESS_UM = {"L1": 100.0, "L23": 250.0, "L4": 200.0, "L5": 250.0, "L6": 200.0}

EXCITATORY = "excitatory"
INHIBITORY = "inhibitory"

DEFAULT_LAYER_FRACTIONS = {"L1": 0.02, "L23": 0.26, "L4": 0.29, "L5": 0.27, "L6": 0.16}
DEFAULT_INHIBITORY_FRACTION = 0.15

# Base membrane constants; each neuron gets a multiplicative +-10% jitter so
# "individual" threshold/reset voltages are meaningful per neuron.
BASE_V_THRESHOLD_MV = -50.0
BASE_V_RESET_MV = -70.0
BASE_E_LEAK_MV = -70.0
BASE_TAU_MEMBRANE_MS = 10.0
BASE_CAPACITANCE_PF = 100.0
BASE_T_REFRACTORY_MS = 2.0
PARAM_JITTER = 0.10

TOPOLOGY_FORMAT_VERSION = 1

_GEN_CHUNK = 512  # fixed pre-neuron block size; part of the deterministic procedure


@dataclass(frozen=True)
class NeuronParams:
    """Constants of one point neuron (voltages mV, times ms, capacitance pF)."""

    v_threshold: float
    v_reset: float
    e_leak: float
    tau_membrane: float
    capacitance: float
    t_refractory: float
    polarity: str
    layer: str
    position: tuple[float, float, float]


@dataclass(frozen=True)
class Synapse:
    """Directed connection pre -> post with a signed PSP amplitude (mV) and delay (ms)."""

    pre: int
    post: int
    weight: float
    delay: float


def default_weight_distribution(
    exc: tuple[float, float] = (0.9, 0.3),
    inh: tuple[float, float] = (-4.0, 1.2),
) -> dict[tuple[str, str], tuple[float, float]]:
    """(pre-polarity, post-layer) -> (mean, sd) of the PSP amplitude in mV.

    The sign convention lives in the mean; sampling folds magnitudes so the
    polarity sign rule holds for every draw.
    """
    dist: dict[tuple[str, str], tuple[float, float]] = {}
    for layer in LAYERS:
        dist[(EXCITATORY, layer)] = exc
        dist[(INHIBITORY, layer)] = inh
    return dist


@dataclass
class TopologySpec:
    """Scaling knobs standing in for the full reconstruction.

    ``n_neurons`` is the total count; layer proportions, E/I split, the
    distance-dependent connection rule p(d) = p_base * exp(-d / distance_scale)
    and weight/delay distributions are all overridable per experiment.
    """

    n_neurons: int
    layer_fractions: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_LAYER_FRACTIONS)
    )
    inhibitory_fraction: float = DEFAULT_INHIBITORY_FRACTION
    p_base: float = 0.08
    distance_scale: float = 200.0
    weight_distribution: dict[tuple[str, str], tuple[float, float]] = field(
        default_factory=default_weight_distribution
    )
    delay_range: tuple[float, float] = (1.0, 4.0)
    # inhibition acts effectively disynaptically, hence with extra lag
    inhibitory_delay_range: tuple[float, float] | None = (6.0, 16.0)
    cylinder_radius: float = 845.0

    def validate(self) -> None:
        if self.n_neurons < 2:
            raise ConfigurationError(f"n_neurons must be >= 2, got {self.n_neurons}")
        for layer, frac in self.layer_fractions.items():
            if layer not in LAYERS:
                raise ConfigurationError(f"layer_fractions: unknown layer {layer!r}")
            if not 0.0 <= frac <= 1.0:
                raise ConfigurationError(f"layer_fractions[{layer}] out of [0,1]: {frac}")
        total = sum(self.layer_fractions.get(layer, 0.0) for layer in LAYERS)
        if abs(total - 1.0) > 1e-9:
            raise ConfigurationError(f"layer_fractions must sum to 1, got {total}")
        if not 0.0 <= self.inhibitory_fraction <= 1.0:
            raise ConfigurationError(
                f"inhibitory_fraction out of [0,1]: {self.inhibitory_fraction}"
            )
        if not 0.0 <= self.p_base <= 1.0:
            raise ConfigurationError(f"p_base out of [0,1]: {self.p_base}")
        if self.distance_scale <= 0:
            raise ConfigurationError(f"distance_scale must be > 0: {self.distance_scale}")
        lo, hi = self.delay_range
        if not (0 < lo <= hi):
            raise ConfigurationError(f"delay_range must satisfy 0 < lo <= hi: {self.delay_range}")
        if self.inhibitory_delay_range is not None:
            ilo, ihi = self.inhibitory_delay_range
            if not (0 < ilo <= ihi):
                raise ConfigurationError(
                    f"inhibitory_delay_range must satisfy 0 < lo <= hi: {self.inhibitory_delay_range}"
                )
        if self.cylinder_radius <= 0:
            raise ConfigurationError(f"cylinder_radius must be > 0: {self.cylinder_radius}")
        n_positive = sum(1 for f in self.layer_fractions.values() if f > 0)
        if self.n_neurons < n_positive:
            raise ConfigurationError(
                f"n_neurons={self.n_neurons} cannot populate {n_positive} layers "
                "with positive fractions"
            )

    def to_jsonable(self) -> dict:
        d = asdict(self)
        d["weight_distribution"] = {
            f"{pol}/{layer}": list(ms) for (pol, layer), ms in self.weight_distribution.items()
        }
        d["delay_range"] = list(self.delay_range)
        if self.inhibitory_delay_range is not None:
            d["inhibitory_delay_range"] = list(self.inhibitory_delay_range)
        return d

    @classmethod
    def from_jsonable(cls, d: dict) -> "TopologySpec":
        d = dict(d)
        wd = {}
        for key, ms in d["weight_distribution"].items():
            pol, layer = key.split("/")
            wd[(pol, layer)] = (float(ms[0]), float(ms[1]))
        d["weight_distribution"] = wd
        d["delay_range"] = tuple(d["delay_range"])
        if d.get("inhibitory_delay_range") is not None:
            d["inhibitory_delay_range"] = tuple(d["inhibitory_delay_range"])
        return cls(**d)


@dataclass
class Topology:
    """Column-oriented network: per-neuron arrays plus flat synapse arrays.

    Neuron ids are dense [0, N) and index every array. ``layer`` holds indices
    into LAYERS; ``is_inhibitory`` encodes polarity.
    """

    v_threshold: np.ndarray
    v_reset: np.ndarray
    e_leak: np.ndarray
    tau_membrane: np.ndarray
    capacitance: np.ndarray
    t_refractory: np.ndarray
    layer: np.ndarray
    is_inhibitory: np.ndarray
    positions: np.ndarray  # (N, 3) micrometers
    syn_pre: np.ndarray
    syn_post: np.ndarray
    syn_weight: np.ndarray
    syn_delay: np.ndarray
    seed: int = 0
    spec: TopologySpec | None = None

    @property
    def n_neurons(self) -> int:
        return int(self.v_threshold.shape[0])

    @property
    def n_synapses(self) -> int:
        return int(self.syn_pre.shape[0])

    @property
    def layer_counts(self) -> dict[str, int]:
        return {name: int(np.sum(self.layer == i)) for i, name in enumerate(LAYERS)}

    def neuron_params(self, i: int) -> NeuronParams:
        return NeuronParams(
            v_threshold=float(self.v_threshold[i]),
            v_reset=float(self.v_reset[i]),
            e_leak=float(self.e_leak[i]),
            tau_membrane=float(self.tau_membrane[i]),
            capacitance=float(self.capacitance[i]),
            t_refractory=float(self.t_refractory[i]),
            polarity=INHIBITORY if self.is_inhibitory[i] else EXCITATORY,
            layer=LAYERS[int(self.layer[i])],
            position=tuple(float(x) for x in self.positions[i]),
        )

    def synapse(self, k: int) -> Synapse:
        return Synapse(
            pre=int(self.syn_pre[k]),
            post=int(self.syn_post[k]),
            weight=float(self.syn_weight[k]),
            delay=float(self.syn_delay[k]),
        )

    @classmethod
    def from_lists(
        cls,
        neurons: list[NeuronParams],
        synapses: list[Synapse],
        seed: int = 0,
        spec: TopologySpec | None = None,
    ) -> "Topology":
        """Hand-construction path used by tests and tiny fixtures."""
        n = len(neurons)
        layer_idx = np.array([LAYERS.index(p.layer) for p in neurons], dtype=np.int8)
        return cls(
            v_threshold=np.array([p.v_threshold for p in neurons], dtype=np.float64),
            v_reset=np.array([p.v_reset for p in neurons], dtype=np.float64),
            e_leak=np.array([p.e_leak for p in neurons], dtype=np.float64),
            tau_membrane=np.array([p.tau_membrane for p in neurons], dtype=np.float64),
            capacitance=np.array([p.capacitance for p in neurons], dtype=np.float64),
            t_refractory=np.array([p.t_refractory for p in neurons], dtype=np.float64),
            layer=layer_idx,
            is_inhibitory=np.array([p.polarity == INHIBITORY for p in neurons], dtype=bool),
            positions=np.array([p.position for p in neurons], dtype=np.float64).reshape(n, 3),
            syn_pre=np.array([s.pre for s in synapses], dtype=np.int32),
            syn_post=np.array([s.post for s in synapses], dtype=np.int32),
            syn_weight=np.array([s.weight for s in synapses], dtype=np.float64),
            syn_delay=np.array([s.delay for s in synapses], dtype=np.float64),
            seed=seed,
            spec=spec,
        )


def allocate_layer_counts(n_neurons: int, fractions: dict[str, float]) -> dict[str, int]:
    """Largest-remainder apportionment summing exactly to n_neurons.

    Layers with positive fraction are guaranteed at least one neuron (stolen
    from the largest layer when rounding zeroes them out).
    """
    fr = [fractions.get(layer, 0.0) for layer in LAYERS]
    base = [math.floor(f * n_neurons) for f in fr]
    remainders = [f * n_neurons - b for f, b in zip(fr, base)]
    short = n_neurons - sum(base)
    order = sorted(range(len(LAYERS)), key=lambda i: (-remainders[i], i))
    for i in order[:short]:
        base[i] += 1
    for i, f in enumerate(fr):
        if f > 0 and base[i] == 0:
            donor = max(range(len(base)), key=lambda k: base[k])
            base[donor] -= 1
            base[i] += 1
    return {layer: base[i] for i, layer in enumerate(LAYERS)}


def _sample_positions(rng: np.random.Generator, counts: dict[str, int], radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Uniform positions in the cylinder cross-section, stacked layer slabs in z."""
    n = sum(counts.values())
    pos = np.empty((n, 3), dtype=np.float64)
    layer_idx = np.empty(n, dtype=np.int8)
    z0 = 0.0
    offset = 0
    for i, layer in enumerate(LAYERS):
        c = counts[layer]
        thickness = LAYER_THICKNESS_UM[layer]
        if c > 0:
            r = radius * np.sqrt(rng.uniform(size=c))
            theta = rng.uniform(0.0, 2.0 * np.pi, size=c)
            pos[offset : offset + c, 0] = r * np.cos(theta)
            pos[offset : offset + c, 1] = r * np.sin(theta)
            pos[offset : offset + c, 2] = rng.uniform(z0, z0 + thickness, size=c)
            layer_idx[offset : offset + c] = i
        z0 += thickness
        offset += c
    return pos, layer_idx


def build_topology(spec: TopologySpec, seed: int) -> Topology:
    """Generate a topology; bit-identical for identical (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed)))
    n = spec.n_neurons
    counts = allocate_layer_counts(n, spec.layer_fractions)

    positions, layer_idx = _sample_positions(rng, counts, spec.cylinder_radius)

    # Inhibitory assignment: round-half-up count per layer, uniformly placed.
    is_inh = np.zeros(n, dtype=bool)
    offset = 0
    for layer in LAYERS:
        c = counts[layer]
        if c > 0:
            k = int(math.floor(spec.inhibitory_fraction * c + 0.5))
            picks = rng.permutation(c)[:k]
            is_inh[offset + picks] = True
        offset += c

    jitter = lambda base, size: base * rng.uniform(1.0 - PARAM_JITTER, 1.0 + PARAM_JITTER, size)
    v_th = jitter(BASE_V_THRESHOLD_MV, n)
    v_reset = jitter(BASE_V_RESET_MV, n)
    e_leak = jitter(BASE_E_LEAK_MV, n)
    tau_m = jitter(BASE_TAU_MEMBRANE_MS, n)
    cap = jitter(BASE_CAPACITANCE_PF, n)
    t_ref = jitter(BASE_T_REFRACTORY_MS, n)

    # Weight lookup tables indexed by (is_inhibitory, post-layer).
    w_mean = np.empty((2, len(LAYERS)))
    w_sd = np.empty((2, len(LAYERS)))
    for li, layer in enumerate(LAYERS):
        w_mean[0, li], w_sd[0, li] = spec.weight_distribution[(EXCITATORY, layer)]
        w_mean[1, li], w_sd[1, li] = spec.weight_distribution[(INHIBITORY, layer)]

    pre_chunks: list[np.ndarray] = []
    post_chunks: list[np.ndarray] = []
    weight_chunks: list[np.ndarray] = []
    delay_chunks: list[np.ndarray] = []
    finite_scale = np.isfinite(spec.distance_scale)
    lo_d, hi_d = spec.delay_range
    for start in range(0, n, _GEN_CHUNK):
        stop = min(start + _GEN_CHUNK, n)
        block = positions[start:stop]  # (B, 3)
        if finite_scale:
            d = np.sqrt(((block[:, None, :] - positions[None, :, :]) ** 2).sum(axis=2))
            p = spec.p_base * np.exp(-d / spec.distance_scale)
        else:
            p = np.full((stop - start, n), spec.p_base)
        draw = rng.uniform(size=p.shape)
        hit = draw < p
        rows = np.arange(start, stop)
        hit[rows - start, rows] = False  # no self-synapses
        pre_rel, post = np.nonzero(hit)
        pre = (pre_rel + start).astype(np.int32)
        post = post.astype(np.int32)
        m = pre.shape[0]
        z = rng.standard_normal(m)
        mu = w_mean[is_inh[pre].astype(np.int8), layer_idx[post]]
        sd = w_sd[is_inh[pre].astype(np.int8), layer_idx[post]]
        magnitude = np.abs(mu + sd * z)  # folded normal keeps weights off zero
        sign = np.where(is_inh[pre], -1.0, 1.0)
        weight = sign * magnitude
        u = rng.uniform(size=m)
        if spec.inhibitory_delay_range is not None:
            lo = np.where(is_inh[pre], spec.inhibitory_delay_range[0], lo_d)
            hi = np.where(is_inh[pre], spec.inhibitory_delay_range[1], hi_d)
            delay = lo + u * (hi - lo)
        else:
            delay = lo_d + u * (hi_d - lo_d)
        pre_chunks.append(pre)
        post_chunks.append(post)
        weight_chunks.append(weight)
        delay_chunks.append(delay)

    return Topology(
        v_threshold=v_th,
        v_reset=v_reset,
        e_leak=e_leak,
        tau_membrane=tau_m,
        capacitance=cap,
        t_refractory=t_ref,
        layer=layer_idx,
        is_inhibitory=is_inh,
        positions=positions,
        syn_pre=np.concatenate(pre_chunks) if pre_chunks else np.empty(0, dtype=np.int32),
        syn_post=np.concatenate(post_chunks) if post_chunks else np.empty(0, dtype=np.int32),
        syn_weight=np.concatenate(weight_chunks) if weight_chunks else np.empty(0),
        syn_delay=np.concatenate(delay_chunks) if delay_chunks else np.empty(0),
        seed=int(seed),
        spec=spec,
    )


def expected_connection_stats(spec: TopologySpec, topology: Topology) -> tuple[float, float]:
    """(mean, sd) of the connection count implied by p(d) over the placed positions."""
    n = topology.n_neurons
    total_p = 0.0
    total_var = 0.0
    for start in range(0, n, _GEN_CHUNK):
        stop = min(start + _GEN_CHUNK, n)
        block = topology.positions[start:stop]
        if np.isfinite(spec.distance_scale):
            d = np.sqrt(((block[:, None, :] - topology.positions[None, :, :]) ** 2).sum(axis=2))
            p = spec.p_base * np.exp(-d / spec.distance_scale)
        else:
            p = np.full((stop - start, n), spec.p_base)
        rows = np.arange(start, stop)
        p[rows - start, rows] = 0.0
        total_p += float(p.sum())
        total_var += float((p * (1.0 - p)).sum())
    return total_p, math.sqrt(total_var)


def validate_topology(t: Topology) -> list[str]:
    """Scan every neuron/synapse invariant; returns violations, never raises."""
    violations: list[str] = []
    n = t.n_neurons

    bad = np.nonzero(~(t.v_reset < t.v_threshold))[0]
    violations += [f"neuron {i}: v_reset >= v_threshold" for i in bad]
    bad = np.nonzero(t.tau_membrane <= 0)[0]
    violations += [f"neuron {i}: tau_membrane <= 0" for i in bad]
    bad = np.nonzero(t.capacitance <= 0)[0]
    violations += [f"neuron {i}: capacitance <= 0" for i in bad]
    bad = np.nonzero(t.t_refractory < 0)[0]
    violations += [f"neuron {i}: t_refractory < 0" for i in bad]

    if t.spec is not None:
        radius = np.sqrt(t.positions[:, 0] ** 2 + t.positions[:, 1] ** 2)
        bad = np.nonzero(radius > t.spec.cylinder_radius * (1 + 1e-12))[0]
        violations += [f"neuron {i}: position outside cylinder radius" for i in bad]
        height = sum(LAYER_THICKNESS_UM.values())
        bad = np.nonzero((t.positions[:, 2] < 0) | (t.positions[:, 2] > height))[0]
        violations += [f"neuron {i}: position outside layer stack" for i in bad]

    if t.n_synapses:
        bad = np.nonzero((t.syn_pre < 0) | (t.syn_pre >= n) | (t.syn_post < 0) | (t.syn_post >= n))[0]
        violations += [f"synapse {k}: neuron id out of range" for k in bad]
        bad = np.nonzero(t.syn_pre == t.syn_post)[0]
        violations += [f"synapse {k}: no self-synapses" for k in bad]
        bad = np.nonzero(t.syn_delay <= 0)[0]
        violations += [f"synapse {k}: delay must be positive" for k in bad]
        valid_pre = (t.syn_pre >= 0) & (t.syn_pre < n)
        sign_ok = np.ones(t.n_synapses, dtype=bool)
        sign_ok[valid_pre] = np.where(
            t.is_inhibitory[t.syn_pre[valid_pre]],
            t.syn_weight[valid_pre] < 0,
            t.syn_weight[valid_pre] > 0,
        )
        bad = np.nonzero(~sign_ok)[0]
        violations += [f"synapse {k}: weight sign does not match pre polarity" for k in bad]

    for layer, frac in (t.spec.layer_fractions.items() if t.spec else []):
        if frac > 0 and t.layer_counts[layer] == 0:
            violations.append(f"layer {layer}: empty despite positive fraction")
    return violations


def save_topology(t: Topology, out_dir: str | Path) -> dict[str, Path]:
    """Write neurons.csv / synapses.csv / topology.json under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    neurons = pd.DataFrame(
        {
            "id": np.arange(t.n_neurons, dtype=np.int64),
            "layer": [LAYERS[i] for i in t.layer],
            "polarity": np.where(t.is_inhibitory, INHIBITORY, EXCITATORY),
            "x": t.positions[:, 0],
            "y": t.positions[:, 1],
            "z": t.positions[:, 2],
            "v_th": t.v_threshold,
            "v_reset": t.v_reset,
            "e_leak": t.e_leak,
            "tau_m": t.tau_membrane,
            "t_ref": t.t_refractory,
            "capacitance": t.capacitance,
        }
    )
    synapses = pd.DataFrame(
        {"pre": t.syn_pre, "post": t.syn_post, "weight": t.syn_weight, "delay": t.syn_delay}
    )
    paths = {
        "neurons": out / "neurons.csv",
        "synapses": out / "synapses.csv",
        "meta": out / "topology.json",
    }
    neurons.to_csv(paths["neurons"], index=False)
    synapses.to_csv(paths["synapses"], index=False)
    meta = {
        "format_version": TOPOLOGY_FORMAT_VERSION,
        "seed": t.seed,
        "n_neurons": t.n_neurons,
        "n_synapses": t.n_synapses,
        "layer_counts": t.layer_counts,
        "spec": t.spec.to_jsonable() if t.spec is not None else None,
    }
    paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True))
    return paths


def load_topology(in_dir: str | Path) -> Topology:
    src = Path(in_dir)
    meta = json.loads((src / "topology.json").read_text())
    if meta["format_version"] != TOPOLOGY_FORMAT_VERSION:
        raise ConfigurationError(
            f"unsupported topology format_version {meta['format_version']}"
        )
    neurons = pd.read_csv(src / "neurons.csv")
    synapses = pd.read_csv(src / "synapses.csv")
    layer_idx = np.array([LAYERS.index(name) for name in neurons["layer"]], dtype=np.int8)
    spec = TopologySpec.from_jsonable(meta["spec"]) if meta.get("spec") else None
    return Topology(
        v_threshold=neurons["v_th"].to_numpy(np.float64),
        v_reset=neurons["v_reset"].to_numpy(np.float64),
        e_leak=neurons["e_leak"].to_numpy(np.float64),
        tau_membrane=neurons["tau_m"].to_numpy(np.float64),
        capacitance=neurons["capacitance"].to_numpy(np.float64),
        t_refractory=neurons["t_ref"].to_numpy(np.float64),
        layer=layer_idx,
        is_inhibitory=(neurons["polarity"] == INHIBITORY).to_numpy(),
        positions=neurons[["x", "y", "z"]].to_numpy(np.float64),
        syn_pre=synapses["pre"].to_numpy(np.int32),
        syn_post=synapses["post"].to_numpy(np.int32),
        syn_weight=synapses["weight"].to_numpy(np.float64),
        syn_delay=synapses["delay"].to_numpy(np.float64),
        seed=int(meta["seed"]),
        spec=spec,
    )
