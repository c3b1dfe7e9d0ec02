"""Clock-driven LIF simulation at fixed resolution with delayed PSP delivery.

Update rule (the complete per-step contract, at step s, time t = s*dt):

1. v += pending[s]            delayed recurrent PSPs; the buffer holds, per
                              (arrival step, neuron), the running sum of PSPs
                              accumulated at emission time in ascending
                              (pre id, synapse order within pre).
2. v += visual_increment[s]   per-target sums of this step's visual feed PSPs
   v += background_increment  (summed in spike order, then in feed-row order),
                              followed by the background feed the same way.
3. v <- (v - E_L)*alpha + (E_L + I*R*(1 - alpha))
                              exact exponential leak over dt with optional
                              constant current I; alpha = exp(-dt/tau_m),
                              R = tau_m/C.
4. hook(t, state)             attack injection; may overwrite any voltage.
5. fired = (v >= V_th) and not refractory (refractory iff t < refractory_until)
                              spikes are stamped t; v[fired] = V_reset;
                              refractory_until[fired] = t + t_ref; outgoing
                              PSPs are buffered for step s + delay/dt.
6. v[refractory] = V_reset    refractory clamp: holds the reset value through
                              the refractory window, wiping inputs, leak and
                              forced voltages alike.

Input spikes at continuous time tau are delivered at step floor(tau/dt), the
step whose window [t, t+dt) contains them. The hook placement (before the
threshold test) means a forced-to-threshold voltage fires in the same step and
a forced-to-reset voltage wins over synaptic input within the step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from .errors import ConfigurationError
from .model import Topology
from .stimgen import InputSpikeSet

SPIKE_CSV_COLUMNS = (
    "time_ms",
    "neuron_id",
    "run_id",
    "attack",
    "attack_param",
    "lgn_trial",
    "bkg_trial",
)


@dataclass
class SimConfig:
    duration: float = 3000.0
    dt: float = 0.25
    record: str = "all_spikes"
    seed: int = 0

    def validate(self) -> int:
        """Returns the step count; raises on invalid fields."""
        if self.duration <= 0:
            raise ConfigurationError(f"duration must be > 0, got {self.duration}")
        if self.dt <= 0:
            raise ConfigurationError(f"dt must be > 0, got {self.dt}")
        n_steps = round(self.duration / self.dt)
        if abs(n_steps * self.dt - self.duration) > 1e-9:
            raise ConfigurationError(
                f"duration {self.duration} is not an integer multiple of dt {self.dt}"
            )
        if self.record != "all_spikes":
            raise ConfigurationError(f"unknown record mode {self.record!r}")
        return int(n_steps)


@dataclass
class SpikeRecord:
    """Timestamped spike events (times ascending) plus run metadata."""

    times: np.ndarray
    neuron_ids: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_spikes(self) -> int:
        return int(self.times.shape[0])

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = self.meta
        frame = pd.DataFrame(
            {
                "time_ms": self.times,
                "neuron_id": self.neuron_ids,
                "run_id": meta.get("run_id", ""),
                "attack": meta.get("attack", "NONE"),
                "attack_param": meta.get("attack_param", ""),
                "lgn_trial": meta.get("lgn_trial", -1),
                "bkg_trial": meta.get("bkg_trial", -1),
            },
            columns=list(SPIKE_CSV_COLUMNS),
        )
        frame.to_csv(path, index=False)
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "SpikeRecord":
        frame = pd.read_csv(path)
        meta = {}
        if len(frame):
            first = frame.iloc[0]
            meta = {
                "run_id": first["run_id"],
                "attack": first["attack"],
                "attack_param": first["attack_param"],
                "lgn_trial": int(first["lgn_trial"]),
                "bkg_trial": int(first["bkg_trial"]),
            }
        return cls(
            times=frame["time_ms"].to_numpy(np.float64),
            neuron_ids=frame["neuron_id"].to_numpy(np.int64),
            meta=meta,
        )


class SimState:
    """Mutable per-run state handed to attack hooks.

    ``v`` may be overwritten in place; parameter arrays are the topology's own
    (treat as read-only). ``step``/``t`` identify the current instant.
    """

    __slots__ = ("v", "refractory_until", "v_threshold", "v_reset", "dt", "step", "t")

    def __init__(self, v, refractory_until, v_threshold, v_reset, dt):
        self.v = v
        self.refractory_until = refractory_until
        self.v_threshold = v_threshold
        self.v_reset = v_reset
        self.dt = dt
        self.step = 0
        self.t = 0.0


AttackHook = Callable[[float, SimState], None]


def _build_csr(topology: Topology, dt: float):
    """Synapses sorted stable by pre (ties keep declaration order) + index ptr."""
    order = np.argsort(topology.syn_pre, kind="stable")
    pre = topology.syn_pre[order]
    post = topology.syn_post[order].astype(np.int64)
    weight = topology.syn_weight[order]
    delay = topology.syn_delay[order]
    if delay.size and float(delay.min()) < dt - 1e-9:
        raise ConfigurationError(
            f"synapse delay {float(delay.min())} ms below simulation resolution {dt} ms"
        )
    dsteps = np.maximum(1, np.round(delay / dt)).astype(np.int64)
    counts = np.bincount(pre, minlength=topology.n_neurons)
    ptr = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
    return ptr, post, weight, dsteps


class Simulation:
    """One deterministic run; single-threaded, no shared mutable state."""

    def __init__(
        self,
        config: SimConfig,
        topology: Topology,
        inputs: InputSpikeSet | None = None,
        hook: AttackHook | None = None,
        external_current: np.ndarray | None = None,
    ):
        self.config = config
        self.n_steps = config.validate()
        self.topology = topology
        self.hook = hook
        n = topology.n_neurons

        self._v = topology.e_leak.copy()
        self._refr_until = np.full(n, -np.inf)
        self._decay = np.exp(-config.dt / topology.tau_membrane)
        if external_current is not None:
            current = np.asarray(external_current, dtype=np.float64)
            if current.shape != (n,):
                raise ConfigurationError("external_current must have one entry per neuron")
            drive = current * (topology.tau_membrane / topology.capacitance) * (1.0 - self._decay)
        else:
            drive = np.zeros(n)
        self._leak_target = topology.e_leak + drive

        self._ptr, self._post, self._weight, self._dsteps = _build_csr(topology, config.dt)
        ring_len = int(self._dsteps.max()) + 1 if self._dsteps.size else 1
        self._ring = np.zeros((ring_len, n))

        self._prepare_inputs(inputs)
        self.state = SimState(self._v, self._refr_until, topology.v_threshold, topology.v_reset, config.dt)
        self._spike_times: list[np.ndarray] = []
        self._spike_ids: list[np.ndarray] = []
        self._done = False

    def _prepare_inputs(self, inputs: InputSpikeSet | None) -> None:
        n = self.topology.n_neurons
        dt, duration = self.config.dt, self.config.duration
        if inputs is None:
            self._has_inputs = False
            return
        if inputs.max_target() >= n:
            raise ConfigurationError(
                f"feed_map targets neuron {inputs.max_target()} but topology has {n} neurons"
            )
        for name, times in (("lgn", inputs.lgn_times), ("bkg", inputs.bkg_times)):
            if times.size and (float(times.min()) < 0 or float(times.max()) >= duration):
                raise ConfigurationError(f"{name} spike times outside [0, duration)")
        if inputs.lgn_sources.size and int(inputs.lgn_sources.max()) >= inputs.n_lgn_sources:
            raise ConfigurationError("lgn source id outside feed_map")
        if inputs.bkg_sources.size and int(inputs.bkg_sources.max()) >= inputs.n_bkg_sources:
            raise ConfigurationError("bkg source id outside feed_map")
        self._has_inputs = True
        self._lgn_steps = np.floor(inputs.lgn_times / dt).astype(np.int64)
        self._lgn_sources = inputs.lgn_sources
        self._lgn_ptr = np.searchsorted(self._lgn_steps, np.arange(self.n_steps + 1))
        self._bkg_steps = np.floor(inputs.bkg_times / dt).astype(np.int64)
        self._bkg_sources = inputs.bkg_sources
        self._bkg_ptr = np.searchsorted(self._bkg_steps, np.arange(self.n_steps + 1))
        self._lgn_targets = inputs.lgn_feed_targets
        self._lgn_weights = inputs.lgn_feed_weights
        self._bkg_targets = inputs.bkg_feed_targets
        self._bkg_weights = inputs.bkg_feed_weights

    def _deliver_feed(self, ptrs, steps_sources, targets, weights, s: int) -> None:
        i0, i1 = ptrs[s], ptrs[s + 1]
        if i0 == i1:
            return
        srcs = steps_sources[i0:i1]
        flat_t = targets[srcs].ravel()
        flat_w = weights[srcs].ravel()
        inc = np.bincount(flat_t, weights=flat_w, minlength=self.topology.n_neurons)
        np.add(self._v, inc, out=self._v)

    def step_once(self, expected_t: float | None = None) -> tuple[float, np.ndarray]:
        """Advance one step; returns (t, ids of neurons that spiked at t)."""
        s = self.state.step
        if s >= self.n_steps:
            raise RuntimeError("simulation already finished")
        t = s * self.config.dt
        if expected_t is not None and abs(expected_t - t) > 1e-12:
            raise RuntimeError(f"internal error: step time {t} != expected {expected_t}")
        self.state.t = t
        v = self._v

        # 1. delayed recurrent PSPs
        slot = s % self._ring.shape[0]
        row = self._ring[slot]
        np.add(v, row, out=v)
        row.fill(0.0)

        # 2. feed PSPs (visual first, then background)
        if self._has_inputs:
            self._deliver_feed(self._lgn_ptr, self._lgn_sources, self._lgn_targets, self._lgn_weights, s)
            self._deliver_feed(self._bkg_ptr, self._bkg_sources, self._bkg_targets, self._bkg_weights, s)

        # 3. exact exponential leak toward E_L (+ constant-current target)
        np.subtract(v, self.topology.e_leak, out=v)
        np.multiply(v, self._decay, out=v)
        np.add(v, self._leak_target, out=v)

        # 4. attack injection
        if self.hook is not None:
            self.hook(t, self.state)

        # 5. threshold, reset, refractory arm, PSP scheduling
        refractory = self._refr_until > t
        fired = (v >= self.topology.v_threshold) & ~refractory
        fired_idx = np.nonzero(fired)[0]
        if fired_idx.size:
            v[fired_idx] = self.topology.v_reset[fired_idx]
            self._refr_until[fired_idx] = t + self.topology.t_refractory[fired_idx]
            starts = self._ptr[fired_idx]
            ends = self._ptr[fired_idx + 1]
            counts = ends - starts
            total = int(counts.sum())
            if total:
                cum = np.cumsum(counts)
                flat = np.arange(total) + np.repeat(starts - np.concatenate(([0], cum[:-1])), counts)
                slots = (s + self._dsteps[flat]) % self._ring.shape[0]
                np.add.at(self._ring, (slots, self._post[flat]), self._weight[flat])
            self._spike_times.append(np.full(fired_idx.size, t))
            self._spike_ids.append(fired_idx.astype(np.int64))

        # 6. refractory clamp
        np.copyto(v, self.topology.v_reset, where=refractory)

        self.state.step = s + 1
        return t, fired_idx

    def run(self) -> SpikeRecord:
        while self.state.step < self.n_steps:
            self.step_once()
        self._done = True
        if self._spike_times:
            times = np.concatenate(self._spike_times)
            ids = np.concatenate(self._spike_ids)
        else:
            times = np.empty(0, dtype=np.float64)
            ids = np.empty(0, dtype=np.int64)
        return SpikeRecord(times=times, neuron_ids=ids, meta={"seed": self.config.seed})


def run(
    config: SimConfig,
    topology: Topology,
    inputs: InputSpikeSet | None = None,
    hook: AttackHook | None = None,
    external_current: np.ndarray | None = None,
    meta: dict | None = None,
) -> SpikeRecord:
    """Run one full simulation; deterministic for fixed components."""
    record = Simulation(config, topology, inputs, hook, external_current).run()
    if meta:
        record.meta.update(meta)
    return record
