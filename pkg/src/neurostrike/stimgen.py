"""Stimulus timelines, trial registry, and stochastic input spike generation.

Three stimuli share a 3,000 ms timeline: a 500 ms gray lead-in followed by the
stimulus content (the flash embeds its own gray segments and is padded with
trailing gray). Visual drive is synthesized as an inhomogeneous Poisson
process over per-event rate profiles; background drive is homogeneous Poisson
at 1 kHz per source. All generators are pure functions of (inputs, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigurationError

TOTAL_DURATION_MS = 3000.0
GRAY_LEAD_IN_MS = 500.0
BKG_RATE_HZ = 1000.0

STIMULI = ("flash", "movie", "gratings")
ORIENTATIONS_DEG = (0, 45, 90, 135, 180, 225, 270, 315)

# Per-source firing rates (Hz) per event kind; calibration constants, not
# measured values. Chosen so evoked activity ordering is
# on_flash > movie/grating peaks > off_flash > gray.
GRAY_RATE = 2.0
ON_FLASH_RATE = 20.0
OFF_FLASH_RATE = 12.0
MOVIE_SCENE_RATES = {41: 12.0, 42: 9.0, 43: 14.0}
MOVIE_ONSET_RATE = 25.0
MOVIE_ONSET_MS = 50.0
GRATING_BASE_RATE = 10.0
GRATING_AMPLITUDE = 8.0

# Independent RNG stream tags so LGN, BKG and feed wiring never share draws.
_STREAM_LGN = 1
_STREAM_BKG = 2
_STREAM_FEED = 3

_STIM_CODE = {"flash": 0, "movie": 1, "gratings": 2}


class ConstantRate:
    """Flat rate profile (spikes/s per source)."""

    def __init__(self, rate: float):
        if rate < 0:
            raise ConfigurationError(f"rate must be >= 0, got {rate}")
        self.rate = float(rate)

    @property
    def max_rate(self) -> float:
        return self.rate

    def __call__(self, t):
        return np.full_like(np.asarray(t, dtype=np.float64), self.rate)

    def to_jsonable(self) -> dict:
        return {"type": "constant", "rate": self.rate}


class OnsetRate:
    """Constant onset transient followed by a constant sustained rate."""

    def __init__(self, t_start: float, onset_rate: float, onset_ms: float, sustained_rate: float):
        self.t_start = float(t_start)
        self.onset_rate = float(onset_rate)
        self.onset_ms = float(onset_ms)
        self.sustained_rate = float(sustained_rate)

    @property
    def max_rate(self) -> float:
        return max(self.onset_rate, self.sustained_rate)

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.where(t < self.t_start + self.onset_ms, self.onset_rate, self.sustained_rate)

    def to_jsonable(self) -> dict:
        return {
            "type": "onset",
            "onset_rate": self.onset_rate,
            "onset_ms": self.onset_ms,
            "sustained_rate": self.sustained_rate,
        }


class SinusoidRate:
    """base + amplitude * sin(2*pi*f*(t - t_start)); requires amplitude <= base."""

    def __init__(self, t_start: float, base: float, amplitude: float, freq_hz: float):
        if amplitude > base:
            raise ConfigurationError("sinusoid amplitude exceeds base rate (negative rates)")
        self.t_start = float(t_start)
        self.base = float(base)
        self.amplitude = float(amplitude)
        self.freq_hz = float(freq_hz)

    @property
    def max_rate(self) -> float:
        return self.base + self.amplitude

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        phase = 2.0 * np.pi * self.freq_hz * (t - self.t_start) / 1000.0
        return self.base + self.amplitude * np.sin(phase)

    def to_jsonable(self) -> dict:
        return {
            "type": "sinusoid",
            "base": self.base,
            "amplitude": self.amplitude,
            "freq_hz": self.freq_hz,
        }


@dataclass
class StimulusEvent:
    kind: str  # gray | on_flash | off_flash | movie_scene | grating
    t_start: float
    t_end: float
    rate_profile: object
    scene_index: int | None = None
    orientation_deg: float | None = None
    temporal_freq_hz: float | None = None

    def to_jsonable(self) -> dict:
        d = {
            "kind": self.kind,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "rate_profile": self.rate_profile.to_jsonable(),
        }
        if self.scene_index is not None:
            d["scene_index"] = self.scene_index
        if self.orientation_deg is not None:
            d["orientation_deg"] = self.orientation_deg
        if self.temporal_freq_hz is not None:
            d["temporal_freq_hz"] = self.temporal_freq_hz
        return d


@dataclass
class StimulusTimeline:
    stimulus: str
    events: list[StimulusEvent]
    total_duration: float = TOTAL_DURATION_MS

    def validate(self) -> None:
        if not self.events:
            raise ConfigurationError("timeline has no events")
        cursor = 0.0
        for ev in self.events:
            if ev.t_start != cursor:
                raise ConfigurationError(
                    f"events not contiguous: expected t_start {cursor}, got {ev.t_start}"
                )
            if ev.t_end <= ev.t_start:
                raise ConfigurationError(f"event {ev.kind} has t_end <= t_start")
            cursor = ev.t_end
        if cursor != self.total_duration:
            raise ConfigurationError(
                f"events cover [0, {cursor}) but total_duration is {self.total_duration}"
            )

    def to_json(self) -> str:
        return json.dumps(
            {
                "stimulus": self.stimulus,
                "total_duration": self.total_duration,
                "events": [ev.to_jsonable() for ev in self.events],
            },
            indent=2,
        )


def _gray(t0: float, t1: float) -> StimulusEvent:
    return StimulusEvent("gray", t0, t1, ConstantRate(GRAY_RATE))


def flash_timeline() -> StimulusTimeline:
    """Gray 500 / ON 250 / gray 1000 / OFF 250 / gray 500, padded to 3,000 ms."""
    events = [
        _gray(0.0, 500.0),
        StimulusEvent("on_flash", 500.0, 750.0, ConstantRate(ON_FLASH_RATE)),
        _gray(750.0, 1750.0),
        StimulusEvent("off_flash", 1750.0, 2000.0, ConstantRate(OFF_FLASH_RATE)),
        _gray(2000.0, 2500.0),
        _gray(2500.0, 3000.0),  # pad: stimulus content ends at 2,500 ms
    ]
    tl = StimulusTimeline("flash", events)
    tl.validate()
    return tl


def movie_timeline() -> StimulusTimeline:
    """Gray 500 then three scenes; the last scene runs only half a second."""
    events = [_gray(0.0, 500.0)]
    boundaries = [(41, 500.0, 1500.0), (42, 1500.0, 2500.0), (43, 2500.0, 3000.0)]
    for scene, t0, t1 in boundaries:
        profile = OnsetRate(t0, MOVIE_ONSET_RATE, MOVIE_ONSET_MS, MOVIE_SCENE_RATES[scene])
        events.append(StimulusEvent("movie_scene", t0, t1, profile, scene_index=scene))
    tl = StimulusTimeline("movie", events)
    tl.validate()
    return tl


def gratings_timeline(orientation_deg: float = 90.0, temporal_freq: float = 2.0) -> StimulusTimeline:
    """Gray 500 then a drifting grating with a sinusoidal rate profile."""
    if orientation_deg not in ORIENTATIONS_DEG:
        raise ConfigurationError(
            f"orientation must be one of {ORIENTATIONS_DEG}, got {orientation_deg}"
        )
    if temporal_freq <= 0:
        raise ConfigurationError(f"temporal_freq must be > 0, got {temporal_freq}")
    grating = StimulusEvent(
        "grating",
        500.0,
        3000.0,
        SinusoidRate(500.0, GRATING_BASE_RATE, GRATING_AMPLITUDE, temporal_freq),
        orientation_deg=orientation_deg,
        temporal_freq_hz=temporal_freq,
    )
    tl = StimulusTimeline("gratings", [_gray(0.0, 500.0), grating])
    tl.validate()
    return tl


def timeline_for(stimulus: str, orientation_deg: float = 90.0, temporal_freq: float = 2.0) -> StimulusTimeline:
    if stimulus == "flash":
        return flash_timeline()
    if stimulus == "movie":
        return movie_timeline()
    if stimulus == "gratings":
        return gratings_timeline(orientation_deg, temporal_freq)
    raise ConfigurationError(f"unknown stimulus {stimulus!r}")


@dataclass(frozen=True)
class TrialSpec:
    """Pairing of a per-stimulus visual-input trial with its background trial.

    Background trials 0-79 belong to the gratings orientations (ten each),
    80-89 to the movie, 90-99 to the flash.
    """

    stimulus: str
    lgn_trial: int
    bkg_trial: int
    orientation_deg: float | None = None

    def __post_init__(self):
        lo, hi = _BKG_FAMILY_RANGE[self.stimulus]
        if not lo <= self.bkg_trial <= hi:
            raise ConfigurationError(
                f"bkg_trial {self.bkg_trial} outside [{lo}, {hi}] for stimulus {self.stimulus}"
            )


_BKG_FAMILY_RANGE = {"gratings": (0, 79), "movie": (80, 89), "flash": (90, 99)}


def resolve_trial(stimulus: str, lgn_trial: int, orientation_deg: float = 90.0) -> TrialSpec:
    """Map (stimulus, visual trial) to its background trial number."""
    if stimulus not in STIMULI:
        raise ConfigurationError(f"unknown stimulus {stimulus!r}")
    if not 0 <= lgn_trial <= 9:
        raise ConfigurationError(f"lgn_trial must be in [0, 9], got {lgn_trial}")
    if stimulus == "gratings":
        if orientation_deg not in ORIENTATIONS_DEG:
            raise ConfigurationError(f"orientation must be one of {ORIENTATIONS_DEG}")
        base = 10 * ORIENTATIONS_DEG.index(orientation_deg)
    elif stimulus == "movie":
        base = 80
    else:
        base = 90
    orient = orientation_deg if stimulus == "gratings" else None
    return TrialSpec(stimulus=stimulus, lgn_trial=lgn_trial, bkg_trial=base + lgn_trial, orientation_deg=orient)


def _rng_for(seed: int, stream: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(stream, *key)))


def generate_lgn_spikes(
    timeline: StimulusTimeline, n_sources: int, trial: TrialSpec, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Inhomogeneous Poisson spikes over the timeline's event rate profiles.

    Returns (times_ms, source_ids) sorted by (time, source). The pooled
    process at n_sources * rate(t) is thinned against each event's peak rate
    and sources are assigned uniformly, which is equivalent to independent
    per-source processes at rate(t).
    """
    if n_sources < 1:
        raise ConfigurationError(f"n_sources must be >= 1, got {n_sources}")
    rng = _rng_for(seed, _STREAM_LGN, _STIM_CODE[timeline.stimulus], trial.lgn_trial)
    all_times: list[np.ndarray] = []
    all_sources: list[np.ndarray] = []
    for ev in timeline.events:
        peak = ev.rate_profile.max_rate
        duration_s = (ev.t_end - ev.t_start) / 1000.0
        expected = n_sources * peak * duration_s
        count = int(rng.poisson(expected)) if expected > 0 else 0
        if count == 0:
            continue
        times = rng.uniform(ev.t_start, ev.t_end, size=count)
        sources = rng.integers(0, n_sources, size=count)
        accept = rng.uniform(0.0, peak, size=count) < ev.rate_profile(times)
        all_times.append(times[accept])
        all_sources.append(sources[accept])
    if not all_times:
        return np.empty(0, dtype=np.float64), np.empty(0, dtype=np.int32)
    times = np.concatenate(all_times)
    sources = np.concatenate(all_sources).astype(np.int32)
    order = np.lexsort((sources, times))
    return times[order], sources[order]


def generate_bkg_spikes(
    duration: float, n_sources: int, trial: TrialSpec, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Homogeneous Poisson background at 1,000 spikes/s per source."""
    if duration <= 0:
        raise ConfigurationError(f"duration must be > 0, got {duration}")
    if n_sources < 0:
        raise ConfigurationError(f"n_sources must be >= 0, got {n_sources}")
    rng = _rng_for(seed, _STREAM_BKG, trial.bkg_trial)
    expected = n_sources * BKG_RATE_HZ * duration / 1000.0
    count = int(rng.poisson(expected)) if expected > 0 else 0
    if count == 0:
        return np.empty(0, dtype=np.float64), np.empty(0, dtype=np.int32)
    times = rng.uniform(0.0, duration, size=count)
    sources = rng.integers(0, n_sources, size=count).astype(np.int32)
    order = np.lexsort((sources, times))
    return times[order], sources[order]


def make_feed_map(
    n_sources: int,
    n_neurons: int,
    k: int,
    weight_mean: float,
    weight_sd: float,
    seed: int,
    family: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Wire each source to k distinct random neurons with positive weights.

    Returns (targets (S, k) int32, weights (S, k) float64). Weights are folded
    normal so every feed connection is excitatory.
    """
    if k < 1 or k > n_neurons:
        raise ConfigurationError(f"feed k must be in [1, n_neurons], got {k}")
    rng = _rng_for(seed, _STREAM_FEED, {"lgn": 0, "bkg": 1}[family])
    targets = rng.integers(0, n_neurons, size=(n_sources, k))
    while True:
        srt = np.sort(targets, axis=1)
        dup_rows = (srt[:, 1:] == srt[:, :-1]).any(axis=1)
        if not dup_rows.any():
            break
        targets[dup_rows] = rng.integers(0, n_neurons, size=(int(dup_rows.sum()), k))
    weights = np.abs(rng.normal(weight_mean, weight_sd, size=(n_sources, k)))
    return targets.astype(np.int32), weights


@dataclass
class InputSpikeSet:
    """Visual + background spike trains and their feed wiring onto the network.

    Source ids are family-local; the engine offsets background ids by
    n_lgn_sources to form a single id space.
    """

    lgn_times: np.ndarray
    lgn_sources: np.ndarray
    bkg_times: np.ndarray
    bkg_sources: np.ndarray
    lgn_feed_targets: np.ndarray
    lgn_feed_weights: np.ndarray
    bkg_feed_targets: np.ndarray
    bkg_feed_weights: np.ndarray
    duration: float = TOTAL_DURATION_MS
    trial: TrialSpec | None = None

    @property
    def n_lgn_sources(self) -> int:
        return int(self.lgn_feed_targets.shape[0])

    @property
    def n_bkg_sources(self) -> int:
        return int(self.bkg_feed_targets.shape[0])

    def feed_map(self, source_id: int) -> list[tuple[int, float]]:
        """(target, weight) list for a global source id; LGN ids come first."""
        if source_id < self.n_lgn_sources:
            t, w = self.lgn_feed_targets[source_id], self.lgn_feed_weights[source_id]
        else:
            local = source_id - self.n_lgn_sources
            t, w = self.bkg_feed_targets[local], self.bkg_feed_weights[local]
        return [(int(ti), float(wi)) for ti, wi in zip(t, w)]

    def max_target(self) -> int:
        m = -1
        if self.lgn_feed_targets.size:
            m = max(m, int(self.lgn_feed_targets.max()))
        if self.bkg_feed_targets.size:
            m = max(m, int(self.bkg_feed_targets.max()))
        return m


@dataclass
class FeedSpec:
    """Input-population sizing relative to the network plus feed wiring knobs."""

    lgn_sources_per_neuron: float = 0.10
    bkg_sources_per_neuron: float = 0.20
    k_lgn: int = 10
    k_bkg: int = 10
    lgn_weight: tuple[float, float] = (2.2, 0.6)
    bkg_weight: tuple[float, float] = (0.75, 0.2)

    def n_lgn(self, n_neurons: int) -> int:
        return max(1, round(self.lgn_sources_per_neuron * n_neurons))

    def n_bkg(self, n_neurons: int) -> int:
        return max(1, round(self.bkg_sources_per_neuron * n_neurons))


def build_input_set(
    timeline: StimulusTimeline,
    trial: TrialSpec,
    n_neurons: int,
    seed: int,
    feed: FeedSpec | None = None,
) -> InputSpikeSet:
    """Generate the full input bundle for one simulation run."""
    feed = feed or FeedSpec()
    n_lgn = feed.n_lgn(n_neurons)
    n_bkg = feed.n_bkg(n_neurons)
    lgn_t, lgn_s = generate_lgn_spikes(timeline, n_lgn, trial, seed)
    bkg_t, bkg_s = generate_bkg_spikes(timeline.total_duration, n_bkg, trial, seed)
    lgn_ft, lgn_fw = make_feed_map(n_lgn, n_neurons, feed.k_lgn, *feed.lgn_weight, seed, "lgn")
    bkg_ft, bkg_fw = make_feed_map(n_bkg, n_neurons, feed.k_bkg, *feed.bkg_weight, seed, "bkg")
    return InputSpikeSet(
        lgn_times=lgn_t,
        lgn_sources=lgn_s,
        bkg_times=bkg_t,
        bkg_sources=bkg_s,
        lgn_feed_targets=lgn_ft,
        lgn_feed_weights=lgn_fw,
        bkg_feed_targets=bkg_ft,
        bkg_feed_weights=bkg_fw,
        duration=timeline.total_duration,
        trial=trial,
    )


def export_input_csvs(inputs: InputSpikeSet, out_dir: str | Path) -> dict[str, Path]:
    """Write lgn_trial_<n>.csv / bkg_trial_<n>.csv with (time_ms, source_id)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if inputs.trial is None:
        raise ConfigurationError("input set has no trial attached; cannot name files")
    paths = {
        "lgn": out / f"lgn_trial_{inputs.trial.lgn_trial}.csv",
        "bkg": out / f"bkg_trial_{inputs.trial.bkg_trial}.csv",
    }
    pd.DataFrame({"time_ms": inputs.lgn_times, "source_id": inputs.lgn_sources}).to_csv(
        paths["lgn"], index=False
    )
    pd.DataFrame({"time_ms": inputs.bkg_times, "source_id": inputs.bkg_sources}).to_csv(
        paths["bkg"], index=False
    )
    return paths
