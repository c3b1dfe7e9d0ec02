"""Impact metrics over paired (baseline, attacked) spike records.

The 3,000 ms simulation is aggregated into 30 half-open 100 ms intervals
(interval k covers [k*100, (k+1)*100), so a spike at 299.75 belongs to
interval 2 and one at 300.0 to interval 3). Spike-count deltas and percent
changes compare attacked repetitions against the paired baseline run; the
shift percentage counts attacked-run spikes with no exact-time counterpart of
the same neuron in the baseline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .engine import SpikeRecord

DEFAULT_INTERVAL_MS = 100.0
REPORT_FORMAT_VERSION = 1


@dataclass
class IntervalSeries:
    """Per-interval values over the simulation; len(values) = duration / interval."""

    values: np.ndarray
    interval_ms: float = DEFAULT_INTERVAL_MS
    label: str = ""

    def __len__(self) -> int:
        return int(self.values.shape[0])


def interval_index(time_ms, interval_ms: float = DEFAULT_INTERVAL_MS):
    """Half-open interval index of a spike time (vectorized)."""
    return np.floor(np.asarray(time_ms, dtype=np.float64) / interval_ms).astype(np.int64)


def interval_counts(
    record: SpikeRecord,
    interval_ms: float = DEFAULT_INTERVAL_MS,
    duration: float = 3000.0,
) -> IntervalSeries:
    """Spike count per half-open interval; sums to the record's spike total."""
    n_intervals = int(round(duration / interval_ms))
    idx = interval_index(record.times, interval_ms)
    counts = np.bincount(idx, minlength=n_intervals).astype(np.float64)
    if counts.shape[0] > n_intervals:
        raise ValueError("record contains spikes beyond the stated duration")
    return IntervalSeries(values=counts, interval_ms=interval_ms, label=str(record.meta.get("run_id", "")))


def impact_delta(attacked: IntervalSeries, baseline: IntervalSeries) -> tuple[np.ndarray, np.ndarray]:
    """(delta, percent_change); percent is NaN where the baseline count is zero."""
    if len(attacked) != len(baseline):
        raise ValueError(
            f"series length mismatch: attacked {len(attacked)} vs baseline {len(baseline)}"
        )
    delta = attacked.values - baseline.values
    with np.errstate(divide="ignore", invalid="ignore"):
        percent = np.where(baseline.values > 0, 100.0 * delta / baseline.values, np.nan)
    return delta, percent


def _spike_keys(record: SpikeRecord, dt: float, id_span: int) -> np.ndarray:
    steps = np.round(record.times / dt).astype(np.int64)
    return steps * id_span + record.neuron_ids.astype(np.int64)


def shift_percentage(
    attacked: SpikeRecord,
    baseline: SpikeRecord,
    interval_ms: float = DEFAULT_INTERVAL_MS,
    duration: float = 3000.0,
    dt: float = 0.25,
    tolerance_steps: int = 0,
) -> IntervalSeries:
    """Percent of attacked spikes per interval with no baseline match.

    A match is a baseline spike of the same neuron at exactly the same grid
    step (optionally within +-tolerance_steps). Intervals with no attacked
    spikes report 0.
    """
    n_intervals = int(round(duration / interval_ms))
    if attacked.n_spikes == 0:
        return IntervalSeries(np.zeros(n_intervals), interval_ms)
    id_span = int(
        max(
            attacked.neuron_ids.max(initial=0),
            baseline.neuron_ids.max(initial=0),
        )
    ) + 2
    a_keys = _spike_keys(attacked, dt, id_span)
    b_keys = np.sort(_spike_keys(baseline, dt, id_span))
    matched = np.zeros(attacked.n_spikes, dtype=bool)
    for offset in range(-tolerance_steps, tolerance_steps + 1):
        probe = a_keys + offset * id_span
        pos = np.searchsorted(b_keys, probe)
        hit = (pos < b_keys.shape[0]) & (b_keys[np.minimum(pos, b_keys.shape[0] - 1)] == probe)
        matched |= hit
    idx = interval_index(attacked.times, interval_ms)
    total = np.bincount(idx, minlength=n_intervals).astype(np.float64)
    shifted = np.bincount(idx, weights=(~matched).astype(np.float64), minlength=n_intervals)
    with np.errstate(divide="ignore", invalid="ignore"):
        pct = np.where(total > 0, 100.0 * shifted / total, 0.0)
    return IntervalSeries(values=pct, interval_ms=interval_ms)


def recovery_time(
    delta: np.ndarray,
    baseline: np.ndarray,
    attack_end_interval: int,
    tolerance_fraction: float = 0.05,
) -> int | None:
    """Smallest m >= 1 with |delta| within tolerance of baseline over a
    two-interval run starting at attack_end_interval + m; None if never."""
    if tolerance_fraction <= 0:
        raise ValueError(f"tolerance_fraction must be > 0, got {tolerance_fraction}")
    n = len(delta)
    within = np.abs(delta) <= tolerance_fraction * np.asarray(baseline, dtype=np.float64)
    for m in range(1, n):
        k = attack_end_interval + m
        if k + 1 >= n:
            return None
        if within[k] and within[k + 1]:
            return m
    return None


def rebound_detect(
    counts_attacked: IntervalSeries,
    counts_baseline: IntervalSeries,
    window_end_interval: int,
    z_threshold: float = 3.0,
    noise_sd: np.ndarray | None = None,
) -> dict | None:
    """First post-window interval with attacked - baseline above z * noise.

    The noise scale defaults to max(repetition sd if given, sqrt(baseline), 1)
    per interval so single-repetition reports degrade to a Poisson scale.
    """
    a = counts_attacked.values
    b = counts_baseline.values
    floor = np.maximum(np.sqrt(np.maximum(b, 0.0)), 1.0)
    sd = np.maximum(noise_sd, floor) if noise_sd is not None else floor
    for k in range(window_end_interval + 1, len(a)):
        excess = a[k] - b[k]
        if excess > z_threshold * sd[k]:
            return {"interval": int(k), "magnitude": float(excess)}
    return None


def attack_intervals(
    kind: str,
    t_attack: float | None,
    window: tuple[float, float] | None,
    interval_ms: float = DEFAULT_INTERVAL_MS,
) -> tuple[int | None, int | None]:
    """(first, last) interval index touched by the attack, or (None, None)."""
    if kind == "FLO" and t_attack is not None:
        k = int(math.floor(t_attack / interval_ms))
        return k, k
    if kind == "JAM" and window is not None:
        t0, t1 = window
        return int(math.floor(t0 / interval_ms)), int(math.ceil(t1 / interval_ms)) - 1
    return None, None


@dataclass
class ImpactReport:
    """Aggregated per-interval impact of one attack configuration."""

    interval_ms: float
    baseline_mean: np.ndarray
    baseline_sd: np.ndarray
    attacked_mean: np.ndarray
    attacked_sd: np.ndarray
    delta: np.ndarray
    percent: np.ndarray  # NaN where baseline is zero
    shift_pct: np.ndarray  # mean over repetitions
    recovery_intervals: int | None = None
    rebound_peak: dict | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_intervals(self) -> int:
        return int(self.baseline_mean.shape[0])

    def interval_bounds(self, k: int) -> tuple[float, float]:
        return k * self.interval_ms, (k + 1) * self.interval_ms


def build_impact_report(
    baseline: SpikeRecord | list[SpikeRecord],
    attacked: list[SpikeRecord],
    attack_kind: str = "none",
    t_attack: float | None = None,
    window: tuple[float, float] | None = None,
    interval_ms: float = DEFAULT_INTERVAL_MS,
    duration: float = 3000.0,
    dt: float = 0.25,
    tolerance_fraction: float = 0.05,
    meta: dict | None = None,
) -> ImpactReport:
    """Aggregate repetitions against their paired baseline (mean +- sample sd).

    ``baseline`` is normally the single run sharing the repetitions' input and
    engine seeds; a list of per-repetition baselines is accepted for the
    input-resampling mode, pairing baseline i with repetition i.
    """
    baselines = baseline if isinstance(baseline, list) else [baseline]
    if len(baselines) not in (1, max(1, len(attacked))):
        raise ValueError("need one baseline or one per repetition")
    base_stack = np.stack([interval_counts(b, interval_ms, duration).values for b in baselines])
    baseline_mean = base_stack.mean(axis=0)
    baseline_sd = base_stack.std(axis=0, ddof=1) if base_stack.shape[0] > 1 else np.zeros_like(baseline_mean)
    base_counts = IntervalSeries(baseline_mean, interval_ms)

    rep_counts = np.stack(
        [interval_counts(rec, interval_ms, duration).values for rec in attacked]
    ) if attacked else base_counts.values[None, :]
    attacked_mean = rep_counts.mean(axis=0)
    attacked_sd = rep_counts.std(axis=0, ddof=1) if rep_counts.shape[0] > 1 else np.zeros_like(attacked_mean)

    shift_stack = np.stack(
        [
            shift_percentage(rec, baselines[min(i, len(baselines) - 1)], interval_ms, duration, dt).values
            for i, rec in enumerate(attacked)
        ]
    ) if attacked else np.zeros((1, len(base_counts)))
    shift_mean = shift_stack.mean(axis=0)

    delta = attacked_mean - base_counts.values
    with np.errstate(divide="ignore", invalid="ignore"):
        percent = np.where(base_counts.values > 0, 100.0 * delta / base_counts.values, np.nan)

    first_iv, last_iv = attack_intervals(attack_kind, t_attack, window, interval_ms)
    recovery = None
    rebound = None
    if last_iv is not None:
        recovery = recovery_time(delta, base_counts.values, last_iv, tolerance_fraction)
        if attack_kind == "JAM":
            # noise scale for the repetition mean, not a single repetition
            mean_sd = attacked_sd / math.sqrt(max(1, len(attacked)))
            rebound = rebound_detect(
                IntervalSeries(attacked_mean, interval_ms),
                base_counts,
                last_iv,
                noise_sd=mean_sd,
            )

    report_meta = {
        "attack": attack_kind,
        "t_attack": t_attack,
        "window": list(window) if window else None,
        "attack_interval_first": first_iv,
        "attack_interval_last": last_iv,
        "repetitions": len(attacked),
        "baseline_run_id": baselines[0].meta.get("run_id", ""),
        "baseline_seed": baselines[0].meta.get("seed"),
    }
    if meta:
        report_meta.update(meta)
    return ImpactReport(
        interval_ms=interval_ms,
        baseline_mean=baseline_mean,
        baseline_sd=baseline_sd,
        attacked_mean=attacked_mean,
        attacked_sd=attacked_sd,
        delta=delta,
        percent=percent,
        shift_pct=shift_mean,
        recovery_intervals=recovery,
        rebound_peak=rebound,
        meta=report_meta,
    )


def report_to_csv(report: ImpactReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    k = np.arange(report.n_intervals)
    frame = pd.DataFrame(
        {
            "interval_index": k,
            "t_start_ms": k * report.interval_ms,
            "t_end_ms": (k + 1) * report.interval_ms,
            "baseline_mean": report.baseline_mean,
            "baseline_sd": report.baseline_sd,
            "attacked_mean": report.attacked_mean,
            "attacked_sd": report.attacked_sd,
            "delta": report.delta,
            "percent": report.percent,
            "shift_pct": report.shift_pct,
        }
    )
    frame.to_csv(path, index=False)
    return path


def report_to_json(report: ImpactReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": REPORT_FORMAT_VERSION,
        "interval_ms": report.interval_ms,
        "baseline_mean": report.baseline_mean.tolist(),
        "baseline_sd": report.baseline_sd.tolist(),
        "attacked_mean": report.attacked_mean.tolist(),
        "attacked_sd": report.attacked_sd.tolist(),
        "delta": report.delta.tolist(),
        "percent": [None if math.isnan(x) else x for x in report.percent],
        "shift_pct": report.shift_pct.tolist(),
        "recovery_intervals": report.recovery_intervals,
        "rebound_peak": report.rebound_peak,
        "meta": report.meta,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path
