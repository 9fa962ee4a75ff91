"""Feature-drift monitoring over record input features.

Maintains per-feature, per-quarter windows (fixed-bin histogram plus a
reservoir sample), compares each window against a fixed training-period
reference with two complementary detectors (PSI over bins, exact two-sample
KS over reservoirs), applies a hysteresis verdict rule, and simulates how a
drifted feature moves a stand-in risk score. A seeded synthetic generator
reproduces the gradual lab-value shift scenario end to end.
"""

from __future__ import annotations

import bisect
import enum
import math
import random
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Any, Iterable, Iterator, Sequence

from .canonical import format_rfc3339, parse_rfc3339

PSI_EPSILON = 1e-6
AVG_DAYS_PER_QUARTER = 91.3125  # 365.25 / 4


class DriftError(ValueError):
    pass


class Verdict(str, enum.Enum):
    STABLE = "stable"
    WARNING = "warning"
    DRIFT = "drift"


@dataclass(frozen=True)
class DriftThresholds:
    psi_warn: float = 0.1
    psi_drift: float = 0.2
    consecutive_required: int = 2


@dataclass(frozen=True)
class Histogram:
    """Fixed-bin counts with open underflow/overflow ends.

    counts[0] covers (-inf, edges[0]); counts[i] covers [edges[i-1], edges[i]);
    counts[-1] covers [edges[-1], +inf). len(counts) == len(edges) + 1.
    """

    edges: tuple[float, ...]
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.counts) != len(self.edges) + 1:
            raise DriftError("histogram needs len(edges) + 1 counts")

    @property
    def total(self) -> int:
        return sum(self.counts)


def uniform_edges(lo: float, hi: float, bins: int) -> tuple[float, ...]:
    if not (hi > lo and bins >= 1):
        raise DriftError("need hi > lo and bins >= 1")
    step = (hi - lo) / bins
    return tuple(lo + i * step for i in range(bins + 1))


def psi(reference: Histogram, current: Histogram, epsilon: float = PSI_EPSILON) -> float:
    """Population stability index: sum of (p - q) * ln(p / q) over bins.

    Empty bins get epsilon mass before normalization, which keeps the index
    finite under complete support shift. Symmetric in its arguments, >= 0.
    """
    if reference.edges != current.edges:
        raise DriftError("histograms have mismatched bin edges")
    p_weights = [c if c > 0 else epsilon for c in reference.counts]
    q_weights = [c if c > 0 else epsilon for c in current.counts]
    p_total = sum(p_weights)
    q_total = sum(q_weights)
    if p_total <= 0 or q_total <= 0:
        raise DriftError("histograms must carry mass")
    value = 0.0
    for pw, qw in zip(p_weights, q_weights):
        p = pw / p_total
        q = qw / q_total
        value += (p - q) * math.log(p / q)
    return value


def ks_statistic(sample_a: Sequence[float], sample_b: Sequence[float]) -> float:
    """Exact two-sample Kolmogorov-Smirnov statistic from sorted samples."""
    if not sample_a or not sample_b:
        raise DriftError("ks_statistic requires non-empty samples")
    xs, ys = sorted(sample_a), sorted(sample_b)
    n, m = len(xs), len(ys)
    i = j = 0
    d = 0.0
    while i < n and j < m:
        v = xs[i] if xs[i] <= ys[j] else ys[j]
        while i < n and xs[i] == v:
            i += 1
        while j < m and ys[j] == v:
            j += 1
        diff = abs(i / n - j / m)
        if diff > d:
            d = diff
    return d


def assign_verdicts(
    psi_values: Sequence[float], thresholds: DriftThresholds | None = None
) -> list[tuple[Verdict, int]]:
    """Verdict per window with hysteresis.

    Drift requires psi >= psi_drift in consecutive_required consecutive
    windows; once in drift, the verdict stays drift until psi < psi_warn
    for consecutive_required consecutive windows. A single breach of
    psi_warn is a warning.
    """
    th = thresholds or DriftThresholds()
    out: list[tuple[Verdict, int]] = []
    breach_run = 0
    calm_run = 0
    in_drift = False
    for value in psi_values:
        breach_run = breach_run + 1 if value >= th.psi_drift else 0
        calm_run = calm_run + 1 if value < th.psi_warn else 0
        if in_drift:
            if calm_run >= th.consecutive_required:
                in_drift = False
                verdict = Verdict.STABLE
            else:
                verdict = Verdict.DRIFT
        elif breach_run >= th.consecutive_required:
            in_drift = True
            verdict = Verdict.DRIFT
        elif value >= th.psi_warn:
            verdict = Verdict.WARNING
        else:
            verdict = Verdict.STABLE
        out.append((verdict, breach_run))
    return out


# ---------------------------------------------------------------------------
# Windows


def quarter_label(at: datetime) -> str:
    return f"{at.year}Q{(at.month - 1) // 3 + 1}"


def quarter_start(at: datetime) -> datetime:
    month = 3 * ((at.month - 1) // 3) + 1
    return datetime(at.year, month, 1, tzinfo=at.tzinfo or timezone.utc)


def next_quarter(at: datetime) -> datetime:
    start = quarter_start(at)
    if start.month == 10:
        return start.replace(year=start.year + 1, month=1)
    return start.replace(month=start.month + 3)


class FeatureWindow:
    """One feature's distribution inside one time window."""

    def __init__(
        self, feature: str, label: str, edges: tuple[float, ...], reservoir_k: int, seed: Any
    ) -> None:
        self.feature = feature
        self.label = label
        self.edges = edges
        self.counts = [0] * (len(edges) + 1)
        self.count = 0
        self.nonfinite = 0
        self.reservoir_k = reservoir_k
        self.reservoir: list[float] = []
        self._rng = random.Random(f"{seed}:{feature}:{label}")

    def observe(self, value: float) -> None:
        if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
            self.nonfinite += 1
            return
        value = float(value)
        self.counts[bisect.bisect_right(self.edges, value)] += 1
        self.count += 1
        if len(self.reservoir) < self.reservoir_k:
            self.reservoir.append(value)
        else:
            slot = self._rng.randrange(self.count)
            if slot < self.reservoir_k:
                self.reservoir[slot] = value

    @property
    def histogram(self) -> Histogram:
        return Histogram(self.edges, tuple(self.counts))

    def density_series(self) -> dict[str, Any]:
        """Bin centers and normalized interior counts, for external plotting."""
        centers = [
            (self.edges[i] + self.edges[i + 1]) / 2 for i in range(len(self.edges) - 1)
        ]
        interior = self.counts[1:-1]
        total = self.count or 1
        widths = [self.edges[i + 1] - self.edges[i] for i in range(len(self.edges) - 1)]
        density = [c / (total * w) for c, w in zip(interior, widths)]
        return {
            "label": self.label,
            "n": self.count,
            "bin_centers": centers,
            "density": density,
            "underflow": self.counts[0],
            "overflow": self.counts[-1],
        }


@dataclass(frozen=True)
class DriftReport:
    feature: str
    reference_label: str
    window_label: str
    psi: float
    ks: float
    verdict: Verdict
    consecutive_breaches: int
    n_reference: int
    n_current: int

    def to_wire(self) -> dict[str, Any]:
        return {
            "feature": self.feature,
            "reference": self.reference_label,
            "window": self.window_label,
            "psi": self.psi,
            "ks": self.ks,
            "verdict": self.verdict.value,
            "consecutive_breaches": self.consecutive_breaches,
            "n_reference": self.n_reference,
            "n_current": self.n_current,
        }


class DriftMonitor:
    """Routes observations into a reference window and quarterly windows."""

    REFERENCE_LABEL = "reference"

    def __init__(
        self,
        feature: str,
        edges: Sequence[float],
        reference_start: datetime,
        reference_end: datetime,
        reservoir_k: int = 1000,
        seed: int = 0,
    ) -> None:
        if reference_end <= reference_start:
            raise DriftError("reference window must have positive length")
        self.feature = feature
        self.edges = tuple(float(e) for e in edges)
        self.reference_start = reference_start
        self.reference_end = reference_end
        self.reservoir_k = reservoir_k
        self.seed = seed
        self.reference = FeatureWindow(
            feature, self.REFERENCE_LABEL, self.edges, reservoir_k, seed
        )
        self.windows: dict[str, FeatureWindow] = {}

    def observe(self, value: float, at: datetime) -> FeatureWindow:
        if self.reference_start <= at < self.reference_end:
            window = self.reference
        else:
            label = quarter_label(at)
            window = self.windows.get(label)
            if window is None:
                window = FeatureWindow(self.feature, label, self.edges, self.reservoir_k, self.seed)
                self.windows[label] = window
        window.observe(value)
        return window

    def reports(self, thresholds: DriftThresholds | None = None) -> list[DriftReport]:
        """Compare each non-reference window against the reference, in order."""
        if self.reference.count == 0:
            raise DriftError("reference window has no observations")
        labels = sorted(self.windows)
        psi_values = [psi(self.reference.histogram, self.windows[lb].histogram) for lb in labels]
        verdicts = assign_verdicts(psi_values, thresholds)
        out = []
        for label, value, (verdict, breaches) in zip(labels, psi_values, verdicts):
            window = self.windows[label]
            ks = (
                ks_statistic(self.reference.reservoir, window.reservoir)
                if window.reservoir
                else 0.0
            )
            out.append(
                DriftReport(
                    feature=self.feature,
                    reference_label=self.reference.label,
                    window_label=label,
                    psi=value,
                    ks=ks,
                    verdict=verdict,
                    consecutive_breaches=breaches,
                    n_reference=self.reference.count,
                    n_current=window.count,
                )
            )
        return out

    def density_data(self) -> list[dict[str, Any]]:
        series = [self.reference.density_series()]
        series.extend(self.windows[label].density_series() for label in sorted(self.windows))
        return series


# ---------------------------------------------------------------------------
# Impact simulation


@dataclass(frozen=True)
class ImpactReport:
    thresholds: tuple[float, ...]
    fraction_exceeding: tuple[float, ...]
    n: int

    def to_wire(self) -> dict[str, Any]:
        return {
            "thresholds": list(self.thresholds),
            "fraction_exceeding": list(self.fraction_exceeding),
            "n": self.n,
        }


def simulate_impact(
    scores_baseline: Sequence[float],
    scores_drifted: Sequence[float],
    thresholds: Sequence[float],
) -> ImpactReport:
    """Fraction of paired scores whose absolute delta exceeds each threshold."""
    if len(scores_baseline) != len(scores_drifted):
        raise DriftError("score lists must have equal length")
    n = len(scores_baseline)
    if n < 1:
        raise DriftError("need at least one score pair")
    deltas = [abs(b - d) for b, d in zip(scores_baseline, scores_drifted)]
    fractions = tuple(sum(1 for d in deltas if d > t) / n for t in thresholds)
    return ImpactReport(tuple(float(t) for t in thresholds), fractions, n)


# ---------------------------------------------------------------------------
# Synthetic lab-value scenario


@dataclass(frozen=True)
class SynthScenario:
    """Config for the synthetic gradually-shifting lab feature.

    Before `onset` values are N(baseline_mean, baseline_sd); afterwards the
    mean rises linearly by ramp_sd_per_quarter standard deviations per
    quarter while the spread stays fixed.
    """

    feature: str = "ldh_last_value"
    baseline_mean: float = 210.0
    baseline_sd: float = 40.0
    reference_start: datetime = datetime(2018, 1, 1, tzinfo=timezone.utc)
    reference_end: datetime = datetime(2019, 1, 1, tzinfo=timezone.utc)
    reference_n: int = 4000
    monitor_start: datetime = datetime(2023, 1, 1, tzinfo=timezone.utc)
    onset: datetime = datetime(2023, 3, 1, tzinfo=timezone.utc)
    ramp_sd_per_quarter: float = 0.5
    quarters: int = 7
    n_per_quarter: int = 2000
    seed: int = 20230301
    histogram_bins: int = 20
    histogram_span_sd: float = 5.0
    impact_thresholds: tuple[float, ...] = (0.001, 0.01)
    score_weight: float = 0.08
    score_base_rate: float = 0.05

    def edges(self) -> tuple[float, ...]:
        span = self.histogram_span_sd * self.baseline_sd
        return uniform_edges(
            self.baseline_mean - span, self.baseline_mean + span, self.histogram_bins
        )

    def shift_at(self, at: datetime) -> float:
        if at < self.onset:
            return 0.0
        days = (at - self.onset).total_seconds() / 86400.0
        return self.ramp_sd_per_quarter * self.baseline_sd * (days / AVG_DAYS_PER_QUARTER)

    def to_wire(self) -> dict[str, Any]:
        return {
            "feature": self.feature,
            "baseline_mean": self.baseline_mean,
            "baseline_sd": self.baseline_sd,
            "reference_start": format_rfc3339(self.reference_start),
            "reference_end": format_rfc3339(self.reference_end),
            "reference_n": self.reference_n,
            "monitor_start": format_rfc3339(self.monitor_start),
            "onset": format_rfc3339(self.onset),
            "ramp_sd_per_quarter": self.ramp_sd_per_quarter,
            "quarters": self.quarters,
            "n_per_quarter": self.n_per_quarter,
            "seed": self.seed,
            "histogram_bins": self.histogram_bins,
            "histogram_span_sd": self.histogram_span_sd,
            "impact_thresholds": list(self.impact_thresholds),
            "score_weight": self.score_weight,
            "score_base_rate": self.score_base_rate,
        }

    @classmethod
    def from_wire(cls, obj: dict[str, Any]) -> "SynthScenario":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise DriftError(f"unknown scenario fields: {', '.join(sorted(unknown))}")
        kw: dict[str, Any] = dict(obj)
        for key in ("reference_start", "reference_end", "monitor_start", "onset"):
            if key in kw:
                kw[key] = parse_rfc3339(kw[key])
        if "impact_thresholds" in kw:
            kw["impact_thresholds"] = tuple(float(t) for t in kw["impact_thresholds"])
        return cls(**kw)


def synth_stream(scenario: SynthScenario) -> Iterator[tuple[str, float, datetime]]:
    """Deterministic (feature, value, timestamp) stream for a scenario.

    Yields the reference period first, then `quarters` calendar-quarter
    snapshots starting at the quarter containing monitor_start; timestamps
    are evenly spaced within each period and values are drawn sequentially
    from one seeded generator.
    """
    rng = random.Random(scenario.seed)

    def emit(start: datetime, end: datetime, n: int) -> Iterator[tuple[str, float, datetime]]:
        span = (end - start).total_seconds()
        for i in range(n):
            at = start + timedelta(seconds=span * (i + 0.5) / n)
            mean = scenario.baseline_mean + scenario.shift_at(at)
            value = rng.gauss(mean, scenario.baseline_sd)
            yield scenario.feature, value, at

    yield from emit(scenario.reference_start, scenario.reference_end, scenario.reference_n)
    start = quarter_start(scenario.monitor_start)
    for _ in range(scenario.quarters):
        end = next_quarter(start)
        yield from emit(start, end, scenario.n_per_quarter)
        start = end


# Backwards-friendly alias matching the case-study feature name.
synth_ldh_stream = synth_stream


def standin_risk_score(value: float, scenario: SynthScenario) -> float:
    """Logistic stand-in for the real scorer: one low-weight feature."""
    base_logit = math.log(scenario.score_base_rate / (1.0 - scenario.score_base_rate))
    z = (value - scenario.baseline_mean) / scenario.baseline_sd
    logit = base_logit + scenario.score_weight * z
    return 1.0 / (1.0 + math.exp(-logit))


@dataclass(frozen=True)
class CaseStudyResult:
    scenario: SynthScenario
    reports: tuple[DriftReport, ...]
    impact: ImpactReport
    density: tuple[dict[str, Any], ...]

    def to_wire(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario.to_wire(),
            "reports": [r.to_wire() for r in self.reports],
            "impact": self.impact.to_wire(),
            "density": list(self.density),
        }


def run_case_study(
    scenario: SynthScenario, thresholds: DriftThresholds | None = None
) -> CaseStudyResult:
    """Generate, monitor, and score one scenario end to end.

    The impact simulation pairs each post-onset observation's score with the
    score it would have had after correcting the value for the known shift.
    """
    monitor = DriftMonitor(
        feature=scenario.feature,
        edges=scenario.edges(),
        reference_start=scenario.reference_start,
        reference_end=scenario.reference_end,
        seed=scenario.seed,
    )
    drifted_scores: list[float] = []
    corrected_scores: list[float] = []
    for feature, value, at in synth_stream(scenario):
        monitor.observe(value, at)
        shift = scenario.shift_at(at)
        if shift > 0.0:
            drifted_scores.append(standin_risk_score(value, scenario))
            corrected_scores.append(standin_risk_score(value - shift, scenario))
    if drifted_scores:
        impact = simulate_impact(corrected_scores, drifted_scores, scenario.impact_thresholds)
    else:
        impact = ImpactReport(tuple(scenario.impact_thresholds), tuple(0.0 for _ in scenario.impact_thresholds), 0)
    return CaseStudyResult(
        scenario=scenario,
        reports=tuple(monitor.reports(thresholds)),
        impact=impact,
        density=tuple(monitor.density_data()),
    )


def observe_records(monitor: DriftMonitor, records: Iterable) -> int:
    """Feed a monitor from assembled records' input feature maps."""
    fed = 0
    for rec in records:
        inputs = getattr(rec, "inputs", None)
        header = getattr(rec, "header", None)
        if inputs is None or header is None or inputs.features is None:
            continue
        value = inputs.features.get(monitor.feature)
        if value is None:
            continue
        monitor.observe(value, header.invoked_at)
        fed += 1
    return fed
