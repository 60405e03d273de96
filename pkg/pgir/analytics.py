from typing import Iterable
from dataclasses import dataclass, field
from collections import Counter
from datetime import datetime
from pathlib import Path
from concurrent.futures import ThreadPoolExecutor
import csv
import json
import math
import numpy as np

from pgir.enums import (
    StructOp,
    EXPANSION_OPS,
    CONTRACTION_OPS,
    PatternName,
    MixingDetail,
)
from pgir.util import logger
from pgir.hash import pair_id
from pgir.ingest import Lineage, RuleVersionRecord, format_time
from pgir.align import AlignParams
from pgir.cost import CostWeights
from pgir.structops import StructuralOpSet, compare, cooccurrence_matrix


DAY = 86400.0
QUARTER_DAYS = 91.3125
TWO_YEARS_DAYS = 730.5
THREE_YEARS_DAYS = 1095.75
EARLY_REVISION_DAYS = 90.0

ARCHETYPES = {
    (0, 0, 0): "Never edited",
    (1, 0, 0): "Creation-only",
    (0, 1, 0): "Mid-only",
    (0, 0, 1): "Late-only",
    (1, 1, 0): "Creation + Mid",
    (1, 0, 1): "Creation + Late",
    (0, 1, 1): "Mid + Late",
    (1, 1, 1): "All three",
}


@dataclass
class StepRecord:
    lineage_id: str
    from_index: int
    to_index: int
    from_commit: str
    to_commit: str
    from_time: datetime
    to_time: datetime
    d_pred: float
    breakdown: dict[str, float] = field(default_factory=dict)
    ops: StructuralOpSet = field(default_factory=StructuralOpSet)
    bridged: bool = False
    version_a: RuleVersionRecord = field(default=None, repr=False, compare=False)
    version_b: RuleVersionRecord = field(default=None, repr=False, compare=False)

    @property
    def predicate_changing(self) -> bool:
        return self.d_pred > 0

    @property
    def gap_days(self) -> float:
        return (self.to_time - self.from_time).total_seconds() / DAY

    @property
    def pair_id(self) -> str:
        return pair_id(self.lineage_id, self.from_index, self.to_index)

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "lineage_id": self.lineage_id,
            "from_index": self.from_index,
            "to_index": self.to_index,
            "from_commit": self.from_commit,
            "to_commit": self.to_commit,
            "from_time": format_time(self.from_time),
            "to_time": format_time(self.to_time),
            "d_pred": round(self.d_pred, 6),
            "breakdown": {k: round(v, 6) for k, v in self.breakdown.items()},
            "bridged": self.bridged,
            **self.ops.to_dict(),
        }


def pair_stream(
    lineage: Lineage,
    params: AlignParams = None,
    weights: CostWeights = None,
    theta_flip: float = 0.5,
) -> list[StepRecord]:
    """Compare adjacent parseable versions of a lineage.

    Unparseable versions are skipped and the pair spans the gap. Lineages with
    fewer than two parseable versions produce no steps.
    """
    versions = lineage.parseable_versions()
    if len(versions) < 2:
        return []

    steps = []
    for a, b in zip(versions, versions[1:]):
        bridged = b.version_index - a.version_index > 1
        if bridged:
            logger.warning(
                f"{lineage.lineage_id}: bridging unparseable versions between "
                f"{a.version_index} and {b.version_index}"
            )

        if a.graph.structure_key == b.graph.structure_key:
            d_pred, breakdown, ops = 0.0, {}, StructuralOpSet()
        else:
            comp = compare(a.graph, b.graph, params, weights, theta_flip)
            d_pred, breakdown, ops = comp.d_pred, comp.script.breakdown(), comp.ops

        ops.lineage = lineage.lineage_id
        ops.version_pair = (a.version_index, b.version_index)
        steps.append(
            StepRecord(
                lineage.lineage_id,
                a.version_index,
                b.version_index,
                a.commit_id,
                b.commit_id,
                a.author_time,
                b.author_time,
                d_pred,
                breakdown,
                ops,
                bridged,
                a,
                b,
            )
        )
        logger.debug(f"{steps[-1].pair_id}: d_pred={d_pred:.2f} ops={sorted(ops.ops)}")

    return steps


# Statistics ------------------------------------------------------------------


def _quantiles(values: list[float], qs: Iterable[float]) -> list[float | None]:
    if not values:
        return [None for _ in qs]
    arr = np.asarray(values, dtype=float)
    return [float(np.percentile(arr, q, method="linear")) for q in qs]


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def observed_lifetime_days(lineage: Lineage, snapshot_time: datetime) -> float:
    end = lineage.deleted_at if lineage.status == "deleted" else snapshot_time
    return (end - lineage.created_at).total_seconds() / DAY


def snapshot_of(lineages: Iterable[Lineage]) -> datetime | None:
    times = [l.last_seen for l in lineages if l.versions]
    return max(times) if times else None


def prevalence_and_timing(
    lineages: list[Lineage],
    steps: dict[str, list[StepRecord]],
    snapshot_time: datetime = None,
) -> dict:
    """Corpus-wide revision prevalence, timing and magnitude statistics."""
    snapshot_time = snapshot_time or snapshot_of(lineages)

    revision_counts = []
    first_revision_days = []
    magnitudes = []
    for lineage in lineages:
        changing = [s for s in steps.get(lineage.lineage_id, []) if s.predicate_changing]
        magnitudes.extend(s.d_pred for s in changing)
        if changing:
            revision_counts.append(len(changing))
            first = (changing[0].to_time - lineage.created_at).total_seconds() / DAY
            first_revision_days.append(first)

    n = len(lineages)
    all_steps = [s for l in lineages for s in steps.get(l.lineage_id, [])]
    versions = [len(l.versions) for l in lineages]
    lifetimes = [observed_lifetime_days(l, snapshot_time) for l in lineages] if n else []

    rev_mean = _mean(revision_counts)
    rev_median, rev_p90 = _quantiles(revision_counts, (50, 90))
    (first_median,) = _quantiles(first_revision_days, (50,))
    mag_p25, mag_median, mag_p90 = _quantiles(magnitudes, (25, 50, 90))
    (versions_median,) = _quantiles(versions, (50,))
    (lifetime_median,) = _quantiles(lifetimes, (50,))

    def frac(count: int, total: int) -> float | None:
        return count / total if total else None

    return {
        "snapshot_time": format_time(snapshot_time) if snapshot_time else None,
        "rules": n,
        "active": sum(1 for l in lineages if l.status == "active"),
        "deleted": sum(1 for l in lineages if l.status == "deleted"),
        "versions_mean": _mean(versions),
        "versions_median": versions_median,
        "lifetime_days_mean": _mean(lifetimes),
        "lifetime_days_median": lifetime_median,
        "step_eligible_rules": sum(1 for l in lineages if len(l.parseable_versions()) >= 2),
        "raw_revision_steps": sum(max(v - 1, 0) for v in versions),
        "step_eligible_steps": len(all_steps),
        "predicate_changing_steps": len(magnitudes),
        "excluded_versions": sum(1 for l in lineages for v in l.versions if not v.parseable),
        "bridged_pairs": sum(1 for s in all_steps if s.bridged),
        "edited_rules": len(revision_counts),
        "proportion_edited": frac(len(revision_counts), n),
        "revisions_per_edited_mean": rev_mean,
        "revisions_per_edited_median": rev_median,
        "revisions_per_edited_p90": rev_p90,
        "days_to_first_revision_median": first_median,
        "first_revision_within_90_days": frac(
            sum(1 for d in first_revision_days if d <= EARLY_REVISION_DAYS), len(first_revision_days)
        ),
        "first_revision_after_2_years": frac(
            sum(1 for d in first_revision_days if d > TWO_YEARS_DAYS), len(first_revision_days)
        ),
        "d_pred_mean": _mean(magnitudes),
        "d_pred_p25": mag_p25,
        "d_pred_median": mag_median,
        "d_pred_p90": mag_p90,
        "d_pred_max": max(magnitudes) if magnitudes else None,
    }


def calendar_quarter(t: datetime) -> str:
    return f"{t.year}Q{(t.month - 1) // 3 + 1}"


def _quarter_range(first: str, last: str) -> list[str]:
    y, q = int(first[:4]), int(first[-1])
    ret = []
    while True:
        ret.append(f"{y}Q{q}")
        if ret[-1] == last:
            return ret
        y, q = (y + 1, 1) if q == 4 else (y, q + 1)


def repo_of(lineage_id: str) -> str:
    """Repository label of a prefixed lineage id, empty for single-repository runs."""
    head, sep, _ = lineage_id.partition(":")
    return head if sep and "@" not in head else ""


def quarterly_volume(
    lineages: list[Lineage], steps: dict[str, list[StepRecord]]
) -> list[tuple[str, str, int, int]]:
    """Rules created and predicate-changing revisions per calendar quarter and repository.

    Quarters without activity between the first and the last active one are
    included with zero counts.
    """
    created = Counter()
    revised = Counter()
    for lineage in lineages:
        repo = repo_of(lineage.lineage_id)
        created[(repo, calendar_quarter(lineage.created_at))] += 1
        for s in steps.get(lineage.lineage_id, []):
            if s.predicate_changing:
                revised[(repo, calendar_quarter(s.to_time))] += 1

    rows = []
    for repo in sorted({r for r, _ in created}):
        quarters = sorted(q for r, q in created.keys() | revised.keys() if r == repo)
        for q in _quarter_range(quarters[0], quarters[-1]):
            rows.append((repo, q, created[(repo, q)], revised[(repo, q)]))
    return rows


STRUCTURAL_BUCKETS = ("1", "2", "3", "4", "5+")


def structural_op_distribution(steps: Iterable[StepRecord]) -> dict:
    """Distinct structural labels per predicate-changing step.

    Value-only steps count towards ``steps`` but not ``structural``; the mean and
    the buckets cover structural steps only.
    """
    changing = [s for s in steps if s.predicate_changing]
    sizes = [len(s.ops.structural) for s in changing]
    structural = [n for n in sizes if n > 0]

    buckets = Counter(str(n) if n < 5 else "5+" for n in structural)
    return {
        "steps": len(changing),
        "structural": len(structural),
        "avg": _mean(structural),
        "buckets": {b: buckets[b] for b in STRUCTURAL_BUCKETS},
    }


@dataclass
class CohortMatrix:
    cohorts: list[str]
    sizes: list[int]
    values: np.ndarray

    @property
    def lags(self) -> list[int]:
        return list(range(self.values.shape[1]))

    def cell(self, cohort: str, lag: int) -> float:
        return float(self.values[self.cohorts.index(cohort), lag])

    def to_csv(self, path: Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["cohort", "rules"] + [f"lag{l}" for l in self.lags])
            for i, cohort in enumerate(self.cohorts):
                writer.writerow([cohort, self.sizes[i]] + [f"{v:.4f}" for v in self.values[i]])


def cohort_lag_matrix(lineages: list[Lineage], steps: dict[str, list[StepRecord]]) -> CohortMatrix:
    """Mean accumulated edit magnitude per rule, by creation quarter and lag in quarters."""
    cohort_of = {l.lineage_id: calendar_quarter(l.created_at) for l in lineages}
    cohorts = sorted(set(cohort_of.values()))
    sizes = [sum(1 for c in cohort_of.values() if c == cohort) for cohort in cohorts]

    cells: dict[tuple[str, int], float] = {}
    max_lag = 0
    for lineage in lineages:
        for s in steps.get(lineage.lineage_id, []):
            if not s.predicate_changing:
                continue
            lag = math.floor((s.to_time - lineage.created_at).total_seconds() / DAY / QUARTER_DAYS)
            key = (cohort_of[lineage.lineage_id], lag)
            cells[key] = cells.get(key, 0.0) + s.d_pred
            max_lag = max(max_lag, lag)

    values = np.zeros((len(cohorts), max_lag + 1 if cohorts else 0))
    for (cohort, lag), total in cells.items():
        i = cohorts.index(cohort)
        values[i, lag] = total / sizes[i]

    return CohortMatrix(cohorts, sizes, values)


def classify_archetype(
    lineage: Lineage, steps: list[StepRecord], snapshot_time: datetime
) -> tuple[int, int, int] | None:
    """Edit-window triple of a lineage, None if observed for less than three years.

    Windows are measured from the creation commit: the creation quarter, the
    rest of the first two years and everything after.
    """
    if observed_lifetime_days(lineage, snapshot_time) < THREE_YEARS_DAYS:
        return None

    windows = [0, 0, 0]
    for s in steps:
        if not s.predicate_changing:
            continue
        days = (s.to_time - lineage.created_at).total_seconds() / DAY
        if days < QUARTER_DAYS:
            windows[0] = 1
        elif days < TWO_YEARS_DAYS:
            windows[1] = 1
        else:
            windows[2] = 1

    return tuple(windows)


def classify_pattern(
    step_ops: Iterable[StepRecord | StructuralOpSet],
) -> tuple[PatternName, MixingDetail | None] | None:
    """Evolution pattern of a lineage from its predicate-changing steps."""
    op_sets = []
    for s in step_ops:
        if isinstance(s, StepRecord):
            if not s.predicate_changing:
                continue
            s = s.ops
        op_sets.append(s.ops)

    if not op_sets:
        return None

    expands = [bool(ops & EXPANSION_OPS) for ops in op_sets]
    contracts = [bool(ops & CONTRACTION_OPS) for ops in op_sets]
    structural = any(ops - {StructOp.VAL_UPDATE} for ops in op_sets)

    if not structural:
        return "value-only", None

    if any(expands) and any(contracts):
        mixed_step = any(e and c for e, c in zip(expands, contracts))
        pure_expand = any(e and not c for e, c in zip(expands, contracts))
        pure_contract = any(c and not e for e, c in zip(expands, contracts))
        if not mixed_step:
            return "mixed", "inter_only"
        if pure_expand and pure_contract:
            return "mixed", "both"
        return "mixed", "intra_only"

    if any(expands):
        return "expand-only", None
    if any(contracts):
        return "contract-only", None
    return "restructure-only", None


@dataclass
class ABATriplet:
    lineage_id: str
    indices: tuple[int, int, int]
    restore_hours: float


def detect_aba(lineage: Lineage, collapse_repeats: bool = True) -> list[ABATriplet]:
    """Find A-B-A reversions over consecutive predicate states.

    With ``collapse_repeats`` runs of versions sharing one canonical form count as
    a single state, so commits that leave the predicate untouched do not hide a
    reversion. Without it the triple must be strictly consecutive parseable
    versions.
    """
    states: list[RuleVersionRecord] = []
    for v in lineage.parseable_versions():
        if collapse_repeats and states and states[-1].graph.structure_key == v.graph.structure_key:
            continue
        states.append(v)

    ret = []
    for a, b, c in zip(states, states[1:], states[2:]):
        if a.graph.structure_key == c.graph.structure_key != b.graph.structure_key:
            hours = (c.author_time - b.author_time).total_seconds() / 3600.0
            ret.append(
                ABATriplet(
                    lineage.lineage_id, (a.version_index, b.version_index, c.version_index), hours
                )
            )

    return ret


def aba_summary(triplets: dict[str, list[ABATriplet]], collapse_repeats: bool = True) -> dict:
    hours = [t.restore_hours for ts in triplets.values() for t in ts]
    p25, median, p75 = _quantiles(hours, (25, 50, 75))
    return {
        "collapse_repeats": collapse_repeats,
        "lineages_with_aba": sum(1 for ts in triplets.values() if ts),
        "triplets": len(hours),
        "restore_hours_p25": p25,
        "restore_hours_median": median,
        "restore_hours_p75": p75,
        "within_24h": sum(1 for h in hours if h <= 24) / len(hours) if hours else None,
        "within_7d": sum(1 for h in hours if h <= 168) / len(hours) if hours else None,
    }


# Corpus ----------------------------------------------------------------------


@dataclass
class CorpusAnalysis:
    lineages: list[Lineage]
    steps: dict[str, list[StepRecord]]
    snapshot_time: datetime

    def all_steps(self) -> list[StepRecord]:
        return [s for l in self.lineages for s in self.steps.get(l.lineage_id, [])]

    def changing_steps(self) -> list[StepRecord]:
        return [s for s in self.all_steps() if s.predicate_changing]

    def archetypes(self) -> dict[str, tuple[int, int, int] | None]:
        return {
            l.lineage_id: classify_archetype(l, self.steps.get(l.lineage_id, []), self.snapshot_time)
            for l in self.lineages
        }

    def patterns(self) -> dict[str, tuple[PatternName, MixingDetail | None] | None]:
        return {l.lineage_id: classify_pattern(self.steps.get(l.lineage_id, [])) for l in self.lineages}

    def aba(self, collapse_repeats: bool = True) -> dict[str, list[ABATriplet]]:
        return {l.lineage_id: detect_aba(l, collapse_repeats) for l in self.lineages}


def analyze_lineages(
    lineages: list[Lineage],
    params: AlignParams = None,
    weights: CostWeights = None,
    theta_flip: float = 0.5,
    snapshot_time: datetime = None,
    workers: int = 1,
) -> CorpusAnalysis:
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        streams = pool.map(lambda l: pair_stream(l, params, weights, theta_flip), lineages)
        steps = {l.lineage_id: s for l, s in zip(lineages, streams)}

    snapshot_time = snapshot_time or snapshot_of(lineages)
    logger.info(f"Compared {sum(len(s) for s in steps.values())} steps in {len(lineages)} lineages")
    return CorpusAnalysis(lineages, steps, snapshot_time)


def _write_csv(path: Path, header: list[str], rows: Iterable[list]) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.4f}"


def write_reports(
    analysis: CorpusAnalysis, out_dir: Path, aba_collapse_repeats: bool = True
) -> list[Path]:
    """Write all lineage analytics artifacts and return their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    path = out_dir / "steps.jsonl"
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for s in analysis.all_steps():
            f.write(json.dumps(s.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
    written.append(path)

    summary = prevalence_and_timing(analysis.lineages, analysis.steps, analysis.snapshot_time)
    triplets = analysis.aba(aba_collapse_repeats)
    summary["aba"] = aba_summary(triplets, aba_collapse_repeats)
    path = out_dir / "summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(path)

    archetypes = analysis.archetypes()
    eligible = [t for t in archetypes.values() if t is not None]
    path = out_dir / "archetypes.csv"
    _write_csv(
        path,
        ["archetype", "l0", "l1_7", "l8", "rules", "fraction"],
        (
            [name, *triple, eligible.count(triple), _fmt(eligible.count(triple) / len(eligible) if eligible else None)]
            for triple, name in ARCHETYPES.items()
        ),
    )
    written.append(path)

    patterns = analysis.patterns()
    classified = [p for p in patterns.values() if p is not None]
    keys = [
        ("value-only", None),
        ("expand-only", None),
        ("contract-only", None),
        ("restructure-only", None),
        ("mixed", "intra_only"),
        ("mixed", "inter_only"),
        ("mixed", "both"),
    ]
    path = out_dir / "patterns.csv"
    _write_csv(
        path,
        ["pattern", "mixing", "rules", "fraction"],
        (
            [p, m or "", classified.count((p, m)), _fmt(classified.count((p, m)) / len(classified) if classified else None)]
            for p, m in keys
        ),
    )
    written.append(path)

    path = out_dir / "aba.csv"
    _write_csv(
        path,
        ["lineage_id", "v_i", "v_i1", "v_i2", "restore_hours"],
        (
            [t.lineage_id, *t.indices, f"{t.restore_hours:.4f}"]
            for lid in sorted(triplets)
            for t in triplets[lid]
        ),
    )
    written.append(path)

    path = out_dir / "aba_summary.csv"
    _write_csv(
        path,
        ["metric", "value"],
        ([k, v if isinstance(v, int) else _fmt(v)] for k, v in summary["aba"].items()),
    )
    written.append(path)

    path = out_dir / "cohort_matrix.csv"
    cohort_lag_matrix(analysis.lineages, analysis.steps).to_csv(path)
    written.append(path)

    changing = analysis.changing_steps()
    path = out_dir / "ops_matrix.csv"
    cooccurrence_matrix(s.ops for s in changing).to_csv(path)
    written.append(path)

    path = out_dir / "ops_prevalence.csv"
    _write_csv(
        path,
        ["op", "steps", "fraction", "multi_label_steps"],
        (
            [
                str(op),
                sum(1 for s in changing if op in s.ops.ops),
                _fmt(sum(1 for s in changing if op in s.ops.ops) / len(changing) if changing else None),
                sum(1 for s in changing if op in s.ops.ops and s.ops.is_multi_label),
            ]
            for op in StructOp
        ),
    )
    written.append(path)

    path = out_dir / "structural_ops_per_step.csv"
    dist = structural_op_distribution(changing)
    _write_csv(
        path,
        ["steps", "structural", "avg", *STRUCTURAL_BUCKETS],
        [[dist["steps"], dist["structural"], _fmt(dist["avg"]), *dist["buckets"].values()]],
    )
    written.append(path)

    path = out_dir / "quarterly_volume.csv"
    _write_csv(
        path,
        ["repo", "quarter", "created", "revisions"],
        quarterly_volume(analysis.lineages, analysis.steps),
    )
    written.append(path)

    aba_counts = {lid: len(ts) for lid, ts in triplets.items()}
    path = out_dir / "lineage_classes.csv"
    _write_csv(
        path,
        ["lineage_id", "archetype", "pattern", "mixing", "aba"],
        (
            [
                l.lineage_id,
                ARCHETYPES[archetypes[l.lineage_id]] if archetypes[l.lineage_id] else "ineligible",
                patterns[l.lineage_id][0] if patterns[l.lineage_id] else "",
                (patterns[l.lineage_id][1] or "") if patterns[l.lineage_id] else "",
                aba_counts[l.lineage_id],
            ]
            for l in sorted(analysis.lineages, key=lambda l: l.lineage_id)
        ),
    )
    written.append(path)

    return written
