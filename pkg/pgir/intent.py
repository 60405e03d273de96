from typing import Iterable
from dataclasses import dataclass, field
from datetime import datetime
from concurrent.futures import ThreadPoolExecutor
from collections import Counter
from pathlib import Path
import csv
import json
import re
import numpy as np

from pgir.enums import (
    Rationale,
    StructOp,
    EXPANSION_OPS,
    CONTRACTION_OPS,
    REORGANIZATION_OPS,
    Cohort,
    TrajectoryClass,
    AlternationKind,
    PairStatus,
)
from pgir.util import logger, resource_data
from pgir.config import LabelerConfig
from pgir.analytics import CorpusAnalysis, StepRecord, DAY
from pgir.labeler import IntentRecord, LabelerClient, LabelerError


PROMPT_TEMPLATE = "templates/intent_prompt.txt"

EXPECTED_RATIONALE = {
    "broader": Rationale.CE,
    "narrower": Rationale.FPR,
    "mixed": Rationale.MT,
    "unclear": Rationale.IE,
}

DIRECTIONAL = (Rationale.CE, Rationale.FPR)
GAP_BUCKETS = ["CE->CE", "FPR->FPR", "CE->FPR", "FPR->CE"]


class ContextOverflowError(ValueError):
    pass


def render_prompt(commit_a: str, commit_b: str, template: str = None) -> str:
    """Fill the intent prompt template with the two rule versions."""
    if template is None:
        template = resource_data(PROMPT_TEMPLATE)

    values = {"__COMMIT_A__": commit_a, "__COMMIT_B__": commit_b}
    return re.sub(r"__COMMIT_[AB]__", lambda m: values[m.group(0)], template)


def check_budget(prompt: str, config: LabelerConfig) -> None:
    tokens = len(prompt) / config.chars_per_token
    if tokens > config.context_tokens:
        raise ContextOverflowError(
            f"Prompt of ~{int(tokens)} tokens exceeds the budget of {config.context_tokens}"
        )


def validate_internal(record: IntentRecord) -> tuple[bool, str | None]:
    """Check that the rationale follows from the stated match-set direction."""
    expected = EXPECTED_RATIONALE[record.match_set_direction]
    actual = record.rationale
    if actual == expected:
        return True, None
    return False, f"{record.match_set_direction}->{actual}"


@dataclass
class CrossCheck:
    llm_change: bool
    pgir_change: bool
    added: bool | None = None
    removed: bool | None = None
    modified: bool | None = None

    @property
    def agree(self) -> bool:
        return self.llm_change == self.pgir_change

    def to_dict(self) -> dict:
        return {
            "llm_change": self.llm_change,
            "pgir_change": self.pgir_change,
            "agree": self.agree,
            "added_supported": self.added,
            "removed_supported": self.removed,
            "modified_supported": self.modified,
        }


def validate_cross(record: IntentRecord, step: StepRecord) -> CrossCheck:
    """Compare the labeler's structural flags with the structural ops of the step.

    Flags are only checked on pairs where both sides agree that predicate logic
    changed. A relocation or relabel supports any asserted flag.
    """
    check = CrossCheck(record.asserts_change, step.predicate_changing)
    if not (check.agree and check.pgir_change):
        return check

    ops = step.ops.ops
    reorganized = bool(ops & REORGANIZATION_OPS)
    if record.predicate_added:
        check.added = bool(ops & EXPANSION_OPS) or reorganized
    if record.predicate_removed:
        check.removed = bool(ops & CONTRACTION_OPS) or reorganized
    if record.predicate_modified_present:
        check.modified = StructOp.VAL_UPDATE in ops or reorganized

    return check


# Trajectories ----------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    cohort: Cohort
    cls: TrajectoryClass = None
    alternation: AlternationKind = None
    tau: int = None

    @property
    def label(self) -> str:
        if self.alternation:
            return f"{self.cls}/{self.alternation}"
        return self.cls or self.cohort


def directional(labels: Iterable[Rationale]) -> list[Rationale]:
    return [l for l in labels if l in DIRECTIONAL]


def direction_changes(labels: Iterable[Rationale]) -> int:
    seq = directional(labels)
    return sum(1 for a, b in zip(seq, seq[1:]) if a != b)


def classify_trajectory(labels: list[Rationale]) -> Trajectory | None:
    """Priority-ordered intent trajectory of one lineage.

    Parameters
    ----------
    labels : list[Rationale]
        Rationale labels of the lineage's labeled steps, in version order.

    Returns
    -------
    Trajectory | None
        None for an empty list.
    """
    if not labels:
        return None

    non_ie = [l for l in labels if l != Rationale.IE]
    if not non_ie:
        return Trajectory("IE-only")
    if len(non_ie) == 1:
        return Trajectory("Singleton")

    mt_share = sum(1 for l in non_ie if l == Rationale.MT) / len(non_ie)
    if mt_share >= 0.5:
        return Trajectory("Multi-revision", "Coupled")

    seq = directional(non_ie)
    if seq and all(l == Rationale.CE for l in seq):
        return Trajectory("Multi-revision", "CE-only")
    if seq and all(l == Rationale.FPR for l in seq):
        return Trajectory("Multi-revision", "FPR-only")

    tau = direction_changes(seq)
    return Trajectory("Multi-revision", "Alternating", "Oscillating" if tau >= 2 else "Phased", tau)


@dataclass
class TransitionGaps:
    gaps: list[tuple[str, float]] = field(default_factory=list)
    first_change_days: float = None
    still_flipping: bool = None


def transition_gaps(
    entries: list[tuple[Rationale, datetime]], created_at: datetime = None
) -> TransitionGaps:
    """Wall-clock gaps between consecutive directional labels, skipping IE and MT."""
    seq = [(l, t) for l, t in entries if l in DIRECTIONAL]
    ret = TransitionGaps()

    for (la, ta), (lb, tb) in zip(seq, seq[1:]):
        ret.gaps.append((f"{la}->{lb}", (tb - ta).total_seconds() / DAY))

    changes = [(a, b) for a, b in zip(seq, seq[1:]) if a[0] != b[0]]
    if changes and created_at is not None:
        ret.first_change_days = (changes[0][1][1] - created_at).total_seconds() / DAY
    if len(seq) >= 2:
        ret.still_flipping = seq[-1][0] != seq[-2][0]

    return ret


# Pipeline --------------------------------------------------------------------


@dataclass
class PairIntent:
    step: StepRecord
    status: PairStatus
    record: IntentRecord = None
    error: str = None
    internal: tuple[bool, str | None] = None
    cross: CrossCheck = None

    @property
    def trajectory_label(self) -> Rationale | None:
        if self.status == "ok":
            return self.record.rationale
        if self.status == "labeler_failure":
            return Rationale.IE
        return None

    def to_dict(self) -> dict:
        s = self.step
        return {
            "pair_id": s.pair_id,
            "lineage_id": s.lineage_id,
            "from_commit": s.from_commit,
            "to_commit": s.to_commit,
            "d_pred": round(s.d_pred, 6),
            "status": self.status,
            "error": self.error,
            "record": self.record.model_dump() if self.record else None,
            "internal_consistent": self.internal[0] if self.internal else None,
            "internal_mismatch": self.internal[1] if self.internal else None,
            "cross": self.cross.to_dict() if self.cross else None,
        }


def label_pair(step: StepRecord, client: LabelerClient, config: LabelerConfig) -> PairIntent:
    prompt = render_prompt(step.version_a.rule_text, step.version_b.rule_text)
    try:
        check_budget(prompt, config)
    except ContextOverflowError as e:
        logger.warning(f"{step.pair_id}: {e}")
        return PairIntent(step, "context_overflow", error=str(e))

    try:
        record = client.query(step.pair_id, prompt)
    except LabelerError as e:
        logger.warning(f"{step.pair_id}: {e}")
        return PairIntent(step, "labeler_failure", error=str(e))

    cross = validate_cross(record, step)
    status = "ok" if cross.agree else "disagreement"
    return PairIntent(step, status, record, internal=validate_internal(record), cross=cross)


def run_intent(
    analysis: CorpusAnalysis, config: LabelerConfig, client: LabelerClient = None
) -> list[PairIntent]:
    """Label every queried step with bounded parallelism; results keep step order."""
    client = client or LabelerClient(config)
    steps = [
        s
        for s in analysis.all_steps()
        if (s.predicate_changing or config.label_unchanged) and s.version_a is not None
    ]

    logger.info(f"Labeling {len(steps)} pairs with {config.workers} workers")
    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
        results = list(pool.map(lambda s: label_pair(s, client, config), steps))

    counts = Counter(r.status for r in results)
    logger.info(f"Intent labeling finished: {dict(sorted(counts.items()))}")
    return results


def trajectories(
    analysis: CorpusAnalysis, results: list[PairIntent]
) -> dict[str, tuple[Trajectory, TransitionGaps]]:
    by_lineage: dict[str, list[PairIntent]] = {}
    for r in results:
        by_lineage.setdefault(r.step.lineage_id, []).append(r)

    ret = {}
    for lineage in analysis.lineages:
        items = by_lineage.get(lineage.lineage_id, [])
        entries = [(r.trajectory_label, r.step.to_time) for r in items if r.trajectory_label]
        trajectory = classify_trajectory([l for l, _ in entries])
        if trajectory is None:
            continue
        ret[lineage.lineage_id] = (trajectory, transition_gaps(entries, lineage.created_at))

    return ret


def _write_csv(path: Path, header: list[str], rows: Iterable[list]) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _median(values: list[float]) -> str:
    if not values:
        return ""
    return f"{float(np.median(values)):.4f}"


def write_intent_reports(
    analysis: CorpusAnalysis, results: list[PairIntent], out_dir: Path
) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    path = out_dir / "intent.jsonl"
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for r in results:
            f.write(json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
    written.append(path)

    statuses = Counter(r.status for r in results)
    labeled = [r for r in results if r.record is not None]
    agreed = [r for r in labeled if r.cross.agree and r.cross.pgir_change]
    rows = [
        ["pairs", len(results), ""],
        ["labeled", len(labeled), ""],
        ["labeler_failure", statuses["labeler_failure"], ""],
        ["context_overflow", statuses["context_overflow"], ""],
        ["agree_change", len(agreed), ""],
        ["agree_no_change", sum(1 for r in labeled if r.cross.agree and not r.cross.pgir_change), ""],
        ["disagreement", statuses["disagreement"], ""],
    ]
    for flag in ("added", "removed", "modified"):
        asserted = [getattr(r.cross, flag) for r in agreed if getattr(r.cross, flag) is not None]
        rows.append([f"flag_{flag}", len(asserted), sum(1 for v in asserted if v)])

    rows.append(["internal_consistent", sum(1 for r in labeled if r.internal[0]), ""])
    mismatches = Counter(r.internal[1] for r in labeled if not r.internal[0])
    for kind in sorted(mismatches):
        rows.append([f"internal_mismatch:{kind}", mismatches[kind], ""])

    for rationale in Rationale:
        rows.append(
            [f"rationale:{rationale}", sum(1 for r in agreed if r.record.rationale == rationale), ""]
        )

    path = out_dir / "validation.csv"
    _write_csv(path, ["metric", "pairs", "supported"], rows)
    written.append(path)

    classified = trajectories(analysis, results)
    labels = Counter()
    for trajectory, _ in classified.values():
        labels[trajectory.cohort] += 1
        if trajectory.cls:
            labels[trajectory.cls] += 1
        if trajectory.alternation:
            labels[trajectory.alternation] += 1

    order = [
        "IE-only",
        "Singleton",
        "Multi-revision",
        "Coupled",
        "CE-only",
        "FPR-only",
        "Alternating",
        "Oscillating",
        "Phased",
    ]
    multi = labels["Multi-revision"]
    path = out_dir / "trajectories.csv"
    _write_csv(
        path,
        ["class", "lineages", "fraction"],
        (
            [
                name,
                labels[name],
                _frac(labels[name], len(classified) if i < 3 else multi),
            ]
            for i, name in enumerate(order)
        ),
    )
    written.append(path)

    path = out_dir / "trajectory_lineages.csv"
    _write_csv(
        path,
        ["lineage_id", "cohort", "class", "alternation", "tau"],
        (
            [lid, t.cohort, t.cls or "", t.alternation or "", "" if t.tau is None else t.tau]
            for lid, (t, _) in sorted(classified.items())
        ),
    )
    written.append(path)

    buckets: dict[str, list[float]] = {b: [] for b in GAP_BUCKETS}
    first_changes, flipping = [], []
    for trajectory, gaps in classified.values():
        if trajectory.cohort != "Multi-revision":
            continue
        for bucket, days in gaps.gaps:
            buckets[bucket].append(days)
        if trajectory.alternation == "Oscillating":
            if gaps.first_change_days is not None:
                first_changes.append(gaps.first_change_days)
            flipping.append(bool(gaps.still_flipping))

    rows = [[b, len(v), _median(v)] for b, v in buckets.items()]
    rows.append(["oscillating_first_change", len(first_changes), _median(first_changes)])
    rows.append(["oscillating_still_flipping", sum(flipping), _frac(sum(flipping), len(flipping))])
    path = out_dir / "gaps.csv"
    _write_csv(path, ["transition", "n", "value"], rows)
    written.append(path)

    return written


def _frac(count: int, total: int) -> str:
    return f"{count / total:.4f}" if total else ""
