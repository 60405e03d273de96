from typing import Iterable, Iterator, Literal
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path, PurePosixPath
import json
import yaml
from git import Repo, NULL_TREE
from git.exc import BadName, GitCommandError, InvalidGitRepositoryError, NoSuchPathError
from rapidfuzz import fuzz

from pgir.enums import LineageStatus
from pgir.util import logger, run_converter
from pgir.hash import text_digest
from pgir.spl import SplParseError, extract_detection
from pgir.graph import PredicateGraph, GraphMeta, canonicalize
from pgir.align import align


class RepositoryError(RuntimeError):
    pass


ChangeType = Literal["A", "M", "D"]
YAML_SUFFIXES = (".yml", ".yaml")


@dataclass
class FileChange:
    path: str
    change: ChangeType
    text: str = None


@dataclass
class ScannedCommit:
    commit_id: str
    author_time: datetime
    changes: list[FileChange] = field(default_factory=list)


@dataclass
class ScanWarning:
    """A file version the scan could not read."""

    path: str
    commit_id: str
    reason: str
    repo: str = None

    def to_dict(self) -> dict:
        ret = {"path": self.path, "commit": self.commit_id, "reason": self.reason}
        if self.repo is not None:
            ret["repo"] = self.repo
        return ret


def write_scan_warnings(warnings: Iterable[ScanWarning], path: Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as f:
        for w in warnings:
            f.write(json.dumps(w.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


def _matches(
path: str, path_filters: list[str]) -> bool:
    if not path_filters:
        return True
    p = PurePosixPath(path)
    return any(p.full_match(pattern) for pattern in path_filters)


def _read_blob(blob, path: str, commit_id: str, warnings: list[ScanWarning]) -> str | None:
    try:
        return blob.data_stream.read().decode("utf-8")
    except UnicodeDecodeError as e:
        logger.warning(f"Skipping undecodable file {path} at {commit_id[:12]}")
        if warnings is not None:
            warnings.append(ScanWarning(path, commit_id, f"not valid UTF-8: {e.reason} at byte {e.start}"))
        return None


def scan_repository(
    repo_path: Path | str,
    snapshot_ref: str = "HEAD",
    path_filters: list[str] = None,
    warnings: list[ScanWarning] = None,
) -> Iterator[ScannedCommit]:
    """Walk the first-parent history up to a ref and yield the rule files each commit changed.

    Parameters
    ----------
    repo_path : Path | str
        Path of a git repository.
    snapshot_ref : str
        Revision the walk ends at.
    path_filters : list[str]
        Glob patterns (``**`` spans directories) a file path must match. Empty means all files.
    warnings : list[ScanWarning]
        Receives one record per file version that could not be decoded.

    Yields
    ------
    ScannedCommit
        Commits oldest first. Renames appear as a deletion plus an addition.
    """
    path_filters = list(path_filters or [])

    try:
        repo = Repo(repo_path)
    except (InvalidGitRepositoryError, NoSuchPathError) as e:
        raise RepositoryError(f"Not a readable git repository: {repo_path}") from e

    try:
        repo.commit(snapshot_ref)
    except (BadName, ValueError, GitCommandError) as e:
        raise RepositoryError(f"Cannot resolve {snapshot_ref} in {repo_path}") from e

    for commit in repo.iter_commits(snapshot_ref, first_parent=True, reverse=True):
        commit_id = commit.hexsha
        if commit.parents:
            diffs = commit.parents[0].diff(commit)
        else:
            diffs = commit.diff(NULL_TREE, R=True)

        changes = []
        for d in diffs:
            kind = d.change_type
            if kind in ("D", "R") and _matches(d.a_path, path_filters):
                changes.append(FileChange(d.a_path, "D"))

            if kind == "D":
                continue

            if not _matches(d.b_path, path_filters):
                continue

            text = _read_blob(d.b_blob, d.b_path, commit_id, warnings)
            if text is None:
                continue

            change = "M" if kind in ("M", "T") else "A"
            changes.append(FileChange(d.b_path, change, text))

        changes.sort(key=lambda c: (c.path, c.change))
        yield ScannedCommit(commit_id, commit.authored_datetime.astimezone(timezone.utc), changes)


# Rule versions ---------------------------------------------------------------


@dataclass
class RuleVersionRecord:
    lineage_hint: str
    commit_id: str
    author_time: datetime
    rule_text: str
    path: str = None
    rule_id: str = None
    version_index: int = None
    parse_error: str = None
    graph: PredicateGraph = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.path is None:
            self.path = self.lineage_hint

    @property
    def text_digest(self) -> str:
        return text_digest(self.rule_text)

    @property
    def parseable(self) -> bool:
        return self.graph is not None


@dataclass
class RuleDeletion:
    path: str
    commit_id: str
    author_time: datetime


def rule_body(text: str, path: str, convert_cmd: str = None) -> tuple[str, str]:
    """Returns the SPL body and the in-file rule id of a rule file."""
    if not path.lower().endswith(YAML_SUFFIXES):
        if convert_cmd:
            return run_converter(convert_cmd, text), None
        return text, None

    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise SplParseError(f"Invalid YAML in {path}") from e

    if not isinstance(doc, dict):
        raise SplParseError(f"{path} is not a rule document")

    rule_id = doc.get("id") or doc.get("name")
    rule_id = str(rule_id) if rule_id is not None else None

    if isinstance(doc.get("search"), str):
        return doc["search"], rule_id

    if convert_cmd:
        return run_converter(convert_cmd, text), rule_id

    raise SplParseError(f"{path} has no SPL search and no converter was given")


def parse_version(record: RuleVersionRecord, convert_cmd: str = None) -> RuleVersionRecord:
    """Parse and canonicalize a version in place; failures become a parse-error marker."""
    meta = GraphMeta(rule=record.path, commit=record.commit_id)
    try:
        body, rule_id = rule_body(record.rule_text, record.path, convert_cmd)
        record.rule_id = record.rule_id or rule_id
        record.graph = canonicalize(extract_detection(body), meta)
        record.parse_error = None
    except (SplParseError, ValueError) as e:
        record.graph = None
        record.parse_error = str(e)
        logger.warning(f"Unparseable version of {record.path} at {record.commit_id[:12]}: {e}")

    return record


def extract_records(
    commits: Iterable[ScannedCommit], convert_cmd: str = None
) -> list[RuleVersionRecord | RuleDeletion]:
    ret = []
    for commit in commits:
        for change in commit.changes:
            if change.change == "D":
                ret.append(RuleDeletion(change.path, commit.commit_id, commit.author_time))
                continue

            record = RuleVersionRecord(
                change.path, commit.commit_id, commit.author_time, change.text, change.path
            )
            ret.append(parse_version(record, convert_cmd))

    return ret


# Lineages --------------------------------------------------------------------


@dataclass
class Lineage:
    lineage_id: str
    versions: list[RuleVersionRecord] = field(default_factory=list)
    status: LineageStatus = "active"
    deleted_at: datetime = None

    @property
    def created_at(self) -> datetime:
        return self.versions[0].author_time

    @property
    def last_seen(self) -> datetime:
        if self.deleted_at is not None:
            return self.deleted_at
        return self.versions[-1].author_time

    @property
    def lifetime_days(self) -> float:
        return (self.last_seen - self.created_at).total_seconds() / 86400.0

    @property
    def paths(self) -> list[str]:
        return list(dict.fromkeys(v.path for v in self.versions))

    def append(self, record: RuleVersionRecord) -> None:
        if self.versions and record.author_time < self.versions[-1].author_time:
            logger.warning(
                f"{self.lineage_id}: author time of {record.commit_id[:12]} goes backwards, clamping"
            )
            record.author_time = self.versions[-1].author_time

        record.version_index = len(self.versions)
        self.versions.append(record)

    def parseable_versions(self) -> list[RuleVersionRecord]:
        return [v for v in self.versions if v.parseable]

    def to_dict(self) -> dict:
        return {
            "lineage_id": self.lineage_id,
            "status": self.status,
            "created_at": format_time(self.created_at),
            "last_seen": format_time(self.last_seen),
            "deleted_at": format_time(self.deleted_at) if self.deleted_at else None,
            "versions": [
                {
                    "index": v.version_index,
                    "commit": v.commit_id,
                    "time": format_time(v.author_time),
                    "path": v.path,
                    "rule_id": v.rule_id,
                    "text_digest": v.text_digest,
                    "text": v.rule_text,
                    "parse_error": v.parse_error,
                }
                for v in self.versions
            ],
        }


def format_time(t: datetime) -> str:
    return t.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_time(text: str) -> datetime:
    return datetime.fromisoformat(text.replace("Z", "+00:00")).astimezone(timezone.utc)


def version_similarity(old: RuleVersionRecord, new: RuleVersionRecord) -> float:
    if old.rule_id is not None and old.rule_id == new.rule_id:
        return 1.0
    if old.rule_text == new.rule_text:
        return 1.0
    if old.parseable and new.parseable:
        return align(old.graph, new.graph).matched_leaf_fraction()
    return fuzz.ratio(old.rule_text, new.rule_text) / 100.0


def build_lineages(
    records: Iterable[RuleVersionRecord | RuleDeletion],
    rename_similarity_threshold: float = 0.6,
) -> list[Lineage]:
    """Assemble versions into lineages, following renames, splits and merges.

    Within a commit, every deleted path is compared against every newly added path.
    Pairs are accepted greedily by decreasing similarity (ties by path) as long as
    the similarity reaches the threshold and neither side is taken yet. An accepted
    pair continues the deleted path's lineage under the new path. Leftover
    deletions end their lineage, leftover additions start new ones.
    """
    if not 0.0 <= rename_similarity_threshold <= 1.0:
        raise ValueError(f"Rename threshold must be in [0, 1], got {rename_similarity_threshold}")

    lineages: dict[str, Lineage] = {}
    live: dict[str, Lineage] = {}

    groups: dict[str, list] = {}
    for rec in records:
        groups.setdefault(rec.commit_id, []).append(rec)

    for commit_id, events in groups.items():
        deletions = [e for e in events if isinstance(e, RuleDeletion)]
        versions = [e for e in events if isinstance(e, RuleVersionRecord)]

        deleted: dict[str, Lineage] = {}
        for d in deletions:
            lineage = live.pop(d.path, None)
            if lineage is None:
                logger.warning(f"Deletion of untracked path {d.path} at {commit_id[:12]}")
                continue
            deleted[d.path] = lineage

        added = []
        for v in versions:
            lineage = live.get(v.path)
            if lineage is not None:
                lineage.append(v)
            else:
                added.append(v)

        candidates = []
        for old_path, lineage in deleted.items():
            last = lineage.versions[-1]
            for v in added:
                sim = version_similarity(last, v)
                if sim >= rename_similarity_threshold:
                    candidates.append((-sim, old_path, v.path))

        continued_from = set()
        continued_to = {}
        for _, old_path, new_path in sorted(candidates):
            if old_path in continued_from or new_path in continued_to:
                continue
            continued_from.add(old_path)
            continued_to[new_path] = deleted[old_path]

        for v in added:
            lineage = continued_to.get(v.path)
            if lineage is None:
                lineage_id = f"{v.path}@{v.commit_id[:12]}"
                lineage = Lineage(lineage_id)
                lineages[lineage_id] = lineage
            else:
                logger.debug(f"{lineage.lineage_id} continues as {v.path}")
            lineage.append(v)
            live[v.path] = lineage

        when = events[0].author_time
        for old_path, lineage in deleted.items():
            if old_path not in continued_from:
                lineage.status = "deleted"
                lineage.deleted_at = max(when, lineage.versions[-1].author_time)

    logger.info(f"Built {len(lineages)} lineages")
    return [lineages[k] for k in sorted(lineages)]


def prefix_lineages(lineages: list[Lineage], prefix: str) -> list[Lineage]:
    return [replace(l, lineage_id=f"{prefix}:{l.lineage_id}") for l in lineages]


def write_lineages(lineages: Iterable[Lineage], path: Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as f:
        for lineage in sorted(lineages, key=lambda l: l.lineage_id):
            f.write(json.dumps(lineage.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


def read_lineages(path: Path, convert_cmd: str = None) -> list[Lineage]:
    """Load lineages.jsonl, re-parsing every version from its stored text."""
    ret = []
    with Path(path).open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                item = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: invalid JSON") from e

            lineage = Lineage(
                item["lineage_id"],
                status=item.get("status", "active"),
                deleted_at=parse_time(item["deleted_at"]) if item.get("deleted_at") else None,
            )
            for v in item["versions"]:
                record = RuleVersionRecord(
                    v["path"],
                    v["commit"],
                    parse_time(v["time"]),
                    v.get("text", ""),
                    v["path"],
                    rule_id=v.get("rule_id"),
                )
                if "text" in v:
                    parse_version(record, convert_cmd)
                else:
                    record.parse_error = "version text not stored"
                record.version_index = v.get("index", len(lineage.versions))
                lineage.versions.append(record)

            ret.append(lineage)

    return ret


def mine_repository(
    repo_path: Path | str,
    snapshot_ref: str = "HEAD",
    path_filters: list[str] = None,
    rename_similarity_threshold: float = 0.6,
    convert_cmd: str = None,
    warnings: list[ScanWarning] = None,
) -> list[Lineage]:
    commits = list(scan_repository(repo_path, snapshot_ref, path_filters, warnings))
    logger.info(f"Scanned {len(commits)} commits of {repo_path}")
    records = extract_records(commits, convert_cmd)
    return build_lineages(records, rename_similarity_threshold)
