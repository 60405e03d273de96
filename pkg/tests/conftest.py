from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
import random
import pytest
from git import Actor, Repo

from pgir.enums import Comparator, ValueKind
from pgir.spl import (
    AndExpr,
    AtomicPredicate,
    Expr,
    NotExpr,
    OrExpr,
    PredExpr,
    ValuePayload,
    extract_detection,
)
from pgir.graph import PredicateGraph, canonical_predicate, canonicalize
from pgir.ingest import Lineage, RuleVersionRecord, parse_version


FIXTURES = Path(__file__).parent / "fixtures"
EPOCH = datetime(2020, 1, 1, tzinfo=timezone.utc)

MIMIKATZ_V26 = [
    "\\\\mimikatz",
    "mimikatz.exe",
    "\\\\mimilib.dll",
    "privilege::debug",
    "sekurlsa::logonpasswords",
    "lsadump::sam",
    "gentilkiwi.com",
    "Kiwi Legit Printer",
]

MIMIKATZ_V31 = [
    "crypto::certificates",
    "crypto::tpminfo",
    "dpapi::masterkey",
    "kerberos::golden",
    "kerberos::ptc",
    "kerberos::ptt",
    "kerberos::tgt",
    "lsadump::",
    "mimidrv.sys",
    "\\\\mimilib.dll",
    "misc::printnightmare",
    "misc::shadowcopies",
    "privilege::backup",
    "privilege::debug",
    "privilege::driver",
    "sekurlsa::",
]

# Entries of v31 that already existed in v30
MIMIKATZ_V30_KEPT = [
    "crypto::certificates",
    "dpapi::masterkey",
    "kerberos::golden",
    "kerberos::ptt",
    "kerberos::tgt",
    "mimidrv.sys",
    "\\\\mimilib.dll",
    "misc::printnightmare",
    "misc::shadowcopies",
    "privilege::backup",
    "privilege::debug",
]


LEAVES = [
    canonical_predicate(p)
    for p in (
        AtomicPredicate("a", Comparator.EQ, ValuePayload(ValueKind.NUMBER, "1")),
        AtomicPredicate("b", Comparator.EQ, ValuePayload(ValueKind.STRING, '"x"')),
        AtomicPredicate("c", Comparator.GT, ValuePayload(ValueKind.NUMBER, "5")),
        AtomicPredicate("d", Comparator.EQ, ValuePayload(ValueKind.WILDCARD, '"*y*"')),
    )
]


def random_expr(rng: random.Random, leaves: list[AtomicPredicate] = LEAVES, depth: int = 0) -> Expr:
    if depth >= 3 or rng.random() < 0.3:
        expr = PredExpr(rng.choice(leaves))
        return NotExpr(expr) if rng.random() < 0.3 else expr

    children = tuple(random_expr(rng, leaves, depth + 1) for _ in range(rng.randint(2, 3)))
    expr = AndExpr(children) if rng.random() < 0.5 else OrExpr(children)
    return NotExpr(expr) if rng.random() < 0.2 else expr


def fixture_text(name: str) -> str:
    return (FIXTURES / name).read_text(encoding="utf-8")


def graph_of(spl: str) -> PredicateGraph:
    return canonicalize(extract_detection(spl))


def keyword_rule(keywords: list[str]) -> str:
    terms = " OR ".join(f'"{k}"' for k in keywords)
    return f"({terms}) NOT EventID=15"


def find_leaf(graph: PredicateGraph, field: str, value: str) -> int:
    for n in graph.leaves():
        leaf = graph[n]
        if leaf.predicate.field == field and leaf.norm_value == value:
            return n
    raise KeyError(f"{field}={value}")


def make_lineage(
    name: str, history: list[tuple[float, str]], start: datetime = EPOCH, deleted: float = None
) -> Lineage:
    """Lineage of parsed versions given as (days after start, rule text)."""
    lineage = Lineage(f"{name}.spl@000000000000")
    for i, (days, spl) in enumerate(history):
        record = RuleVersionRecord(f"{name}.spl", f"{name}{i:02d}", start + timedelta(days=days), spl)
        lineage.append(parse_version(record))

    if deleted is not None:
        lineage.status = "deleted"
        lineage.deleted_at = start + timedelta(days=deleted)
    return lineage


@pytest.fixture
def encoded_ps() -> tuple[PredicateGraph, PredicateGraph]:
    return graph_of(fixture_text("encoded_ps_a.spl")), graph_of(fixture_text("encoded_ps_b.spl"))


@pytest.fixture(scope="session")
def mimikatz_catalogue() -> list[str]:
    return [l for l in fixture_text("mimikatz_catalogue.txt").splitlines() if l.strip()]


@pytest.fixture
def mimikatz_expansion(mimikatz_catalogue) -> tuple[str, str]:
    added = [k for k in mimikatz_catalogue if k not in MIMIKATZ_V26][:195]
    assert len(added) == 195
    return keyword_rule(MIMIKATZ_V26), keyword_rule(MIMIKATZ_V26 + added)


@pytest.fixture
def mimikatz_contraction(mimikatz_catalogue) -> tuple[str, str]:
    removed = [k for k in mimikatz_catalogue if k not in MIMIKATZ_V31][:155]
    assert len(removed) == 155
    return keyword_rule(removed + MIMIKATZ_V30_KEPT), keyword_rule(MIMIKATZ_V31)


@pytest.fixture
def rng() -> random.Random:
    return random.Random(1337)


class RuleRepo:
    """Builds a git history of rule files with controlled author dates."""

    def __init__(self, path: Path):
        self.path = path
        self.repo = Repo.init(path)
        self.actor = Actor("Rule Author", "author@example.com")
        with self.repo.config_writer() as cw:
            cw.set_value("user", "name", self.actor.name)
            cw.set_value("user", "email", self.actor.email)

    def commit(
        self,
        when: datetime | float,
        message: str = "update",
        write: dict[str, str | bytes] = None,
        delete: list[str] = (),
    ) -> str:
        if not isinstance(when, datetime):
            when = EPOCH + timedelta(days=when)

        write = write or {}
        for rel, text in write.items():
            target = self.path / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            if isinstance(text, bytes):
                target.write_bytes(text)
            else:
                target.write_text(text, encoding="utf-8")

        if write:
            self.repo.index.add(list(write))
        if delete:
            self.repo.index.remove(list(delete), working_tree=True)

        stamp = f"{int(when.timestamp())} +0000"
        commit = self.repo.index.commit(
            message,
            author=self.actor,
            committer=self.actor,
            author_date=stamp,
            commit_date=stamp,
        )
        return commit.hexsha


@pytest.fixture
def rule_repo(tmp_path) -> RuleRepo:
    return RuleRepo(tmp_path / "repo")


@pytest.fixture
def rule_repo_factory(tmp_path):
    return lambda name: RuleRepo(tmp_path / name)


@dataclass
class History:
    repo: RuleRepo
    first: str
    rename: str
    late: str

    @property
    def path(self) -> Path:
        return self.repo.path


@pytest.fixture
def history(rule_repo) -> History:
    """A small rule repository with edits, a revert, a rename and a late addition."""
    first = rule_repo.commit(
        0,
        "initial rules",
        write={
            "rules/a.spl": "a=1 b=2",
            "rules/b.spl": "x=1 OR y=2",
            "rules/c.spl": "p=1 q=2 r=3 s=4",
        },
    )
    rule_repo.commit(10, write={"rules/a.spl": "a=1 b=2 c=3"})
    rule_repo.commit(11, "revert", write={"rules/a.spl": "a=1 b=2"})
    rule_repo.commit(40, write={"rules/b.spl": "x=1 OR y=2 OR z=3"})
    rename = rule_repo.commit(
        50, "rename", write={"rules/d.spl": "p=1 q=2 r=3 s=4 t=5"}, delete=["rules/c.spl"]
    )
    rule_repo.commit(400, write={"rules/b.spl": "x=1 OR y=2 OR z=3 OR w=4"})
    late = rule_repo.commit(1300, write={"rules/e.spl": "e=1", "rules/a.spl": "a=1 b=3"})
    return History(rule_repo, first, rename, late)
