from datetime import timedelta
import json
import pytest

from pgir.ingest import (
    RepositoryError,
    RuleDeletion,
    RuleVersionRecord,
    ScanWarning,
    build_lineages,
    mine_repository,
    read_lineages,
    rule_body,
    scan_repository,
    write_lineages,
    write_scan_warnings,
)
from pgir.spl import SplParseError

from conftest import EPOCH, fixture_text, graph_of


def test_versions_in_order(rule_repo):
    c1 = rule_repo.commit(0, write={"rules/a.spl": "a=1 b=2"})
    rule_repo.commit(5, write={"rules/a.spl": "a=1 b=3"})
    rule_repo.commit(9, write={"rules/a.spl": "a=1 b=3 c=4"})

    (lineage,) = mine_repository(rule_repo.path)

    assert lineage.lineage_id == f"rules/a.spl@{c1[:12]}"
    assert [v.version_index for v in lineage.versions] == [0, 1, 2]
    assert [v.author_time for v in lineage.versions] == [EPOCH + timedelta(days=d) for d in (0, 5, 9)]
    assert lineage.versions[2].graph == graph_of("a=1 b=3 c=4").with_meta(
        rule="rules/a.spl", commit=lineage.versions[2].commit_id
    )
    assert lineage.status == "active"
    assert lineage.lifetime_days == pytest.approx(9.0)


def test_path_filters(rule_repo):
    rule_repo.commit(
        0,
        write={
            "detections/endpoint/a.spl": "a=1",
            "detections/b.spl": "b=1",
            "docs/readme.spl": "c=1",
        },
    )

    lineages = mine_repository(rule_repo.path, path_filters=["detections/**/*.spl"])
    assert sorted(l.versions[0].path for l in lineages) == ["detections/b.spl", "detections/endpoint/a.spl"]

    commits = list(scan_repository(rule_repo.path, path_filters=["docs/*"]))
    assert [c.path for c in commits[0].changes] == ["docs/readme.spl"]


def test_first_parent_walk(rule_repo):
    rule_repo.commit(0, write={"a.spl": "a=1"})
    repo = rule_repo.repo
    main = repo.active_branch

    feature = repo.create_head("feature")
    feature.checkout()
    rule_repo.commit(1, write={"a.spl": "a=2"})
    rule_repo.commit(2, write={"a.spl": "a=3"})

    main.checkout()
    rule_repo.commit(3, write={"b.spl": "b=1"})
    repo.git.merge("feature", "--no-ff", "-m", "Merge feature")

    lineages = {l.versions[0].path: l for l in mine_repository(rule_repo.path)}
    texts = [v.rule_text for v in lineages["a.spl"].versions]
    assert texts == ["a=1", "a=3"]


def test_rename_continues_lineage(rule_repo):
    rule_repo.commit(0, write={"old.spl": "a=1 b=2 c=3"})
    rule_repo.commit(4, write={"new.spl": "a=1 b=2 c=3 d=4"}, delete=["old.spl"])

    (lineage,) = mine_repository(rule_repo.path)
    assert lineage.paths == ["old.spl", "new.spl"]
    assert lineage.status == "active"
    assert len(lineage.versions) == 2


def test_pure_rename(rule_repo):
    rule_repo.commit(0, write={"old.spl": "x=1"})
    rule_repo.commit(1, write={"new.spl": "x=1"}, delete=["old.spl"])

    (lineage,) = mine_repository(rule_repo.path)
    assert lineage.paths == ["old.spl", "new.spl"]


def test_rename_below_threshold(rule_repo):
    rule_repo.commit(0, write={"old.spl": "a=1 b=2 c=3"})
    rule_repo.commit(4, write={"new.spl": "x=7 y=8 z=9"}, delete=["old.spl"])

    lineages = {l.versions[0].path: l for l in mine_repository(rule_repo.path)}
    assert lineages["old.spl"].status == "deleted"
    assert lineages["old.spl"].deleted_at == EPOCH + timedelta(days=4)
    assert lineages["new.spl"].status == "active"


def test_split(rule_repo):
    c1 = rule_repo.commit(0, write={"r.spl": "a=1 b=2 c=3 d=4"})
    c2 = rule_repo.commit(
        3,
        write={"x.spl": "a=1 b=2 c=3 d=4 e=5", "y.spl": "a=1 b=2 c=3"},
        delete=["r.spl"],
    )

    lineages = {l.lineage_id: l for l in mine_repository(rule_repo.path)}
    assert set(lineages) == {f"r.spl@{c1[:12]}", f"y.spl@{c2[:12]}"}
    assert lineages[f"r.spl@{c1[:12]}"].paths == ["r.spl", "x.spl"]


def test_merge_leaves_other_deleted(rule_repo):
    rule_repo.commit(0, write={"p.spl": "a=1 b=2", "q.spl": "c=3 d=4"})
    rule_repo.commit(6, write={"r.spl": "a=1 b=2 c=3"}, delete=["p.spl", "q.spl"])

    lineages = {l.versions[0].path: l for l in mine_repository(rule_repo.path)}
    assert set(lineages) == {"p.spl", "q.spl"}
    assert lineages["p.spl"].paths == ["p.spl", "r.spl"]
    assert lineages["q.spl"].status == "deleted"


def test_undecodable_blob_is_skipped(rule_repo, tmp_path):
    commit = rule_repo.commit(0, write={"ok.spl": "a=1", "bad.spl": b"\xff\xfe\x00garbage"})

    lineages = mine_repository(rule_repo.path)
    assert [l.versions[0].path for l in lineages] == ["ok.spl"]

    warnings = []
    mine_repository(rule_repo.path, warnings=warnings)
    reason = "not valid UTF-8: invalid start byte at byte 0"
    assert warnings == [ScanWarning("bad.spl", commit, reason)]

    path = tmp_path / "scan_warnings.jsonl"
    write_scan_warnings(warnings, path)
    assert json.loads(path.read_text(encoding="utf-8")) == {"path": "bad.spl", "commit": commit, "reason": reason}


def test_unparseable_version_is_kept(rule_repo):
    rule_repo.commit(0, write={"a.spl": "a=1"})
    rule_repo.commit(1, write={"a.spl": "a=1 [search b=2]"})
    rule_repo.commit(2, write={"a.spl": "a=2"})

    (lineage,) = mine_repository(rule_repo.path)
    assert len(lineage.versions) == 3
    assert lineage.versions[1].parse_error
    assert [v.version_index for v in lineage.parseable_versions()] == [0, 2]


def test_bad_repository(tmp_path, rule_repo):
    rule_repo.commit(0, write={"a.spl": "a=1"})

    with pytest.raises(RepositoryError):
        mine_repository(rule_repo.path, "no-such-branch")

    with pytest.raises(RepositoryError):
        mine_repository(tmp_path / "missing")

    (tmp_path / "plain").mkdir()
    with pytest.raises(RepositoryError):
        mine_repository(tmp_path / "plain")


def test_yaml_rules(rule_repo):
    text = fixture_text("auditd_sudo.yml")
    rule_repo.commit(0, write={"detections/sudo.yml": text})
    # A changed search under a new name keeps its id
    renamed = text.replace('"*su *"', '"*su -*"')
    rule_repo.commit(2, write={"detections/sudo_su.yml": renamed}, delete=["detections/sudo.yml"])

    (lineage,) = mine_repository(rule_repo.path)
    assert lineage.versions[0].rule_id == "817a5c89-5b92-4818-a22d-aa35e1361afe"
    assert lineage.paths == ["detections/sudo.yml", "detections/sudo_su.yml"]
    assert all(v.parseable for v in lineage.versions)


def test_rule_body():
    body, rule_id = rule_body(fixture_text("auditd_sudo.yml"), "x.yml")
    assert body.startswith("`linux_auditd`")
    assert rule_id == "817a5c89-5b92-4818-a22d-aa35e1361afe"

    assert rule_body("a=1", "x.spl") == ("a=1", None)

    with pytest.raises(SplParseError):
        rule_body("name: x\n", "x.yml")
    with pytest.raises(SplParseError):
        rule_body("- just a list\n", "x.yaml")


def test_backwards_time_is_clamped():
    t0 = EPOCH + timedelta(days=10)
    records = [
        RuleVersionRecord("a.spl", "c1", t0, "a=1"),
        RuleVersionRecord("a.spl", "c2", t0 - timedelta(days=3), "a=2"),
        RuleDeletion("a.spl", "c3", t0 - timedelta(days=5)),
    ]

    (lineage,) = build_lineages(records)
    assert lineage.versions[1].author_time == t0
    assert lineage.deleted_at == t0


def test_invalid_rename_threshold():
    with pytest.raises(ValueError):
        build_lineages([], 1.5)


def test_lineage_file_round_trip(rule_repo, tmp_path):
    rule_repo.commit(0, write={"a.spl": "a=1 b=2", "b.spl": "x=1"})
    rule_repo.commit(2, write={"a.spl": "a=1 b=3"})
    rule_repo.commit(3, delete=["b.spl"])
    lineages = mine_repository(rule_repo.path)

    path = tmp_path / "lineages.jsonl"
    write_lineages(lineages, path)
    loaded = read_lineages(path)

    assert [l.lineage_id for l in loaded] == [l.lineage_id for l in lineages]
    for old, new in zip(lineages, loaded):
        assert new.status == old.status
        assert new.deleted_at == old.deleted_at
        assert [v.author_time for v in new.versions] == [v.author_time for v in old.versions]
        assert [v.graph for v in new.versions] == [v.graph for v in old.versions]

    path.write_text("{broken\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_lineages(path)
