import csv
import json
import pytest

from pgir import __version__
from pgir.hash import file_digest
from pgir.graph import FORMAT_VERSION, parse_canonical
from pgir.config import LabelerConfig, RepoSpec, RunConfig, load_config
from pgir.ingest import RepositoryError, read_lineages
from pgir.pipeline import run_pipeline

from conftest import graph_of


def lineage_ids(history) -> dict[str, str]:
    return {
        "a": f"rules/a.spl@{history.first[:12]}",
        "b": f"rules/b.spl@{history.first[:12]}",
        "c": f"rules/c.spl@{history.first[:12]}",
        "e": f"rules/e.spl@{history.late[:12]}",
    }


def answer(label: str, direction: str) -> str:
    return json.dumps(
        {
            "from_commit": "A",
            "to_commit": "B",
            "match_set_direction": direction,
            "predicate_modified_present": True,
            "predicate_added": True,
            "predicate_removed": False,
            "summary": "Changes the detection logic.",
            "rationale_label": label,
            "rationale_confidence": "high",
            "rationale_support": "See the diff.",
        }
    )


@pytest.fixture
def transcript(history, tmp_path):
    ids = lineage_ids(history)
    answers = {
        f"{ids['a']}#0-1": answer("coverage_expansion", "broader"),
        f"{ids['a']}#1-2": answer("false_positive_reduction", "narrower"),
        f"{ids['a']}#2-3": answer("coverage_expansion", "broader"),
        f"{ids['c']}#0-1": answer("mixed_tradeoff", "mixed"),
    }
    path = tmp_path / "transcript.jsonl"
    with path.open("w", encoding="utf-8") as f:
        for pid, content in answers.items():
            f.write(json.dumps({"pair_id": pid, "response": content}) + "\n")
    return str(path)


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def test_run_without_intent(history, tmp_path):
    config = RunConfig(repos=[RepoSpec(str(history.path))], out=str(tmp_path / "out"), skip_intent=True)
    out = run_pipeline(config)

    ids = lineage_ids(history)
    lineages = {l.lineage_id: l for l in read_lineages(out / "lineages.jsonl")}
    assert set(lineages) == set(ids.values())
    assert lineages[ids["c"]].paths == ["rules/c.spl", "rules/d.spl"]

    assert not (out / "intent.jsonl").exists()
    assert load_config(out / "config.yaml") == config

    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["rules"] == 4
    assert summary["edited_rules"] == 3
    assert summary["aba"]["triplets"] == 1

    classes = {r["lineage_id"]: r for r in read_csv(out / "lineage_classes.csv")}
    assert classes[ids["b"]]["pattern"] == "expand-only"
    assert classes[ids["e"]]["archetype"] == "ineligible"

    # No staging directories are left behind
    assert sorted(p.name for p in tmp_path.iterdir()) == ["out", "repo"]


def test_manifest(history, tmp_path):
    config = RunConfig(repos=[RepoSpec(str(history.path))], out=str(tmp_path / "out"), skip_intent=True)
    out = run_pipeline(config)

    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["pgir_version"] == __version__
    assert manifest["format_version"] == FORMAT_VERSION

    artifacts = manifest["artifacts"]
    assert {
        "lineages.jsonl",
        "steps.jsonl",
        "summary.json",
        "structural_ops_per_step.csv",
        "quarterly_volume.csv",
        "scan_warnings.jsonl",
        "config.yaml",
    } <= set(artifacts)
    for name, digest in artifacts.items():
        assert file_digest(out / name) == digest


def test_run_with_replay(history, transcript, tmp_path):
    config = RunConfig(
        repos=[RepoSpec(str(history.path))],
        out=str(tmp_path / "out"),
        labeler=LabelerConfig(replay=transcript),
    )
    out = run_pipeline(config)
    ids = lineage_ids(history)

    results = [json.loads(l) for l in (out / "intent.jsonl").read_text(encoding="utf-8").splitlines()]
    statuses = {r["pair_id"]: r["status"] for r in results}
    assert statuses[f"{ids['a']}#2-3"] == "ok"
    assert statuses[f"{ids['b']}#0-1"] == "labeler_failure"

    rows = {r["lineage_id"]: r for r in read_csv(out / "trajectory_lineages.csv")}
    assert rows[ids["a"]]["alternation"] == "Oscillating"
    assert rows[ids["a"]]["tau"] == "2"
    assert rows[ids["b"]]["cohort"] == "IE-only"
    assert rows[ids["c"]]["cohort"] == "Singleton"
    assert ids["e"] not in rows


def test_runs_are_deterministic(history, transcript, tmp_path):
    outputs = []
    for name in ("first", "second"):
        config = RunConfig(
            repos=[RepoSpec(str(history.path))],
            out=str(tmp_path / name),
            labeler=LabelerConfig(replay=transcript, workers=3),
        )
        outputs.append(run_pipeline(config))

    first, second = outputs
    names = sorted(p.relative_to(first).as_posix() for p in first.rglob("*") if p.is_file())
    assert names == sorted(p.relative_to(second).as_posix() for p in second.rglob("*") if p.is_file())

    # config.yaml names the output directory, and the manifest hashes it
    for name in names:
        if name in ("config.yaml", "manifest.json"):
            continue
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_dump_graphs(history, tmp_path):
    config = RunConfig(
        repos=[RepoSpec(str(history.path))],
        out=str(tmp_path / "out"),
        skip_intent=True,
        dump_graphs=True,
    )
    out = run_pipeline(config)

    graphs = sorted((out / "graphs").rglob("*.pgir"))
    assert len(graphs) == 10
    last = next(p for p in graphs if p.parent.name.startswith("rules_a.spl") and p.name == "0003.pgir")
    assert parse_canonical(last.read_text(encoding="utf-8")).structure_key == graph_of("a=1 b=3").structure_key


def test_multiple_repositories(history, rule_repo_factory, tmp_path):
    other = rule_repo_factory("other")
    other.commit(0, write={"z.spl": "z=1"})

    config = RunConfig(
        repos=[RepoSpec(str(history.path), name="main"), RepoSpec(str(other.path))],
        out=str(tmp_path / "out"),
        skip_intent=True,
    )
    out = run_pipeline(config)

    ids = [l.lineage_id for l in read_lineages(out / "lineages.jsonl")]
    assert len(ids) == 5
    assert sum(1 for i in ids if i.startswith("main:rules/")) == 4
    assert sum(1 for i in ids if i.startswith("other:z.spl@")) == 1


def test_rerun_replaces_output(history, tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    (out / "stale.txt").write_text("old", encoding="utf-8")

    config = RunConfig(repos=[RepoSpec(str(history.path))], out=str(out), skip_intent=True)
    run_pipeline(config)
    assert not (out / "stale.txt").exists()
    assert (out / "manifest.json").exists()


def test_failure_writes_error(tmp_path):
    config = RunConfig(repos=[RepoSpec(str(tmp_path / "missing"))], out=str(tmp_path / "out"))

    with pytest.raises(RepositoryError):
        run_pipeline(config)

    error = json.loads((tmp_path / "out" / "error.json").read_text(encoding="utf-8"))
    assert error["error"] == "RepositoryError"
    assert sorted(p.name for p in tmp_path.iterdir()) == ["out"]


def test_failure_replaces_previous_run(history, tmp_path):
    out = tmp_path / "out"
    run_pipeline(RunConfig(repos=[RepoSpec(str(history.path))], out=str(out), skip_intent=True))
    assert (out / "manifest.json").exists()

    with pytest.raises(RepositoryError):
        run_pipeline(RunConfig(repos=[RepoSpec(str(tmp_path / "missing"))], out=str(out)))
    assert sorted(p.name for p in out.iterdir()) == ["error.json"]


def test_scan_warnings(rule_repo, tmp_path):
    rule_repo.commit(0, write={"a.spl": "a=1 b=2"})
    bad = rule_repo.commit(1, write={"b.spl": b"a=1 \xff\xfe"})

    config = RunConfig(repos=[RepoSpec(str(rule_repo.path))], out=str(tmp_path / "out"), skip_intent=True)
    out = run_pipeline(config)

    lines = (out / "scan_warnings.jsonl").read_text(encoding="utf-8").splitlines()
    assert [json.loads(line) for line in lines] == [
        {"path": "b.spl", "commit": bad, "reason": "not valid UTF-8: invalid start byte at byte 4", "repo": "repo"}
    ]
    assert len(read_lineages(out / "lineages.jsonl")) == 1


def test_no_repositories(tmp_path):
    with pytest.raises(ValueError):
        run_pipeline(RunConfig(out=str(tmp_path / "out")))
    assert (tmp_path / "out" / "error.json").exists()


def test_corpus_reports(rule_repo_factory, tmp_path):
    repo = rule_repo_factory("corpus")
    first = repo.commit(
        0,
        write={
            "r1.spl": "a=1 b=2",
            "r2.spl": "x=1 OR y=2",
            "r3.spl": "p=1 q=2 r=3 s=4",
            "r4.spl": "k=1",
            "m1.spl": "m=1 n=2",
            "m2.spl": "o=3 u=4",
        },
    )
    repo.commit(20, write={"r1.spl": "a=1 b=2 c=3"})
    repo.commit(21, "revert", write={"r1.spl": "a=1 b=2"})
    repo.commit(300, write={"r2.spl": "x=1 OR y=2 OR z=3"})
    split = repo.commit(
        350, "split", write={"r3a.spl": "p=1 q=2 r=3 s=4 t=5", "r3b.spl": "p=1 q=2 r=3"}, delete=["r3.spl"]
    )
    repo.commit(500, "merge", write={"m.spl": "m=1 n=2 o=3"}, delete=["m1.spl", "m2.spl"])
    repo.commit(900, write={"r2.spl": "x=1 OR y=2 OR z=3 OR w=4"})
    repo.commit(1200, write={"r3a.spl": "p=1 q=2 r=3 s=4 t=6"})

    config = RunConfig(repos=[RepoSpec(str(repo.path))], out=str(tmp_path / "out"), skip_intent=True)
    out = run_pipeline(config)

    def lid(path: str, commit: str = first) -> str:
        return f"{path}@{commit[:12]}"

    classes = {r["lineage_id"]: r for r in read_csv(out / "lineage_classes.csv")}
    assert set(classes) == {
        lid("r1.spl"),
        lid("r2.spl"),
        lid("r3.spl"),
        lid("r4.spl"),
        lid("m1.spl"),
        lid("m2.spl"),
        lid("r3b.spl", split),
    }
    assert {k: v["archetype"] for k, v in classes.items()} == {
        lid("r1.spl"): "Creation-only",
        lid("r2.spl"): "Mid + Late",
        lid("r3.spl"): "Mid + Late",
        lid("r4.spl"): "Never edited",
        lid("m1.spl"): "Mid-only",
        lid("m2.spl"): "ineligible",
        lid("r3b.spl", split): "ineligible",
    }

    archetypes = {r["archetype"]: int(r["rules"]) for r in read_csv(out / "archetypes.csv")}
    assert sum(archetypes.values()) == 5
    assert archetypes["Mid + Late"] == 2
    assert archetypes["Late-only"] == 0

    patterns = {(r["pattern"], r["mixing"]): int(r["rules"]) for r in read_csv(out / "patterns.csv")}
    assert patterns[("expand-only", "")] == 3
    assert patterns[("mixed", "inter_only")] == 1
    assert sum(patterns.values()) == 4

    aba = read_csv(out / "aba.csv")
    assert [(r["lineage_id"], r["v_i"], r["v_i1"], r["v_i2"], r["restore_hours"]) for r in aba] == [
        (lid("r1.spl"), "0", "1", "2", "24.0000")
    ]
