from dataclasses import replace
from pathlib import Path
import json
import re
import shutil
import tempfile

from pgir.util import logger
from pgir.hash import file_digest
from pgir.config import RunConfig
from pgir.graph import FORMAT_VERSION, serialize
from pgir.ingest import (
    Lineage,
    ScanWarning,
    mine_repository,
    prefix_lineages,
    write_lineages,
    write_scan_warnings,
)
from pgir.analytics import analyze_lineages, write_reports
from pgir.labeler import LabelerClient
from pgir.intent import run_intent, write_intent_reports


def _safe_name(text: str) -> str:
    return re.sub(r"[^\w.@-]", "_", text)


def dump_graphs(lineages: list[Lineage], out_dir: Path) -> list[Path]:
    written = []
    for lineage in lineages:
        lineage_dir = out_dir / "graphs" / _safe_name(lineage.lineage_id)
        for v in lineage.parseable_versions():
            lineage_dir.mkdir(parents=True, exist_ok=True)
            path = lineage_dir / f"{v.version_index:04d}.pgir"
            path.write_text(serialize(v.graph), encoding="utf-8")
            written.append(path)
    return written


def collect_lineages(config: RunConfig, warnings: list[ScanWarning] = None) -> list[Lineage]:
    if not config.repos:
        raise ValueError("No repositories configured")

    lineages = []
    for repo in config.repos:
        skipped = []
        mined = mine_repository(
            repo.path, repo.ref, repo.filters, config.rename_threshold, config.convert_cmd, skipped
        )
        if warnings is not None:
            warnings.extend(replace(w, repo=repo.label) for w in skipped)
        if len(config.repos) > 1:
            mined = prefix_lineages(mined, repo.label)
        lineages.extend(mined)

    return sorted(lineages, key=lambda l: l.lineage_id)


def write_manifest(out_dir: Path) -> Path:
    from pgir import __version__

    artifacts = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            artifacts[path.relative_to(out_dir).as_posix()] = file_digest(path)

    manifest = {
        "pgir_version": __version__,
        "format_version": FORMAT_VERSION,
        "artifacts": artifacts,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_error(out_dir: Path, error: Exception) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "error.json"
    report = {"error": type(error).__name__, "message": str(error)}
    path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return path


def run_pipeline(config: RunConfig, client: LabelerClient = None) -> Path:
    """Mine, compare, analyze and label, then move the artifacts into the output directory.

    Everything is written to a staging directory next to the output directory
    first. On failure the staging directory is discarded and the output
    directory is replaced by one holding only ``error.json``, so artifacts of an
    earlier run never sit next to the error.
    """
    out_dir = Path(config.out).resolve()
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}-", dir=out_dir.parent))

    try:
        warnings = []
        lineages = collect_lineages(config, warnings)
        write_lineages(lineages, staging / "lineages.jsonl")
        write_scan_warnings(warnings, staging / "scan_warnings.jsonl")

        if config.dump_graphs:
            dump_graphs(lineages, staging)

        analysis = analyze_lineages(
            lineages, config.align, config.weights, config.theta_flip, workers=config.workers
        )
        write_reports(analysis, staging, config.aba_collapse_repeats)

        if not config.skip_intent:
            results = run_intent(analysis, config.labeler, client)
            write_intent_reports(analysis, results, staging)

        config.save(staging / "config.yaml")
        write_manifest(staging)
    except Exception as e:
        shutil.rmtree(staging, ignore_errors=True)
        if out_dir.exists():
            shutil.rmtree(out_dir)
        write_error(out_dir, e)
        logger.error(f"Run failed: {e}")
        raise

    if out_dir.exists():
        shutil.rmtree(out_dir)
    staging.rename(out_dir)

    logger.info(f"Artifacts written to {out_dir}")
    return out_dir
