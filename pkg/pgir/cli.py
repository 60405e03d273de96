from typing import Any
from pathlib import Path
from collections import Counter
import argparse
import json
import logging
import sys

from pgir import __version__
from pgir.util import logger, get_dataclass_spec, parse_overrides
from pgir.spl import SplParseError, extract_detection
from pgir.graph import (
    FORMAT_VERSION,
    CanonicalFormatError,
    GraphMeta,
    PredicateGraph,
    canonicalize,
    parse_canonical,
    serialize,
    serialize_expr,
)
from pgir.align import AlignParams, align
from pgir.cost import CostWeights, edit_script
from pgir.structops import StructuralOpSet, compare, cooccurrence_matrix
from pgir.enums import StructOp
from pgir.config import LabelerConfig, RepoSpec, RunConfig, load_config
from pgir.ingest import (
    mine_repository,
    read_lineages,
    rule_body,
    write_lineages,
    write_scan_warnings,
)
from pgir.analytics import analyze_lineages, write_reports
from pgir.intent import run_intent, write_intent_reports
from pgir.pipeline import run_pipeline


EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARSE = 2


def add_dataclass_args(
    parser: argparse.ArgumentParser,
    cls: type,
    prefix: str = "",
    aliases: dict[str, list[str]] = None,
    skip: tuple[str, ...] = (),
) -> None:
    """Expose the fields of a dataclass as ``--flags``, help taken from its docstring."""
    aliases = aliases or {}
    group = parser.add_argument_group(cls.__name__)

    for name, arg in get_dataclass_spec(cls).items():
        if name in skip:
            continue

        flags = [f"--{prefix}{name.replace('_', '-')}"] + aliases.get(name, [])
        dest = f"{cls.__name__}.{name}"
        help_text = arg.doc or ""
        if arg.default is not None:
            help_text += f" (default: {arg.default})"

        if arg.type is bool:
            group.add_argument(*flags, dest=dest, action="store_true", default=None, help=help_text)
        else:
            group.add_argument(*flags, dest=dest, type=arg.type or str, default=None, help=help_text)


def dataclass_overrides(args: argparse.Namespace, cls: type) -> dict[str, Any]:
    prefix = f"{cls.__name__}."
    return {
        key[len(prefix):]: val
        for key, val in vars(args).items()
        if key.startswith(prefix) and val is not None
    }


def align_params(args: argparse.Namespace) -> AlignParams:
    return AlignParams(**dataclass_overrides(args, AlignParams))


def cost_weights(args: argparse.Namespace) -> CostWeights:
    weights = CostWeights()
    if getattr(args, "weights", None):
        weights = weights.with_overrides(parse_overrides(args.weights))
    return weights


def load_graph(path: str, convert_cmd: str = None) -> PredicateGraph:
    """Canonical graph of a rule file; ``.pgir`` files are read as canonical text."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".pgir":
        return parse_canonical(text)

    body, _ = rule_body(text, path.name, convert_cmd)
    return canonicalize(extract_detection(body), GraphMeta(rule=path.stem))


def _print_json(data: Any) -> None:
    print(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False))


# Subcommands -----------------------------------------------------------------


def cmd_parse(args: argparse.Namespace) -> int:
    text = Path(args.file).read_text(encoding="utf-8")
    body, _ = rule_body(text, Path(args.file).name, args.convert_cmd)
    print(serialize_expr(extract_detection(body)), end="")
    return EXIT_OK


def cmd_canon(args: argparse.Namespace) -> int:
    graph = load_graph(args.file, args.convert_cmd)
    if args.tree:
        print(graph.format_tree())
    else:
        print(serialize(graph), end="")
    return EXIT_OK


def cmd_align(args: argparse.Namespace) -> int:
    tree_a = load_graph(args.file_a, args.convert_cmd)
    tree_b = load_graph(args.file_b, args.convert_cmd)
    _print_json(align(tree_a, tree_b, align_params(args)).to_dict())
    return EXIT_OK


def cmd_diff(args: argparse.Namespace) -> int:
    tree_a = load_graph(args.file_a, args.convert_cmd)
    tree_b = load_graph(args.file_b, args.convert_cmd)
    alignment = align(tree_a, tree_b, align_params(args))
    script = edit_script(alignment, tree_a, tree_b, cost_weights(args))
    _print_json(
        {
            "d_pred": round(script.total, 6),
            "breakdown": script.breakdown(),
            "edits": script.to_dicts(tree_a, tree_b),
        }
    )
    return EXIT_OK


def cmd_ops(args: argparse.Namespace) -> int:
    tree_a = load_graph(args.file_a, args.convert_cmd)
    tree_b = load_graph(args.file_b, args.convert_cmd)
    comp = compare(tree_a, tree_b, align_params(args), cost_weights(args), args.theta_flip)
    reported = round(comp.script.reported_total, 6)
    _print_json({"d_pred": round(comp.d_pred, 6), "reported_cost": reported, **comp.ops.to_dict()})
    return EXIT_OK


def cmd_ops_matrix(args: argparse.Namespace) -> int:
    op_sets = []
    with open(args.steps, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            item = json.loads(line)
            if item.get("d_pred", 0) > 0:
                op_sets.append(StructuralOpSet(Counter(StructOp(op) for op in item["ops"])))

    table = cooccurrence_matrix(op_sets)
    out = args.out or "ops_matrix.csv"
    table.to_csv(out)
    logger.info(f"Wrote {out} from {len(op_sets)} predicate-changing steps")
    return EXIT_OK


def cmd_scan(args: argparse.Namespace) -> int:
    warnings = []
    lineages = mine_repository(
        args.repo, args.ref, args.filter, args.rename_threshold, args.convert_cmd, warnings
    )
    write_lineages(lineages, args.out)
    logger.info(f"Wrote {len(lineages)} lineages to {args.out}")

    warnings_out = args.warnings or Path(args.out).with_name("scan_warnings.jsonl")
    write_scan_warnings(warnings, warnings_out)
    if warnings:
        logger.warning(f"{len(warnings)} unreadable file versions listed in {warnings_out}")
    return EXIT_OK


def _analyze(args: argparse.Namespace):
    lineages = read_lineages(args.lineages, args.convert_cmd)
    return analyze_lineages(
        lineages, align_params(args), cost_weights(args), args.theta_flip, workers=args.workers
    )


def cmd_analyze(args: argparse.Namespace) -> int:
    write_reports(_analyze(args), args.out, aba_collapse_repeats=not args.aba_strict)
    return EXIT_OK


def _labeler_config(args: argparse.Namespace, base: LabelerConfig = None) -> LabelerConfig:
    values = vars(base) if base else {}
    values = {**values, **dataclass_overrides(args, LabelerConfig)}
    return LabelerConfig(**values)


def cmd_intent(args: argparse.Namespace) -> int:
    analysis = _analyze(args)
    results = run_intent(analysis, _labeler_config(args))
    write_intent_reports(analysis, results, args.out)
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config) if args.config else RunConfig()

    if args.repo:
        config.repos = [RepoSpec(path, args.ref or "HEAD", filters=args.filter or []) for path in args.repo]
    elif args.filter or args.ref:
        for repo in config.repos:
            repo.filters = args.filter or repo.filters
            repo.ref = args.ref or repo.ref

    if args.out:
        config.out = args.out
    if args.convert_cmd:
        config.convert_cmd = args.convert_cmd
    if args.skip_intent:
        config.skip_intent = True
    if args.dump_graphs:
        config.dump_graphs = True
    if args.rename_threshold is not None:
        config.rename_threshold = args.rename_threshold
    if args.theta_flip is not None:
        config.theta_flip = args.theta_flip
    if args.workers is not None:
        config.workers = args.workers
    if args.aba_strict:
        config.aba_collapse_repeats = False

    overrides = dataclass_overrides(args, AlignParams)
    if overrides:
        config.align = AlignParams(**{**vars(config.align), **overrides})
    if args.weights:
        config.weights = config.weights.with_overrides(parse_overrides(args.weights))
    config.labeler = _labeler_config(args, config.labeler)

    run_pipeline(config)
    return EXIT_OK


# Parser ----------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--convert-cmd", default=None, help="Converter for non-SPL rule bodies")


def _add_comparison(parser: argparse.ArgumentParser, flip_default: float | None = 0.5) -> None:
    add_dataclass_args(
        parser,
        AlignParams,
        aliases={"fuzzy_floor": ["--fuzzy-similarity-floor"], "candidate_cap": ["--cap"]},
    )
    parser.add_argument("--weights", default=None, help="Weight overrides as key=value[,key=value]")
    parser.add_argument("--theta-flip", type=float, default=flip_default, help="Flip overlap threshold")


def _add_analysis(parser: argparse.ArgumentParser, workers_default: int | None = 4) -> None:
    parser.add_argument(
        "--workers", type=int, default=workers_default, help="Lineages compared in parallel"
    )
    parser.add_argument(
        "--aba-strict",
        action="store_true",
        help="Only strictly consecutive versions form an A-B-A triplet",
    )


def _add_labeler(parser: argparse.ArgumentParser) -> None:
    add_dataclass_args(
        parser,
        LabelerConfig,
        prefix="llm-",
        aliases={"replay": ["--replay"], "transcript": ["--transcript"]},
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pgir",
        description="Predicate-level evolution analysis of detection rules",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"pgir {__version__} (canonical format {FORMAT_VERSION})",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="Only warnings and errors")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="Print the raw detection expression of a rule")
    p.add_argument("file")
    _add_common(p)
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("canon", help="Print the canonical predicate graph of a rule")
    p.add_argument("file")
    p.add_argument("--tree", action="store_true", help="Render as an indented tree instead")
    _add_common(p)
    p.set_defaults(func=cmd_canon)

    for name, func, help_text in (
        ("align", cmd_align, "Align two rule versions"),
        ("diff", cmd_diff, "Edit script and predicate distance of two rule versions"),
        ("ops", cmd_ops, "Structural operations between two rule versions"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("file_a")
        p.add_argument("file_b")
        _add_common(p)
        _add_comparison(p)
        p.set_defaults(func=func)

    p = sub.add_parser("ops-matrix", help="Operation co-occurrence matrix from steps.jsonl")
    p.add_argument("steps")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ops_matrix)

    p = sub.add_parser("scan", help="Mine rule lineages from a git repository")
    p.add_argument("--repo", required=True)
    p.add_argument("--ref", default="HEAD")
    p.add_argument("--filter", action="append", default=[], help="Path glob, repeatable")
    p.add_argument("--rename-threshold", type=float, default=0.6)
    p.add_argument("--out", default="lineages.jsonl")
    p.add_argument("--warnings", help="Unreadable file versions, defaults to scan_warnings.jsonl next to --out")
    _add_common(p)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("analyze", help="Lineage analytics from lineages.jsonl")
    p.add_argument("lineages")
    p.add_argument("--out", required=True)
    _add_common(p)
    _add_comparison(p)
    _add_analysis(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("intent", help="Intent labeling from lineages.jsonl")
    p.add_argument("lineages")
    p.add_argument("--out", required=True)
    _add_common(p)
    _add_comparison(p)
    _add_analysis(p)
    _add_labeler(p)
    p.set_defaults(func=cmd_intent)

    p = sub.add_parser("run", help="Full pipeline")
    p.add_argument("--config", default=None, help="YAML run configuration")
    p.add_argument("--repo", action="append", default=[])
    p.add_argument("--ref", default=None)
    p.add_argument("--filter", action="append", default=[])
    p.add_argument("--rename-threshold", type=float, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--skip-intent", action="store_true")
    p.add_argument("--dump-graphs", action="store_true")
    _add_common(p)
    _add_comparison(p, flip_default=None)
    _add_analysis(p, workers_default=None)
    _add_labeler(p)
    p.set_defaults(func=cmd_run)

    return parser


def main(argv: list[str] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.verbose:
        logger.setLevel(logging.DEBUG)
    elif args.quiet:
        logger.setLevel(logging.WARNING)

    try:
        return args.func(args)
    except (SplParseError, CanonicalFormatError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_PARSE
    except Exception as e:
        logger.error(f"{type(e).__name__}: {e}")
        logger.debug("Traceback", exc_info=True)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
