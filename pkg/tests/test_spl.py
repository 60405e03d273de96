import random
import pytest

from pgir.enums import Comparator, StageKind, ValueKind
from pgir.spl import (
    AndExpr,
    AtomicPredicate,
    EmptyDetectionError,
    NotExpr,
    OrExpr,
    PredExpr,
    SplParseError,
    ValuePayload,
    extract_detection,
    extract_detections,
    parse_expression,
    parse_filter,
    split_stages,
)

from conftest import fixture_text


def pred(field: str, cmp: Comparator, literal: str) -> PredExpr:
    return PredExpr(AtomicPredicate(field, cmp, ValuePayload.from_literal(literal)))


def test_auditd_stages():
    stages = split_stages(fixture_text("auditd_sudo.spl"))

    assert len(stages) == 5
    assert stages[0].kind == StageKind.FILTERING
    assert [s.command for s in stages[1:]] == ["rename", "stats", "convert", "convert"]
    assert all(s.kind == StageKind.NON_FILTERING for s in stages[1:])


def test_stage_kinds():
    stages = split_stages("a=1 | where b>2 | table a")
    assert [s.kind for s in stages] == [
        StageKind.FILTERING,
        StageKind.FILTERING,
        StageKind.NON_FILTERING,
    ]

    (single,) = split_stages("search a=1")
    assert single.kind == StageKind.FILTERING
    assert single.command == "search"


def test_tstats_where_clause():
    spl = "| tstats count from datamodel=Endpoint.Processes where Processes.process_name=cmd.exe by Processes.dest"
    stages = split_stages(spl)
    assert stages[1].kind == StageKind.FILTERING

    expr = parse_filter(stages[1])
    assert expr == pred("Processes.process_name", Comparator.EQ, "cmd.exe")

    assert split_stages("| tstats count from datamodel=Endpoint by host")[1].kind == StageKind.NON_FILTERING


def test_unknown_command_is_not_filtering():
    stages = split_stages("a=1 | mystery_command b=2")
    assert stages[1].kind == StageKind.NON_FILTERING


def test_pipes_inside_literals_do_not_split(rng):
    for _ in range(50):
        left = "".join(rng.choice("ab|c ") for _ in range(8))
        spl = f'x="{left}" | table x'
        stages = split_stages(spl)
        assert len(stages) == 2
        assert stages[0].text == f'x="{left}"'


@pytest.mark.parametrize("spl", ['a="unterminated', "(a=1 OR b=2", "a=1)"])
def test_unbalanced_input(spl):
    with pytest.raises(SplParseError):
        split_stages(spl)


def test_auditd_predicates():
    expr = extract_detection(fixture_text("auditd_sudo.spl"))

    assert isinstance(expr, AndExpr)
    sourcetype, proctitle = (c.predicate for c in expr.children)
    assert sourcetype == AtomicPredicate(
        "sourcetype", Comparator.EQ, ValuePayload(ValueKind.STRING, '"auditd"')
    )
    assert proctitle.comparator == Comparator.IN
    assert [m.kind for m in proctitle.value.members] == [ValueKind.WILDCARD, ValueKind.WILDCARD]
    assert [m.text for m in proctitle.value.members] == ['"*sudo *"', '"*su *"']


def test_not_binds_tighter_than_and():
    assert parse_expression("NOT a=1") == NotExpr(pred("a", Comparator.EQ, "1"))

    expr = parse_expression("NOT a=1 b=2")
    assert expr == AndExpr((NotExpr(pred("a", Comparator.EQ, "1")), pred("b", Comparator.EQ, "2")))


def test_parentheses_and_implicit_and():
    expr = parse_expression("(a=1 OR b=2) c=3")
    assert expr == AndExpr(
        (
            OrExpr((pred("a", Comparator.EQ, "1"), pred("b", Comparator.EQ, "2"))),
            pred("c", Comparator.EQ, "3"),
        )
    )


def test_and_binds_tighter_than_or():
    expr = parse_expression("a=1 OR b=2 c=3")
    assert isinstance(expr, OrExpr)
    assert isinstance(expr.children[1], AndExpr)


@pytest.mark.parametrize(
    "text, comparator",
    [
        ("a!=1", Comparator.NEQ),
        ("a<1", Comparator.LT),
        ("a<=1", Comparator.LE),
        ("a>1", Comparator.GT),
        ("a>=1", Comparator.GE),
        ("a==1", Comparator.EQ),
    ],
)
def test_comparators(text, comparator):
    assert parse_expression(text).predicate.comparator == comparator


def test_bare_terms_and_macros():
    expr = parse_expression('"mimikatz" `sysmon` sekurlsa')
    preds = list(expr.predicates())

    assert preds[0].field == "_raw" and preds[0].comparator == Comparator.CONTAINS
    assert preds[1].field == "_macro" and preds[1].value.text == "`sysmon`"
    assert preds[2].field == "_raw" and preds[2].value.text == "sekurlsa"


def test_not_in_list():
    expr = parse_expression('user NOT IN ("root", "admin")')
    assert expr.predicate.comparator == Comparator.NOT_IN
    assert len(expr.predicate.value.members) == 2

    expr = parse_expression('NOT user IN ("root")')
    assert isinstance(expr, NotExpr)
    assert expr.child.predicate.comparator == Comparator.IN


def test_wildcard_detection():
    assert ValuePayload.from_literal('"*cmd*"').kind == ValueKind.WILDCARD
    assert ValuePayload.from_literal('"cm?"').kind == ValueKind.WILDCARD
    assert ValuePayload.from_literal("42").kind == ValueKind.NUMBER
    assert ValuePayload.from_literal('"42"').kind == ValueKind.STRING


def test_regex_stage():
    expr = extract_detection('a=1 | regex CommandLine!="(?i)-enc"')
    assert isinstance(expr, AndExpr)
    neg = expr.children[1]
    assert isinstance(neg, NotExpr)
    assert neg.child.predicate.comparator == Comparator.REGEX


def test_multiple_filtering_stages_conjoin():
    expr = extract_detection("a=1 | where b>2")
    assert expr == AndExpr((pred("a", Comparator.EQ, "1"), pred("b", Comparator.GT, "2")))

    assert extract_detection("a=1 | stats count") == pred("a", Comparator.EQ, "1")


def test_empty_detection():
    with pytest.raises(EmptyDetectionError):
        extract_detection("| stats count")


@pytest.mark.parametrize(
    "spl",
    [
        "a=1 [search b=2]",
        "a IN ()",
        "a =",
        "a=1 OR",
        "a=1 | where isnull(x)",
        "a=1 | where isnotnull(x) AND b>2",
        'a=1 | where like(cmd, "%enc%")',
        'cidrmatch("10.0.0.0/8", src)',
        "a=now()",
    ],
)
def test_parse_failures(spl):
    with pytest.raises(SplParseError):
        extract_detection(spl)


def test_call_like_text_that_still_parses():
    expr = parse_expression('match(cmd, "enc") NOT(a=1) error (b=2 OR c=3) d="isnull(x)"')
    assert isinstance(expr, AndExpr)
    assert len(expr.children) == 5
    assert expr.children[0].predicate.comparator == Comparator.REGEX
    assert expr.children[4] == pred("d", Comparator.EQ, '"isnull(x)"')


def test_extract_detections_keeps_failures():
    results = extract_detections(["a=1", "| stats count", "b=2"])
    assert isinstance(results[0], PredExpr)
    assert isinstance(results[1], EmptyDetectionError)
    assert isinstance(results[2], PredExpr)


def _random_expr(rng: random.Random, depth: int = 0):
    if depth >= 3 or rng.random() < 0.35:
        field = rng.choice(["a", "b", "user", "CommandLine"])
        value = rng.choice(['"x y"', "1", '"*z*"', "2.5"])
        cmp = rng.choice([Comparator.EQ, Comparator.NEQ, Comparator.GE])
        return pred(field, cmp, value)

    kind = rng.choice(["and", "or", "not"])
    if kind == "not":
        return NotExpr(_random_expr(rng, depth + 1))

    children = tuple(_random_expr(rng, depth + 1) for _ in range(rng.randint(2, 3)))
    return AndExpr(children) if kind == "and" else OrExpr(children)


def test_to_spl_round_trip(rng):
    for _ in range(200):
        expr = _random_expr(rng)
        text = expr.to_spl()
        again = parse_expression(text)
        assert again.to_spl() == text
