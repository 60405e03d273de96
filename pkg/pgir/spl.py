from typing import Iterable, Iterator, Mapping
from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import cache
import re
from lark import Lark, Transformer, Token
from lark.exceptions import LarkError

from pgir.enums import Comparator, ValueKind, StageKind, comparator_symbols
from pgir.util import logger


spl_grammar = r"""
    ?start: or_expr

    ?or_expr: and_expr (KW_OR and_expr)*            -> or_
    ?and_expr: not_expr (KW_AND? not_expr)*         -> and_
    ?not_expr: KW_NOT not_expr                      -> not_
             | atom

    ?atom: comparison
         | membership
         | regex_call
         | bare_term
         | "(" or_expr ")"

    comparison: field COMPARATOR value
    membership: field KW_IN "(" member ("," member)* ")"           -> in_list
              | field KW_NOT KW_IN "(" member ("," member)* ")"    -> not_in_list
    regex_call: KW_MATCH "(" field "," QUOTED ")"
    bare_term: QUOTED | MACRO | WORD

    field: FIELD | QUOTED
    value: QUOTED | VALUE
    member: QUOTED | MEMBER

    QUOTED: DOUBLE_QUOTED | SINGLE_QUOTED
    DOUBLE_QUOTED: "\"" ( /[^"\\]/ | /\\./ )* "\""
    SINGLE_QUOTED: "'" ( /[^'\\]/ | /\\./ )* "'"
    MACRO: /`[^`]*`/

    KW_AND: /AND\b/
    KW_OR: /OR\b/
    KW_NOT: /NOT\b/
    KW_IN: /IN\b/
    KW_MATCH: /match(?=\s*\()/

    COMPARATOR: /!=|==|<=|>=|=|<|>/
    FIELD: /[A-Za-z_@][\w.:{}@]*/
    VALUE: /(?![=<>!])[^\s()",']+/
    MEMBER: /[^\s()",']+/
    WORD: /(?!(?:AND|OR|NOT|IN)\b)[^\s()=<>!,"'`\[\]]+/

    %import common.WS
    %ignore WS
"""


RAW_FIELD = "_raw"
MACRO_FIELD = "_macro"

FILTERING_COMMANDS = frozenset({"search", "where", "regex"})
WHERE_CLAUSE_COMMANDS = frozenset({"tstats", "datamodel"})
KNOWN_COMMANDS = frozenset(
    {
        *FILTERING_COMMANDS,
        *WHERE_CLAUSE_COMMANDS,
        "stats",
        "rename",
        "convert",
        "table",
        "fields",
        "eval",
        "transaction",
        "fillnull",
        "lookup",
        "sort",
        "head",
        "dedup",
        "inputlookup",
        "from",
    }
)

_number_re = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?")
_field_re = re.compile(r"[A-Za-z_@][\w.:{}@]*")
_command_re = re.compile(r"([A-Za-z_]\w*)")
_call_re = re.compile(r"(?<![\w.:{}@-])([A-Za-z_][\w.]*)\(")
_quoted_re = re.compile(r"\"(?:[^\"\\]|\\.)*\"|'(?:[^'\\]|\\.)*'|`[^`]*`")

# Grouping keywords and the one modeled function
_callable_words = frozenset({"AND", "OR", "NOT", "IN", "match"})


class SplParseError(ValueError):
    pass


class EmptyDetectionError(SplParseError):
    pass


def unquote(literal: str) -> str:
    """Strip surrounding quotes and resolve backslash escapes of quoted literals."""
    if len(literal) >= 2 and literal[0] == literal[-1] and literal[0] in "\"'":
        return re.sub(r"\\(.)", r"\1", literal[1:-1])
    return literal


def quote(text: str) -> str:
    escaped = text.replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def is_quoted(literal: str) -> bool:
    return len(literal) >= 2 and literal[0] == literal[-1] and literal[0] in "\"'"


def is_numeric_literal(text: str) -> bool:
    return _number_re.fullmatch(text) is not None


@dataclass(frozen=True)
class ValuePayload:
    """A predicate value as written in the rule.

    Attributes
    ----------
    kind : ValueKind
        Payload type; WILDCARD whenever the unescaped literal holds ``*`` or ``?``.
    text : str
        The literal including quotes, exactly as it appeared. Empty for lists.
    members : tuple[ValuePayload, ...]
        List members for LIST payloads.
    """

    kind: ValueKind
    text: str = ""
    members: tuple["ValuePayload", ...] = ()

    @classmethod
    def from_literal(cls, literal: str, regex: bool = False) -> "ValuePayload":
        if regex:
            return cls(ValueKind.REGEX, literal)

        if not is_quoted(literal) and is_numeric_literal(literal):
            return cls(ValueKind.NUMBER, literal)

        unescaped = unquote(literal)
        if "*" in unescaped or "?" in unescaped:
            return cls(ValueKind.WILDCARD, literal)

        return cls(ValueKind.STRING, literal)

    @classmethod
    def from_members(cls, members: Iterable["ValuePayload"]) -> "ValuePayload":
        members = tuple(members)
        if not members:
            raise SplParseError("Empty IN list")
        return cls(ValueKind.LIST, "", members)

    @property
    def is_list(self) -> bool:
        return self.kind == ValueKind.LIST

    def __str__(self) -> str:
        if self.is_list:
            return "(" + ", ".join(str(m) for m in self.members) + ")"
        return self.text


@dataclass(frozen=True)
class AtomicPredicate:
    field: str
    comparator: Comparator
    value: ValuePayload

    def __post_init__(self):
        if not self.field:
            raise SplParseError("Predicate without field")

        membership = self.comparator in (Comparator.IN, Comparator.NOT_IN)
        if membership != self.value.is_list:
            raise SplParseError(
                f"Comparator {self.comparator} does not fit a {self.value.kind} payload"
            )

    def to_spl(self) -> str:
        field = self.field
        if not _field_re.fullmatch(field):
            field = quote(field)

        if self.comparator == Comparator.CONTAINS:
            if self.field != RAW_FIELD:
                raise ValueError(f"CONTAINS on field {self.field} has no search syntax")
            return self.value.text

        if self.field == MACRO_FIELD:
            return self.value.text

        if self.comparator == Comparator.REGEX:
            return f"match({field}, {self.value.text})"

        if self.comparator == Comparator.IN:
            return f"{field} IN {self.value}"

        if self.comparator == Comparator.NOT_IN:
            return f"{field} NOT IN {self.value}"

        return f"{field}{comparator_symbols[self.comparator]}{self.value.text}"

    def __str__(self) -> str:
        return self.to_spl()


class Expr(ABC):
    @abstractmethod
    def evaluate(self, assignment: Mapping[AtomicPredicate, bool]) -> bool: ...

    @abstractmethod
    def to_spl(self) -> str: ...

    def predicates(self) -> Iterator[AtomicPredicate]:
        if isinstance(self, PredExpr):
            yield self.predicate
        else:
            for child in self.operands:
                yield from child.predicates()

    @property
    def operands(self) -> tuple["Expr", ...]:
        return ()


@dataclass(frozen=True)
class PredExpr(Expr):
    predicate: AtomicPredicate

    def evaluate(self, assignment: Mapping[AtomicPredicate, bool]) -> bool:
        return assignment[self.predicate]

    def to_spl(self) -> str:
        return self.predicate.to_spl()

    def __repr__(self):
        p = self.predicate
        return f"PRED({p.field},{p.comparator},{p.value})"


@dataclass(frozen=True)
class AndExpr(Expr):
    children: tuple[Expr, ...]

    @property
    def operands(self) -> tuple[Expr, ...]:
        return self.children

    def evaluate(self, assignment: Mapping[AtomicPredicate, bool]) -> bool:
        return all(c.evaluate(assignment) for c in self.children)

    def to_spl(self) -> str:
        return "(" + " AND ".join(c.to_spl() for c in self.children) + ")"

    def __repr__(self):
        return f"AND({', '.join(map(repr, self.children))})"


@dataclass(frozen=True)
class OrExpr(Expr):
    children: tuple[Expr, ...]

    @property
    def operands(self) -> tuple[Expr, ...]:
        return self.children

    def evaluate(self, assignment: Mapping[AtomicPredicate, bool]) -> bool:
        return any(c.evaluate(assignment) for c in self.children)

    def to_spl(self) -> str:
        return "(" + " OR ".join(c.to_spl() for c in self.children) + ")"

    def __repr__(self):
        return f"OR({', '.join(map(repr, self.children))})"


@dataclass(frozen=True)
class NotExpr(Expr):
    child: Expr

    @property
    def operands(self) -> tuple[Expr, ...]:
        return (self.child,)

    def evaluate(self, assignment: Mapping[AtomicPredicate, bool]) -> bool:
        return not self.child.evaluate(assignment)

    def to_spl(self) -> str:
        return f"NOT {self.child.to_spl()}"

    def __repr__(self):
        return f"NOT({self.child!r})"


@dataclass(frozen=True)
class Stage:
    index: int
    text: str
    kind: StageKind
    command: str = ""


class _SplTransformer(Transformer):
    def _conds(self, args):
        # drop KW_AND / KW_OR / KW_NOT tokens
        return tuple(a for a in args if isinstance(a, Expr))

    def or_(self, args):
        return OrExpr(self._conds(args))

    def and_(self, args):
        return AndExpr(self._conds(args))

    def not_(self, args):
        return NotExpr(self._conds(args)[0])

    def field(self, args):
        return unquote(str(args[0]))

    def value(self, args):
        return ValuePayload.from_literal(str(args[0]))

    def member(self, args):
        return ValuePayload.from_literal(str(args[0]))

    def comparison(self, args):
        field, cmp, value = args
        return PredExpr(AtomicPredicate(field, Comparator.from_token(str(cmp)), value))

    def _membership(self, args, comparator: Comparator):
        field = args[0]
        members = [a for a in args[1:] if isinstance(a, ValuePayload)]
        return PredExpr(
            AtomicPredicate(field, comparator, ValuePayload.from_members(members))
        )

    def in_list(self, args):
        return self._membership(args, Comparator.IN)

    def not_in_list(self, args):
        return self._membership(args, Comparator.NOT_IN)

    def regex_call(self, args):
        field = args[1]
        pattern = ValuePayload.from_literal(str(args[2]), regex=True)
        return PredExpr(AtomicPredicate(field, Comparator.REGEX, pattern))

    def bare_term(self, args):
        tok: Token = args[0]
        if tok.type == "MACRO":
            return PredExpr(
                AtomicPredicate(MACRO_FIELD, Comparator.EQ, ValuePayload.from_literal(str(tok)))
            )
        return PredExpr(
            AtomicPredicate(RAW_FIELD, Comparator.CONTAINS, ValuePayload.from_literal(str(tok)))
        )


@cache
def _get_parser() -> Lark:
    return Lark(spl_grammar, parser="earley")


def _walk(text: str) -> Iterator[tuple[int, str, bool]]:
    """Yield (position, char, is_top_level) and fail on unbalanced nesting."""
    quote_char = None
    escaped = False
    depth = []

    for i, ch in enumerate(text):
        if quote_char:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == quote_char:
                quote_char = None
            yield i, ch, False
            continue

        if ch in "\"'`":
            quote_char = ch
            yield i, ch, False
        elif ch in "([":
            yield i, ch, not depth
            depth.append(")" if ch == "(" else "]")
        elif ch in ")]":
            if not depth or depth[-1] != ch:
                raise SplParseError(f"Unbalanced '{ch}' at offset {i}")
            depth.pop()
            yield i, ch, not depth
        else:
            yield i, ch, not depth

    if quote_char:
        raise SplParseError(f"Unterminated {quote_char} quote")
    if depth:
        raise SplParseError(f"Unclosed bracket, expected '{depth[-1]}'")


def _top_level_mask(text: str) -> list[bool]:
    return [top for _, _, top in _walk(text)]


def _find_top_level(text: str, pattern: str, start: int = 0) -> re.Match | None:
    mask = _top_level_mask(text)
    for m in re.finditer(pattern, text, flags=re.IGNORECASE):
        if m.start() >= start and mask[m.start()]:
            return m
    return None


def _split_command(text: str, index: int) -> tuple[str, str]:
    """Return (command, body). The leading stage has command '' for a bare search."""
    m = _command_re.match(text)
    if not m:
        return "", text

    word = m.group(1).lower()
    rest = text[m.end():]
    if index == 0:
        follows = rest.lstrip()[:1]
        if word not in KNOWN_COMMANDS or follows in ("=", "!", "<", ">"):
            return "", text

    return word, rest.strip()


def split_stages(spl_text: str) -> list[Stage]:
    """Split an SPL pipeline on top-level pipes and classify each stage.

    Raises
    ------
    SplParseError
        If quotes, parentheses or brackets are unbalanced.
    """
    parts = []
    start = 0
    for i, ch, top in _walk(spl_text):
        if top and ch == "|":
            parts.append(spl_text[start:i])
            start = i + 1
    parts.append(spl_text[start:])

    stages = []
    for idx, part in enumerate(parts):
        text = part.strip()
        command, body = _split_command(text, idx)

        if not text:
            kind = StageKind.NON_FILTERING
        elif command == "" and idx == 0:
            kind = StageKind.FILTERING
        elif command in FILTERING_COMMANDS:
            kind = StageKind.FILTERING
        elif command in WHERE_CLAUSE_COMMANDS:
            has_where = _find_top_level(body, r"\bwhere\b") is not None
            kind = StageKind.FILTERING if has_where else StageKind.NON_FILTERING
        else:
            kind = StageKind.NON_FILTERING

        stages.append(Stage(idx, text, kind, command))

    return stages


def _where_clause(body: str) -> str:
    m = _find_top_level(body, r"\bwhere\b")
    if m is None:
        raise SplParseError("Missing where clause")

    clause_start = m.end()
    end = _find_top_level(body, r"\bby\b", clause_start)
    clause_end = end.start() if end else len(body)
    return body[clause_start:clause_end].strip()


_regex_stage_re = re.compile(
    r"""\s*(?:(?P<field>"(?:[^"\\]|\\.)*"|[^\s=!"]+)\s*(?P<op>!?=)\s*)?"""
    r"""(?P<pattern>"(?:[^"\\]|\\.)*"|\S+)\s*"""
)


def _parse_regex_stage(body: str) -> Expr:
    m = _regex_stage_re.fullmatch(body)
    if not m:
        raise SplParseError(f"Malformed regex stage: {body}")

    field = unquote(m.group("field")) if m.group("field") else RAW_FIELD
    pattern = ValuePayload.from_literal(m.group("pattern"), regex=True)
    expr = PredExpr(AtomicPredicate(field, Comparator.REGEX, pattern))
    if m.group("op") == "!=":
        return NotExpr(expr)
    return expr


def parse_expression(text: str) -> Expr:
    """Parse a search or where expression into a raw Boolean expression."""
    for i, ch, top in _walk(text):
        if top and ch == "[":
            raise SplParseError(f"Subsearch at offset {i} is not supported")

    # Same-length mask keeps offsets
    masked = _quoted_re.sub(lambda m: " " * len(m.group()), text)
    for m in _call_re.finditer(masked):
        if m.group(1) not in _callable_words:
            raise SplParseError(f"Function call {m.group(1)}() at offset {m.start()} is not supported")

    if not text.strip():
        raise SplParseError("Empty filter expression")

    try:
        tree = _get_parser().parse(text)
        return _SplTransformer().transform(tree)
    except LarkError as e:
        # Transformer errors arrive wrapped in VisitError
        cause = getattr(e, "orig_exc", None)
        if isinstance(cause, SplParseError):
            raise cause from e
        raise SplParseError(f"Filter '{text}' failed to parse") from e


def parse_filter(stage: Stage) -> Expr:
    if stage.kind != StageKind.FILTERING:
        raise ValueError(f"Stage {stage.index} ({stage.command}) is not a filtering stage")

    _, body = _split_command(stage.text, stage.index)

    if stage.command == "regex":
        return _parse_regex_stage(body)

    if stage.command in WHERE_CLAUSE_COMMANDS:
        body = _where_clause(body)

    return parse_expression(body)


def extract_detection(spl_text: str) -> Expr:
    """Conjoin all filtering stages of a pipeline into one expression.

    Raises
    ------
    EmptyDetectionError
        If the pipeline has no filtering stage.
    SplParseError
        If any filtering stage fails to parse.
    """
    stages = split_stages(spl_text)
    exprs = [parse_filter(s) for s in stages if s.kind == StageKind.FILTERING]

    if not exprs:
        raise EmptyDetectionError("No filtering stage")

    if len(exprs) == 1:
        return exprs[0]

    return AndExpr(tuple(exprs))


def extract_detections(rule_texts: Iterable[str]) -> list[Expr | SplParseError]:
    ret = []
    for text in rule_texts:
        try:
            ret.append(extract_detection(text))
        except SplParseError as e:
            logger.debug(f"Detection extraction failed: {e}")
            ret.append(e)

    return ret
