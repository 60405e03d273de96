from typing import Iterator, Mapping
from dataclasses import dataclass, replace
from functools import cache
from decimal import Decimal, InvalidOperation
import json
import re
import networkx as nx
from lark import Lark, Transformer
from lark.exceptions import LarkError

from pgir.enums import BoolOp, Comparator, Polarity, ValueKind
from pgir.spl import (
    AtomicPredicate,
    ValuePayload,
    Expr,
    PredExpr,
    AndExpr,
    OrExpr,
    NotExpr,
    quote,
    unquote,
    is_numeric_literal,
)
from pgir.util import format_hierarchy


FORMAT_VERSION = "1"

_plain_field_re = re.compile(r"[\w.:{}@\-]+")


class CanonicalFormatError(ValueError):
    pass


def _normalize_number(literal: str) -> str:
    text = unquote(literal).strip()
    try:
        number = Decimal(text)
    except InvalidOperation as e:
        raise ValueError(f"Not a number: {literal}") from e

    # Exact decimal arithmetic, large integers must not collapse
    if number == number.to_integral_value():
        return str(int(number))
    return format(number.normalize(), "f")


def value_normalize(payload: ValuePayload) -> str:
    """Normalized text of a value payload.

    Quoted literals are unquoted and unescaped, whitespace runs collapse to a
    single space and the result is trimmed. Numbers are rewritten exactly:
    integers without leading zeros, decimals without trailing zeros. List
    members are normalized individually, deduplicated and sorted.
    """
    if payload.kind == ValueKind.LIST:
        members = _canonical_members(payload.members)
        return "[" + ", ".join(_scalar_text(m) for m in members) + "]"

    if payload.kind == ValueKind.NUMBER:
        return _normalize_number(payload.text)

    if payload.kind == ValueKind.REGEX:
        return unquote(payload.text).strip()

    return re.sub(r"\s+", " ", unquote(payload.text)).strip()


def _scalar_text(payload: ValuePayload) -> str:
    return f"{payload.kind}({quote(value_normalize(payload))})"


def canonical_payload(payload: ValuePayload) -> ValuePayload:
    """Canonical form of a payload.

    A quoted string holding a plain number becomes a NUMBER, so ``4688`` and
    ``"4688"`` are the same value.
    """
    if payload.kind == ValueKind.LIST:
        return ValuePayload(ValueKind.LIST, "", _canonical_members(payload.members))

    if payload.kind == ValueKind.STRING and is_numeric_literal(unquote(payload.text).strip()):
        payload = ValuePayload(ValueKind.NUMBER, unquote(payload.text).strip())

    norm = value_normalize(payload)
    if payload.kind == ValueKind.NUMBER:
        return ValuePayload(ValueKind.NUMBER, norm)

    return ValuePayload(payload.kind, quote(norm))


def _canonical_members(members: tuple[ValuePayload, ...]) -> tuple[ValuePayload, ...]:
    unique = {}
    for m in members:
        cm = canonical_payload(m)
        unique.setdefault((value_normalize(cm), cm.kind), cm)

    return tuple(unique[k] for k in sorted(unique))


def canonical_field(field: str) -> str:
    return re.sub(r"\s+", " ", field).strip().lower()


def canonical_predicate(pred: AtomicPredicate) -> AtomicPredicate:
    return AtomicPredicate(
        canonical_field(pred.field), pred.comparator, canonical_payload(pred.value)
    )


@dataclass(frozen=True)
class Leaf:
    predicate: AtomicPredicate
    polarity: Polarity = Polarity.POS

    @property
    def norm_value(self) -> str:
        return value_normalize(self.predicate.value)

    def __str__(self) -> str:
        neg = "¬" if self.polarity == Polarity.NEG else ""
        return f"{neg}{_leaf_label(self.predicate)}"


@dataclass(frozen=True)
class Operator:
    label: BoolOp
    children: tuple[int, ...] = ()

    def __str__(self) -> str:
        return str(self.label)


Node = Leaf | Operator


def _leaf_label(pred: AtomicPredicate) -> str:
    return f"{pred.field} {pred.comparator} {value_normalize(pred.value)}"


@dataclass(frozen=True)
class GraphMeta:
    rule: str = None
    repo: str = None
    version: str = None
    commit: str = None


class _Sub:
    """Canonical subtree under construction."""

    __slots__ = ("leaf", "label", "children", "compact", "key")

    def __init__(self, leaf: Leaf = None, label: BoolOp = None, children: list["_Sub"] = None):
        self.leaf = leaf
        self.label = label
        self.children = children or []

        if leaf is not None:
            p = leaf.predicate
            norm = value_normalize(p.value)
            self.compact = json.dumps(
                [p.field, str(p.comparator), str(p.value.kind), norm, str(leaf.polarity)],
                ensure_ascii=False,
            )
            self.key = (0, p.field, str(p.comparator), norm, str(leaf.polarity), self.compact)
        else:
            self.compact = f"{label}(" + ",".join(c.compact for c in self.children) + ")"
            self.key = (1, str(label), "", "", "", self.compact)

    @property
    def is_leaf(self) -> bool:
        return self.leaf is not None


def _canon(expr: Expr, negated: bool) -> _Sub:
    if isinstance(expr, PredExpr):
        polarity = Polarity.NEG if negated else Polarity.POS
        return _Sub(leaf=Leaf(canonical_predicate(expr.predicate), polarity))

    if isinstance(expr, NotExpr):
        return _canon(expr.child, not negated)

    if isinstance(expr, AndExpr):
        label = BoolOp.AND
    elif isinstance(expr, OrExpr):
        label = BoolOp.OR
    else:
        raise ValueError(f"Unexpected expression {expr!r}")

    # De Morgan
    if negated:
        label = label.opposite

    flat: list[_Sub] = []
    for child in expr.operands:
        sub = _canon(child, negated)
        if not sub.is_leaf and sub.label == label:
            flat.extend(sub.children)
        else:
            flat.append(sub)

    unique = {}
    for sub in flat:
        unique.setdefault(sub.compact, sub)

    children = sorted(unique.values(), key=lambda s: s.key)
    if len(children) == 1:
        return children[0]

    return _Sub(label=label, children=children)


def canonicalize(expr: "Expr | PredicateGraph", meta: GraphMeta = None) -> "PredicateGraph":
    """Build the canonical predicate graph of a raw expression.

    Negations are pushed down to leaf polarity, nested same-label scopes are
    flattened, duplicate children removed and children sorted by the canonical
    sort key. Calling it on a canonical graph returns an equal graph.
    """
    if isinstance(expr, PredicateGraph):
        meta = meta or expr.meta
        expr = expr.to_expr()

    return PredicateGraph._from_sub(_canon(expr, False), meta)


class PredicateGraph:
    """Immutable canonical predicate tree.

    Node ids are assigned in preorder of the canonical child order, so the root
    is always 0.
    """

    def __init__(self, nodes: dict[int, Node], root: int = 0, meta: GraphMeta = None):
        self.nodes = dict(nodes)
        self.root = root
        self.meta = meta or GraphMeta()

        self.tree = nx.DiGraph()
        self.tree.add_node(root)
        for nid, node in self.nodes.items():
            self.tree.add_node(nid)
            if isinstance(node, Operator):
                for child in node.children:
                    self.tree.add_edge(nid, child)

        self._parent = {c: p for p, c in self.tree.edges}
        self._ancestors = {n: frozenset(nx.ancestors(self.tree, n)) for n in self.tree}
        self._preorder = self._ordered_preorder()

        self._height = {}
        self._compact = {}
        for nid in reversed(self._preorder):
            node = self.nodes[nid]
            if isinstance(node, Leaf):
                self._height[nid] = 0
                self._compact[nid] = _Sub(leaf=node).compact
            else:
                self._height[nid] = 1 + max(self._height[c] for c in node.children)
                self._compact[nid] = (
                    f"{node.label}(" + ",".join(self._compact[c] for c in node.children) + ")"
                )

        self._leaf_desc = {}
        for nid in reversed(self._preorder):
            node = self.nodes[nid]
            if isinstance(node, Leaf):
                self._leaf_desc[nid] = (nid,)
            else:
                self._leaf_desc[nid] = tuple(
                    leaf for c in node.children for leaf in self._leaf_desc[c]
                )

    @classmethod
    def _from_sub(cls, sub: _Sub, meta: GraphMeta = None) -> "PredicateGraph":
        nodes: dict[int, Node] = {}

        def build(s: _Sub) -> int:
            nid = len(nodes)
            nodes[nid] = None
            if s.is_leaf:
                nodes[nid] = s.leaf
            else:
                children = tuple(build(c) for c in s.children)
                nodes[nid] = Operator(s.label, children)
            return nid

        build(sub)
        return cls(nodes, 0, meta)

    def _ordered_preorder(self) -> list[int]:
        order = []
        stack = [self.root]
        while stack:
            nid = stack.pop()
            order.append(nid)
            node = self.nodes[nid]
            if isinstance(node, Operator):
                stack.extend(reversed(node.children))
        return order

    # Structure ---------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, nid: int) -> Node:
        return self.nodes[nid]

    def __iter__(self) -> Iterator[int]:
        return iter(self._preorder)

    def is_leaf(self, nid: int) -> bool:
        return isinstance(self.nodes[nid], Leaf)

    def label(self, nid: int) -> BoolOp | None:
        node = self.nodes[nid]
        return node.label if isinstance(node, Operator) else None

    def children(self, nid: int) -> tuple[int, ...]:
        node = self.nodes[nid]
        return node.children if isinstance(node, Operator) else ()

    def parent(self, nid: int) -> int | None:
        return self._parent.get(nid)

    def leaves(self) -> list[int]:
        return [n for n in self._preorder if self.is_leaf(n)]

    def operators(self) -> list[int]:
        return [n for n in self._preorder if not self.is_leaf(n)]

    def height(self, nid: int) -> int:
        return self._height[nid]

    def ancestors(self, nid: int) -> frozenset[int]:
        """Proper ancestors of a node."""
        return self._ancestors[nid]

    def is_ancestor(self, anc: int, nid: int) -> bool:
        """True if ``anc`` is a proper ancestor of ``nid``."""
        return anc in self._ancestors[nid]

    def path_to_root(self, nid: int) -> Iterator[int]:
        """Proper ancestors, nearest first."""
        p = self._parent.get(nid)
        while p is not None:
            yield p
            p = self._parent.get(p)

    def descendant_leaves(self, nid: int) -> tuple[int, ...]:
        return self._leaf_desc[nid]

    def subtree_text(self, nid: int) -> str:
        return self._compact[nid]

    @property
    def predicate_count(self) -> int:
        return len(self.leaves())

    @property
    def structure_key(self) -> str:
        return self._compact[self.root]

    def describe(self, nid: int) -> str:
        node = self.nodes[nid]
        if isinstance(node, Leaf):
            return str(node)
        return f"{node.label}[{len(node.children)}]"

    # Semantics ---------------------------------------------------------------

    def evaluate(self, assignment: Mapping[AtomicPredicate, bool], nid: int = None) -> bool:
        nid = self.root if nid is None else nid
        node = self.nodes[nid]
        if isinstance(node, Leaf):
            val = assignment[node.predicate]
            return not val if node.polarity == Polarity.NEG else val

        results = (self.evaluate(assignment, c) for c in node.children)
        return all(results) if node.label == BoolOp.AND else any(results)

    def to_expr(self, nid: int = None) -> Expr:
        nid = self.root if nid is None else nid
        node = self.nodes[nid]
        if isinstance(node, Leaf):
            expr = PredExpr(node.predicate)
            return NotExpr(expr) if node.polarity == Polarity.NEG else expr

        children = tuple(self.to_expr(c) for c in node.children)
        return AndExpr(children) if node.label == BoolOp.AND else OrExpr(children)

    def with_meta(self, **kwargs) -> "PredicateGraph":
        return PredicateGraph(self.nodes, self.root, replace(self.meta, **kwargs))

    def format_tree(self) -> str:
        if len(self.nodes) == 1:
            return str(self.nodes[self.root])
        return format_hierarchy(self.tree, lambda n: str(self.nodes[n]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PredicateGraph):
            return NotImplemented
        return self.structure_key == other.structure_key and self.meta == other.meta

    def __hash__(self) -> int:
        return hash((self.structure_key, self.meta))

    def __repr__(self) -> str:
        return f"PredicateGraph({self.structure_key})"


# Canonical text form ---------------------------------------------------------


def _format_field(field: str) -> str:
    return field if _plain_field_re.fullmatch(field) else quote(field)


def _format_value(payload: ValuePayload, indent: str) -> str:
    if payload.kind != ValueKind.LIST:
        return _scalar_text(payload)

    pad = "\n" + indent + " " * (len("PRED(") + len("value=["))
    members = _canonical_members(payload.members)
    return "[" + ("," + pad).join(_scalar_text(m) for m in members) + "]"


def _format_pred(pred: AtomicPredicate, polarity: Polarity | None, indent: str) -> list[str]:
    cont = indent + " " * len("PRED(")
    value = _format_value(pred.value, indent)
    lines = [
        f"{indent}PRED(field={_format_field(pred.field)},",
        f"{cont}operator={pred.comparator},",
    ]
    if polarity == Polarity.NEG:
        lines.append(f"{cont}value={value},")
        lines.append(f"{cont}polarity=neg)")
    else:
        lines.append(f"{cont}value={value})")
    return lines


def _header(meta: GraphMeta, count: int) -> list[str]:
    def show(x):
        return "-" if x is None else str(x)

    return [
        f"Rule: {show(meta.rule)}",
        f"Repo: {show(meta.repo)}",
        f"Version: {show(meta.version)}",
        f"Commit: {show(meta.commit)}",
        f"Predicate count: {count}",
        "",
        "Predicate graph:",
    ]


def serialize_body(graph: PredicateGraph) -> str:
    lines = []

    def emit(nid: int, depth: int):
        indent = "  " * depth
        node = graph.nodes[nid]
        if isinstance(node, Leaf):
            lines.extend(_format_pred(node.predicate, node.polarity, indent))
        else:
            lines.append(f"{indent}EXPR(op={node.label})")
            for c in node.children:
                emit(c, depth + 1)

    emit(graph.root, 0)
    return "\n".join(lines)


def serialize(graph: PredicateGraph) -> str:
    """Render a canonical graph in the indented EXPR/PRED text form with header."""
    return "\n".join(_header(graph.meta, graph.predicate_count)) + "\n" + serialize_body(graph) + "\n"


def serialize_expr(expr: Expr) -> str:
    """Render a raw (non-canonical) expression; NOT appears as EXPR(op=NOT)."""
    lines = []

    def emit(e: Expr, depth: int):
        indent = "  " * depth
        if isinstance(e, PredExpr):
            lines.extend(_format_pred(e.predicate, None, indent))
            return

        op = {AndExpr: "AND", OrExpr: "OR", NotExpr: "NOT"}[type(e)]
        lines.append(f"{indent}EXPR(op={op})")
        for c in e.operands:
            emit(c, depth + 1)

    emit(expr, 0)
    return "\n".join(lines) + "\n"


_pred_grammar = r"""
    start: "PRED(" "field=" field "," "operator=" OPERATOR "," "value=" value polarity? ")"

    polarity: "," "polarity=" POLARITY
    field: ESCAPED_STRING | NAME
    ?value: scalar
          | members
    members: "[" scalar ("," scalar)* "]"
    scalar: KIND "(" ESCAPED_STRING ")"

    KIND: "STRING" | "WILDCARD" | "NUMBER" | "REGEX"
    OPERATOR: /[A-Z_]+/
    POLARITY: "pos" | "neg"
    NAME: /[^\s,()"\[\]]+/
    ESCAPED_STRING: "\"" ( /[^"\\]/ | /\\./ )* "\""

    %import common.WS
    %ignore WS
"""


class _PredTransformer(Transformer):
    def start(self, args):
        field, op, value, *rest = args
        polarity = rest[0] if rest else Polarity.POS
        try:
            comparator = Comparator(str(op))
        except ValueError as e:
            raise CanonicalFormatError(f"unknown operator {op}") from e
        return Leaf(AtomicPredicate(field, comparator, value), polarity)

    def polarity(self, args):
        return Polarity(str(args[0]))

    def field(self, args):
        return unquote(str(args[0]))

    def members(self, args):
        return ValuePayload(ValueKind.LIST, "", tuple(args))

    def scalar(self, args):
        kind = ValueKind(str(args[0]))
        text = unquote(str(args[1]))
        if kind == ValueKind.NUMBER:
            return ValuePayload(kind, text)
        return ValuePayload(kind, quote(text))


@cache
def _get_pred_parser() -> Lark:
    return Lark(_pred_grammar, parser="earley")


def _balanced(text: str) -> bool:
    depth = 0
    in_quote = False
    escaped = False
    for ch in text:
        if in_quote:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_quote = False
        elif ch == '"':
            in_quote = True
        elif ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
    return depth == 0 and not in_quote


def parse_canonical(text: str) -> PredicateGraph:
    """Parse the canonical text form back into a graph.

    Raises
    ------
    CanonicalFormatError
        On malformed input; the message starts with the offending line number.
    """
    lines = text.splitlines()
    header = {}
    body_start = None

    for i, line in enumerate(lines):
        if line.strip() == "Predicate graph:":
            body_start = i + 1
            break
        if not line.strip():
            continue
        if ":" not in line:
            raise CanonicalFormatError(f"line {i + 1}: expected 'Key: value' header")
        key, value = line.split(":", 1)
        header[key.strip()] = value.strip()

    if body_start is None:
        raise CanonicalFormatError(f"line {len(lines) + 1}: missing 'Predicate graph:'")

    # (depth, line number, entry text)
    entries: list[tuple[int, int, str]] = []
    i = body_start
    while i < len(lines):
        line = lines[i]
        if not line.strip():
            i += 1
            continue

        indent = len(line) - len(line.lstrip(" "))
        if indent % 2:
            raise CanonicalFormatError(f"line {i + 1}: odd indentation")

        start_line = i + 1
        entry = line.strip()
        if entry.startswith("PRED("):
            while not _balanced(entry):
                i += 1
                if i >= len(lines):
                    raise CanonicalFormatError(f"line {start_line}: unterminated PRED")
                entry += " " + lines[i].strip()
        elif not entry.startswith("EXPR("):
            raise CanonicalFormatError(f"line {start_line}: expected EXPR or PRED")

        entries.append((indent // 2, start_line, entry))
        i += 1

    if not entries:
        raise CanonicalFormatError(f"line {len(lines) + 1}: empty predicate graph")

    pos = 0

    def build(depth: int) -> Expr:
        nonlocal pos
        d, lineno, entry = entries[pos]
        if d != depth:
            raise CanonicalFormatError(f"line {lineno}: unexpected indentation")
        pos += 1

        if entry.startswith("PRED("):
            try:
                leaf: Leaf = _PredTransformer().transform(_get_pred_parser().parse(entry))
            except (LarkError, ValueError) as e:
                raise CanonicalFormatError(f"line {lineno}: malformed PRED") from e
            expr = PredExpr(leaf.predicate)
            return NotExpr(expr) if leaf.polarity == Polarity.NEG else expr

        m = re.fullmatch(r"EXPR\(op=(AND|OR)\)", entry)
        if not m:
            raise CanonicalFormatError(f"line {lineno}: malformed EXPR")

        children = []
        while pos < len(entries) and entries[pos][0] > depth:
            children.append(build(depth + 1))

        if len(children) < 2:
            raise CanonicalFormatError(f"line {lineno}: operator needs at least two children")

        return AndExpr(tuple(children)) if m.group(1) == "AND" else OrExpr(tuple(children))

    expr = build(0)
    if pos != len(entries):
        raise CanonicalFormatError(f"line {entries[pos][1]}: trailing content after root")

    def opt(key):
        value = header.get(key)
        return None if value in (None, "-") else value

    meta = GraphMeta(opt("Rule"), opt("Repo"), opt("Version"), opt("Commit"))
    graph = canonicalize(expr, meta)

    count = header.get("Predicate count")
    if count is not None and count != str(graph.predicate_count):
        raise CanonicalFormatError(
            f"line 1: predicate count {count} does not match {graph.predicate_count} leaves"
        )

    return graph
