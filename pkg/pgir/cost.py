from typing import Iterable, Mapping
from dataclasses import dataclass, field, fields, replace, asdict
from collections import Counter

from pgir.graph import (
    PredicateGraph,
    Leaf,
    Operator,
    Node,
    value_normalize,
    canonicalize,
)
from pgir.align import Alignment, AlignParams, align


@dataclass(frozen=True)
class CostWeights:
    """Edit weights of the predicate distance.

    Parameters
    ----------
    pred_insert : float
        Inserting an atomic predicate.
    pred_delete : float
        Deleting an atomic predicate.
    field_update : float
        Changing the field of a matched predicate.
    operator_update : float
        Changing the comparator or the polarity of a matched predicate.
    value_update : float
        Changing the value payload of a matched predicate.
    bool_insert : float
        Inserting a boolean operator.
    bool_delete : float
        Deleting a boolean operator.
    bool_relabel : float
        Changing an operator between AND and OR. Charged for flipped scope pairs in
        ``EditScript.reported_total`` only, the distance keeps deletion plus insertion.
    update_cap : float
        Upper bound of a single predicate update, defaults to deletion plus insertion.
    """

    pred_insert: float = 1.0
    pred_delete: float = 1.0
    field_update: float = 0.2
    operator_update: float = 0.5
    value_update: float = 0.8
    bool_insert: float = 3.0
    bool_delete: float = 3.0
    bool_relabel: float = 4.5
    update_cap: float = None

    def __post_init__(self):
        if self.update_cap is None:
            object.__setattr__(self, "update_cap", self.pred_delete + self.pred_insert)

        for f in fields(self):
            value = getattr(self, f.name)
            if value <= 0:
                raise ValueError(f"Weight {f.name} must be positive, got {value}")

        largest = max(self.field_update, self.operator_update, self.value_update)
        if self.update_cap < largest:
            raise ValueError(
                f"update_cap {self.update_cap} is below a single update component ({largest})"
            )

    def scaled(self, factor: float) -> "CostWeights":
        if factor <= 0:
            raise ValueError(f"Scale factor must be positive, got {factor}")
        return CostWeights(**{k: v * factor for k, v in asdict(self).items()})

    def with_overrides(self, overrides: Mapping[str, float | str]) -> "CostWeights":
        known = {f.name for f in fields(self)}
        values = {}
        for key, value in overrides.items():
            if key not in known:
                raise ValueError(f"Unknown weight {key}")
            try:
                values[key] = float(value)
            except (TypeError, ValueError) as e:
                raise ValueError(f"Weight {key} is not a number: {value}") from e

        return replace(self, **values)


# Edit primitives -------------------------------------------------------------


@dataclass(frozen=True)
class PredInsert:
    b: int

    def cost(self, weights: CostWeights) -> float:
        return weights.pred_insert


@dataclass(frozen=True)
class PredDelete:
    a: int

    def cost(self, weights: CostWeights) -> float:
        return weights.pred_delete


@dataclass(frozen=True)
class PredUpdate:
    a: int
    b: int
    changed: frozenset[str]
    target: Leaf

    def cost(self, weights: CostWeights) -> float:
        total = 0.0
        if "field" in self.changed:
            total += weights.field_update
        # Comparator and polarity are both operator context, charged once
        if "comparator" in self.changed or "polarity" in self.changed:
            total += weights.operator_update
        if "value" in self.changed:
            total += weights.value_update
        return min(total, weights.update_cap)


@dataclass(frozen=True)
class OpInsert:
    b: int

    def cost(self, weights: CostWeights) -> float:
        return weights.bool_insert


@dataclass(frozen=True)
class OpDelete:
    a: int

    def cost(self, weights: CostWeights) -> float:
        return weights.bool_delete


@dataclass(frozen=True)
class OpRelabel:
    a: int
    b: int

    def cost(self, weights: CostWeights) -> float:
        return weights.bool_relabel


Edit = PredInsert | PredDelete | PredUpdate | OpInsert | OpDelete | OpRelabel


def leaf_changes(a: Leaf, b: Leaf) -> frozenset[str]:
    pa, pb = a.predicate, b.predicate
    changed = set()
    if pa.field != pb.field:
        changed.add("field")
    if pa.comparator != pb.comparator:
        changed.add("comparator")
    if a.polarity != b.polarity:
        changed.add("polarity")
    if pa.value.kind != pb.value.kind or value_normalize(pa.value) != value_normalize(pb.value):
        changed.add("value")
    return frozenset(changed)


@dataclass
class EditScript:
    """Edits turning tree A into tree B under a fixed alignment.

    Flip relabels are kept apart in ``relabels``. ``total`` is the distance and
    counts each flipped pair as an operator deletion plus an insertion;
    ``reported_total`` charges one relabel for the pair instead.
    """

    edits: list[Edit]
    pairs: dict[int, int]
    weights: CostWeights = field(default_factory=CostWeights)
    relabels: list[OpRelabel] = field(default_factory=list)

    @property
    def total(self) -> float:
        return float(sum(e.cost(self.weights) for e in self.edits))

    @property
    def reported_total(self) -> float:
        w = self.weights
        pair = w.bool_delete + w.bool_insert
        return self.total + sum(r.cost(w) - pair for r in self.relabels)

    def breakdown(self) -> dict[str, float]:
        ret = Counter()
        for e in self.edits:
            ret[type(e).__name__] += e.cost(self.weights)
        return {k: float(v) for k, v in sorted(ret.items())}

    def counts(self) -> dict[str, int]:
        return dict(sorted(Counter(type(e).__name__ for e in self.edits).items()))

    def of_type(self, *kinds: type) -> list[Edit]:
        return [e for e in self.edits if isinstance(e, kinds)]

    def __len__(self) -> int:
        return len(self.edits)

    def to_dicts(self, tree_a: PredicateGraph, tree_b: PredicateGraph) -> list[dict]:
        ret = []
        for e in self.edits + self.relabels:
            item = {"edit": type(e).__name__, "cost": e.cost(self.weights)}
            if hasattr(e, "a"):
                item["a"] = e.a
                item["a_node"] = tree_a.describe(e.a)
            if hasattr(e, "b"):
                item["b"] = e.b
                item["b_node"] = tree_b.describe(e.b)
            if isinstance(e, PredUpdate):
                item["changed"] = sorted(e.changed)
            if isinstance(e, OpRelabel):
                item["reported_only"] = True
            ret.append(item)
        return ret


def edit_script(
    alignment: Alignment,
    tree_a: PredicateGraph,
    tree_b: PredicateGraph,
    weights: CostWeights = None,
    flips: Iterable[tuple[int, int]] = (),
) -> EditScript:
    """Derive the edit script of an alignment.

    Parameters
    ----------
    alignment : Alignment
        Mapping produced by ``align(tree_a, tree_b)``.
    tree_a : PredicateGraph
        Source tree.
    tree_b : PredicateGraph
        Target tree.
    weights : CostWeights
        Edit weights, defaults apply when omitted.
    flips : Iterable[tuple[int, int]]
        Opposite-label scope pairs to report as relabels.

    Returns
    -------
    EditScript
        One deletion per unmatched node of A, one insertion per unmatched node of
        B and one update per matched leaf pair with differing components.
    """
    if alignment.tree_a is not tree_a or alignment.tree_b is not tree_b:
        if alignment.tree_a != tree_a or alignment.tree_b != tree_b:
            raise ValueError("Alignment was not computed over these trees")

    weights = weights or CostWeights()
    edits: list[Edit] = []

    for a in tree_a:
        if a in alignment.pairs:
            if tree_a.is_leaf(a):
                b = alignment.pairs[a]
                changed = leaf_changes(tree_a[a], tree_b[b])
                if changed:
                    edits.append(PredUpdate(a, b, changed, tree_b[b]))
        elif tree_a.is_leaf(a):
            edits.append(PredDelete(a))
        else:
            edits.append(OpDelete(a))

    for b in tree_b:
        if b in alignment.reverse:
            continue
        edits.append(PredInsert(b) if tree_b.is_leaf(b) else OpInsert(b))

    relabels = []
    for a, b in flips:
        if a in alignment.pairs or b in alignment.reverse:
            raise ValueError(f"Flip ({a}, {b}) involves matched operators")
        relabels.append(OpRelabel(a, b))

    return EditScript(edits, dict(alignment.pairs), weights, relabels)


def _apply_update(leaf: Leaf, update: PredUpdate) -> Leaf:
    pred = leaf.predicate
    target = update.target.predicate
    if "field" in update.changed:
        pred = replace(pred, field=target.field)
    if "comparator" in update.changed or "value" in update.changed:
        comparator = target.comparator if "comparator" in update.changed else pred.comparator
        value = target.value if "value" in update.changed else pred.value
        pred = replace(pred, comparator=comparator, value=value)

    polarity = update.target.polarity if "polarity" in update.changed else leaf.polarity
    return Leaf(pred, polarity)


def apply_edit_script(
    script: EditScript, tree_a: PredicateGraph, tree_b: PredicateGraph
) -> PredicateGraph:
    """Replay a script on tree A and return the canonical result.

    Matched nodes keep the content of A with the script's updates applied; nodes
    inserted by the script take their content from B and are placed under the
    image of their parent in B. Fails if the script does not account for a node.
    """
    deleted = {e.a for e in script.of_type(PredDelete, OpDelete)}
    inserted = {e.b for e in script.of_type(PredInsert, OpInsert)}
    updates = {e.a: e for e in script.of_type(PredUpdate)}
    reverse = {b: a for a, b in script.pairs.items()}

    for a in tree_a:
        if a not in script.pairs and a not in deleted:
            raise ValueError(f"Script does not account for node {a} of tree A")

    nodes: dict[int, Node] = {}

    def build(b: int) -> int:
        nid = len(nodes)
        nodes[nid] = None

        if b in reverse:
            source = tree_a[reverse[b]]
            if isinstance(source, Leaf):
                update = updates.get(reverse[b])
                nodes[nid] = _apply_update(source, update) if update else source
                return nid
            label = source.label
        elif b in inserted:
            source = tree_b[b]
            if isinstance(source, Leaf):
                nodes[nid] = source
                return nid
            label = source.label
        else:
            raise ValueError(f"Script does not account for node {b} of tree B")

        children = tuple(build(c) for c in tree_b.children(b))
        nodes[nid] = Operator(label, children)
        return nid

    build(tree_b.root)
    return canonicalize(PredicateGraph(nodes, 0, tree_b.meta))


def predicate_distance(
    tree_a: PredicateGraph,
    tree_b: PredicateGraph,
    params: AlignParams = None,
    weights: CostWeights = None,
) -> tuple[float, dict[str, float]]:
    """Weighted predicate-logic distance of two canonical trees and its breakdown by edit class."""
    alignment = align(tree_a, tree_b, params)
    script = edit_script(alignment, tree_a, tree_b, weights)
    return script.total, script.breakdown()


def is_predicate_changing(tree_a: PredicateGraph, tree_b: PredicateGraph) -> bool:
    return tree_a.structure_key != tree_b.structure_key
