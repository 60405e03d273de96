from typing import Iterable
from dataclasses import dataclass, field
from collections import Counter
from pathlib import Path
import csv
import numpy as np

from pgir.enums import BoolOp, StructOp
from pgir.graph import PredicateGraph
from pgir.align import Alignment, AlignParams, align
from pgir.cost import CostWeights, EditScript, PredUpdate, edit_script


@dataclass
class StructuralOpSet:
    """Structural operation labels of one revision step."""

    counts: Counter = field(default_factory=Counter)
    flips: list[tuple[int, int]] = field(default_factory=list)
    lineage: str = None
    version_pair: tuple[int, int] = None

    @property
    def ops(self) -> set[StructOp]:
        return {op for op, n in self.counts.items() if n > 0}

    @property
    def structural(self) -> set[StructOp]:
        return self.ops - {StructOp.VAL_UPDATE}

    @property
    def is_multi_label(self) -> bool:
        return len(self.structural) >= 2

    @property
    def is_value_only(self) -> bool:
        return not self.structural and StructOp.VAL_UPDATE in self.ops

    def mirrored(self) -> "StructuralOpSet":
        counts = Counter({op.mirrored: n for op, n in self.counts.items()})
        return StructuralOpSet(counts, [(b, a) for a, b in self.flips], self.lineage)

    def to_dict(self) -> dict:
        return {
            "ops": sorted(str(op) for op in self.ops),
            "counts": {str(op): n for op, n in sorted(self.counts.items()) if n > 0},
            "flips": [list(f) for f in self.flips],
        }


def detect_flip(
    alignment: Alignment,
    tree_a: PredicateGraph,
    tree_b: PredicateGraph,
    theta_flip: float = 0.5,
) -> list[tuple[int, int]]:
    """Pair unmatched opposite-label scopes that keep most of their matched leaves.

    The overlap of two scopes is the number of matched leaves under the A scope
    whose image lies under the B scope. A pair qualifies if the overlap reaches
    ``theta_flip`` of the smaller of the two matched-leaf sets. Pairs are taken
    greedily by decreasing overlap, each scope joining at most one flip.
    """
    if not 0.0 < theta_flip <= 1.0:
        raise ValueError(f"theta_flip must be in (0, 1], got {theta_flip}")

    ops_a = [o for o in tree_a.operators() if o not in alignment.pairs]
    ops_b = [o for o in tree_b.operators() if o not in alignment.reverse]

    images_a = {
        o: {alignment.pairs[p] for p in tree_a.descendant_leaves(o) if p in alignment.pairs}
        for o in ops_a
    }
    matched_b = {
        o: {q for q in tree_b.descendant_leaves(o) if q in alignment.reverse} for o in ops_b
    }

    candidates = []
    for oa in ops_a:
        for ob in ops_b:
            if tree_a.label(oa) == tree_b.label(ob):
                continue

            smaller = min(len(images_a[oa]), len(matched_b[ob]))
            if smaller == 0:
                continue

            overlap = len(images_a[oa] & matched_b[ob])
            ratio = overlap / smaller
            if overlap > 0 and ratio >= theta_flip:
                candidates.append((-overlap, -ratio, oa, ob))

    flips = []
    used_a, used_b = set(), set()
    for _, _, oa, ob in sorted(candidates):
        if oa in used_a or ob in used_b:
            continue
        used_a.add(oa)
        used_b.add(ob)
        flips.append((oa, ob))

    return flips


def _scope_op(label: BoolOp, grow: bool) -> StructOp:
    if label == BoolOp.AND:
        return StructOp.AND_ADD if grow else StructOp.AND_DEL
    return StructOp.OR_ADD if grow else StructOp.OR_DEL


def _growth(tree: PredicateGraph, present: set[int], grow: bool, counts: Counter) -> None:
    # Unmatched nodes hanging directly off a present scope get labeled; anything
    # deeper belongs to the enclosing branch
    root = tree.root
    branch_op = StructOp.BRANCH_ADD if grow else StructOp.BRANCH_DEL

    if root not in present:
        if tree.is_leaf(root):
            counts[_scope_op(BoolOp.AND, grow)] += 1
            return

        # A new root wrapping the old rule grows the rule at its top level
        scopes = present | {root}
        leaf_children = [c for c in tree.children(root) if tree.is_leaf(c) and c not in present]
        if not leaf_children:
            counts[_scope_op(tree.label(root), grow)] += 1
    else:
        scopes = present

    for n in tree:
        if n in present or n == root:
            continue

        parent = tree.parent(n)
        if parent not in scopes:
            continue

        if tree.is_leaf(n):
            counts[_scope_op(tree.label(parent), grow)] += 1
        else:
            counts[branch_op] += 1


def _nearest_present(tree: PredicateGraph, nid: int, present: Iterable[int]) -> int | None:
    for anc in tree.path_to_root(nid):
        if anc in present:
            return anc
    return None


def label_step(
    alignment: Alignment,
    script: EditScript,
    tree_a: PredicateGraph,
    tree_b: PredicateGraph,
    theta_flip: float = 0.5,
) -> StructuralOpSet:
    """Aggregate the edits of one step into structural operation labels.

    Parameters
    ----------
    alignment : Alignment
        Alignment of the step.
    script : EditScript
        Edit script derived from ``alignment``.
    tree_a : PredicateGraph
        Older version.
    tree_b : PredicateGraph
        Newer version.
    theta_flip : float
        Overlap threshold of the flip detector.

    Returns
    -------
    StructuralOpSet
        Label counts plus the detected flip pairs.
    """
    flips = detect_flip(alignment, tree_a, tree_b, theta_flip)
    counts = Counter()

    extended = dict(alignment.pairs)
    extended.update(flips)
    extended_rev = {b: a for a, b in extended.items()}

    counts[StructOp.FLIP] += len(flips)
    counts[StructOp.VAL_UPDATE] += len(script.of_type(PredUpdate))

    _growth(tree_b, set(extended_rev), True, counts)
    _growth(tree_a, set(extended), False, counts)

    for a, b in alignment.pairs.items():
        if not tree_a.is_leaf(a):
            continue

        anc_a = _nearest_present(tree_a, a, extended)
        anc_b = _nearest_present(tree_b, b, extended_rev)
        image = extended.get(anc_a) if anc_a is not None else None
        if image != anc_b:
            counts[StructOp.MOVE] += 1

    return StructuralOpSet(+counts, flips)


@dataclass
class StepComparison:
    alignment: Alignment
    script: EditScript
    ops: StructuralOpSet

    @property
    def d_pred(self) -> float:
        return self.script.total


def compare(
    tree_a: PredicateGraph,
    tree_b: PredicateGraph,
    params: AlignParams = None,
    weights: CostWeights = None,
    theta_flip: float = 0.5,
) -> StepComparison:
    """Align two versions, derive their edit script and label the step."""
    alignment = align(tree_a, tree_b, params)
    flips = detect_flip(alignment, tree_a, tree_b, theta_flip)
    script = edit_script(alignment, tree_a, tree_b, weights, flips)
    ops = label_step(alignment, script, tree_a, tree_b, theta_flip)
    return StepComparison(alignment, script, ops)


@dataclass
class CooccurrenceTable:
    labels: list[StructOp]
    matrix: np.ndarray
    counts: np.ndarray

    def __getitem__(self, key: tuple[StructOp, StructOp]) -> float:
        row, col = key
        return float(self.matrix[self.labels.index(row), self.labels.index(col)])

    @property
    def empty(self) -> bool:
        return int(self.counts.sum()) == 0

    def to_csv(self, path: Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["op"] + [str(op) for op in self.labels])
            for i, op in enumerate(self.labels):
                writer.writerow([str(op)] + [f"{v:.4f}" for v in self.matrix[i]])
            writer.writerow(["n"] + [int(n) for n in self.counts])


def cooccurrence_matrix(op_sets: Iterable[StructuralOpSet | Iterable[StructOp]]) -> CooccurrenceTable:
    """P(column op | row op) over steps carrying at least two structural labels."""
    labels = StructOp.structural()
    index = {op: i for i, op in enumerate(labels)}
    joint = np.zeros((len(labels), len(labels)), dtype=np.int64)

    for step in op_sets:
        ops = step.structural if isinstance(step, StructuralOpSet) else set(step) - {StructOp.VAL_UPDATE}
        if len(ops) < 2:
            continue

        idx = [index[StructOp(op)] for op in ops]
        for i in idx:
            for j in idx:
                joint[i, j] += 1

    counts = np.diag(joint).copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        matrix = np.where(counts[:, None] > 0, joint / np.maximum(counts[:, None], 1), 0.0)

    return CooccurrenceTable(labels, matrix, counts)
