from typing import Iterable
from dataclasses import dataclass, field
from collections import Counter, defaultdict
from rapidfuzz.distance import Levenshtein

from pgir.enums import CmpClass, EvidenceMode, Phase, Polarity, ValueKind
from pgir.graph import PredicateGraph, Leaf, value_normalize
from pgir.spl import ValuePayload


VALUE_WEIGHT = 0.6
SCOPE_WEIGHT = 0.3
COMPARATOR_WEIGHT = 0.1


@dataclass(frozen=True)
class AlignParams:
    """Thresholds of the four-phase alignment.

    Parameters
    ----------
    min_anchors : int
        Minimum number of evidence leaves required on each side of an operator pair.
    theta_sup : float
        Minimum support, overlap divided by the smaller evidence set.
    theta_cov : float
        Minimum coverage of each evidence set by the overlap.
    fuzzy_floor : float
        Minimum value similarity for a fuzzy leaf match.
    candidate_cap : int
        Number of fuzzy candidates kept per leaf, by descending value similarity.
    """

    min_anchors: int = 1
    theta_sup: float = 0.5
    theta_cov: float = 0.5
    fuzzy_floor: float = 0.7
    candidate_cap: int = 8

    def __post_init__(self):
        for name in ("theta_sup", "theta_cov", "fuzzy_floor"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {value}")

        if self.min_anchors < 1 or self.candidate_cap < 1:
            raise ValueError("min_anchors and candidate_cap must be at least 1")


ExactKey = tuple[str, CmpClass, str, Polarity]


def exact_key(leaf: Leaf) -> ExactKey:
    p = leaf.predicate
    return (p.field, p.comparator.cmp_class, value_normalize(p.value), leaf.polarity)


def value_similarity(a: ValuePayload, b: ValuePayload) -> float:
    """Normalized edit similarity of two values; Jaccard of member sets for lists."""
    if a.kind == ValueKind.LIST and b.kind == ValueKind.LIST:
        ma = {value_normalize(m) for m in a.members}
        mb = {value_normalize(m) for m in b.members}
        if not ma and not mb:
            return 1.0
        return len(ma & mb) / len(ma | mb)

    return Levenshtein.normalized_similarity(value_normalize(a), value_normalize(b))


@dataclass
class Alignment:
    """Partial injective, ancestry-consistent mapping between two canonical trees."""

    tree_a: PredicateGraph
    tree_b: PredicateGraph
    pairs: dict[int, int] = field(default_factory=dict)
    phases: dict[int, Phase] = field(default_factory=dict)
    anchors_a: set[int] = field(default_factory=set)
    anchors_b: set[int] = field(default_factory=set)

    def __post_init__(self):
        self.reverse = {b: a for a, b in self.pairs.items()}

    @property
    def unmatched_a(self) -> list[int]:
        return [n for n in self.tree_a if n not in self.pairs]

    @property
    def unmatched_b(self) -> list[int]:
        return [n for n in self.tree_b if n not in self.reverse]

    def pair_list(self) -> list[tuple[int, int, Phase]]:
        return [(a, self.pairs[a], self.phases[a]) for a in sorted(self.pairs)]

    def image(self, a: int) -> int | None:
        return self.pairs.get(a)

    def nearest_matched_ancestor(self, a: int) -> int | None:
        for anc in self.tree_a.path_to_root(a):
            if anc in self.pairs:
                return anc
        return None

    def consistent(self, a: int, b: int) -> bool:
        """Would adding (a, b) keep ancestor relations identical on both sides?"""
        ta, tb = self.tree_a, self.tree_b
        for k, l in self.pairs.items():
            if ta.is_ancestor(k, a) != tb.is_ancestor(l, b):
                return False
            if ta.is_ancestor(a, k) != tb.is_ancestor(b, l):
                return False
        return True

    def add(self, a: int, b: int, phase: Phase) -> bool:
        if a in self.pairs or b in self.reverse:
            return False
        if not self.consistent(a, b):
            return False

        self.pairs[a] = b
        self.reverse[b] = a
        self.phases[a] = phase
        return True

    def check(self) -> None:
        ta, tb = self.tree_a, self.tree_b
        assert len(self.pairs) == len(self.reverse), "mapping is not injective"

        items = list(self.pairs.items())
        for a, b in items:
            assert ta.is_leaf(a) == tb.is_leaf(b), f"leaf/operator mix in ({a}, {b})"
            assert ta.label(a) == tb.label(b), f"label mismatch in ({a}, {b})"

        for i, (a, b) in enumerate(items):
            for k, l in items[i + 1:]:
                assert ta.is_ancestor(k, a) == tb.is_ancestor(l, b), f"({a}, {b}) vs ({k}, {l})"
                assert ta.is_ancestor(a, k) == tb.is_ancestor(b, l), f"({a}, {b}) vs ({k}, {l})"

    def matched_leaf_fraction(self) -> float:
        leaves_a = self.tree_a.leaves()
        leaves_b = self.tree_b.leaves()
        denom = max(len(leaves_a), len(leaves_b))
        if denom == 0:
            return 0.0
        matched = sum(1 for a in leaves_a if a in self.pairs)
        return matched / denom

    def mirrored(self) -> "Alignment":
        return Alignment(
            self.tree_b,
            self.tree_a,
            dict(self.reverse),
            {self.pairs[a]: p for a, p in self.phases.items()},
            set(self.anchors_b),
            set(self.anchors_a),
        )

    def to_dict(self) -> dict:
        ta, tb = self.tree_a, self.tree_b
        return {
            "pairs": [
                {
                    "a": a,
                    "b": b,
                    "phase": str(phase),
                    "a_node": ta.describe(a),
                    "b_node": tb.describe(b),
                }
                for a, b, phase in self.pair_list()
            ],
            "unmatched_a": [{"id": n, "node": ta.describe(n)} for n in self.unmatched_a],
            "unmatched_b": [{"id": n, "node": tb.describe(n)} for n in self.unmatched_b],
        }


def _match_anchors(alignment: Alignment) -> None:
    ta, tb = alignment.tree_a, alignment.tree_b
    keys_a = {p: exact_key(ta[p]) for p in ta.leaves()}
    keys_b = {q: exact_key(tb[q]) for q in tb.leaves()}
    count_a = Counter(keys_a.values())
    count_b = Counter(keys_b.values())
    index_b = {k: q for q, k in keys_b.items()}

    for p, k in keys_a.items():
        if count_a[k] == 1 and count_b.get(k) == 1:
            q = index_b[k]
            if alignment.add(p, q, Phase.P1):
                alignment.anchors_a.add(p)
                alignment.anchors_b.add(q)


def match_operators(
    alignment: Alignment,
    evidence_mode: EvidenceMode,
    params: AlignParams,
) -> Alignment:
    """Match operators bottom-up using the leaf pairs as evidence.

    Operators of tree A are visited by increasing height. A candidate operator of
    tree B must share the label, be unused and keep the mapping ancestry-consistent.
    The best candidate maximizes support, then minimizes the height difference,
    then the canonical text of its subtree.
    """
    ta, tb = alignment.tree_a, alignment.tree_b
    phase = Phase.P2 if evidence_mode == EvidenceMode.EXACT else Phase.P2B

    if evidence_mode == EvidenceMode.EXACT:
        evidence_a, evidence_b = alignment.anchors_a, alignment.anchors_b
    else:
        evidence_a, evidence_b = alignment.pairs.keys(), alignment.reverse.keys()

    ops_a = sorted(
        (o for o in ta.operators() if o not in alignment.pairs),
        key=lambda o: (ta.height(o), o),
    )

    for o in ops_a:
        e_a = [p for p in ta.descendant_leaves(o) if p in evidence_a]
        if len(e_a) < params.min_anchors:
            continue

        best = None
        for c in tb.operators():
            if c in alignment.reverse or tb.label(c) != ta.label(o):
                continue

            e_b = [q for q in tb.descendant_leaves(c) if q in evidence_b]
            if len(e_b) < params.min_anchors:
                continue

            overlap = sum(1 for p in e_a if tb.is_ancestor(c, alignment.pairs[p]))
            support = overlap / min(len(e_a), len(e_b))
            cov_a = overlap / len(e_a)
            cov_b = overlap / len(e_b)
            if support < params.theta_sup or cov_a < params.theta_cov or cov_b < params.theta_cov:
                continue

            if not alignment.consistent(o, c):
                continue

            rank = (-support, abs(ta.height(o) - tb.height(c)), tb.subtree_text(c), c)
            if best is None or rank < best[0]:
                best = (rank, c)

        if best is not None:
            alignment.add(o, best[1], phase)

    return alignment


def _complete_duplicates(alignment: Alignment) -> None:
    ta, tb = alignment.tree_a, alignment.tree_b
    op_pairs = sorted(
        ((a, b) for a, b in alignment.pairs.items() if not ta.is_leaf(a)),
        key=lambda ab: (ta.height(ab[0]), ab[0]),
    )

    for a, b in op_pairs:
        groups_a = defaultdict(list)
        groups_b = defaultdict(list)
        for p in ta.descendant_leaves(a):
            if p not in alignment.pairs:
                groups_a[exact_key(ta[p])].append(p)
        for q in tb.descendant_leaves(b):
            if q not in alignment.reverse:
                groups_b[exact_key(tb[q])].append(q)

        for key in sorted(groups_a, key=str):
            side_a = groups_a[key]
            side_b = groups_b.get(key, [])
            # Differing multiplicities are left for the fuzzy phase
            if len(side_a) != len(side_b):
                continue
            for p, q in zip(side_a, side_b):
                alignment.add(p, q, Phase.P3)


def _scope_compat(alignment: Alignment, p: int, q: int) -> float:
    anc = alignment.nearest_matched_ancestor(p)
    if anc is None:
        return 0.0
    return 1.0 if alignment.tree_b.is_ancestor(alignment.pairs[anc], q) else 0.0


def fuzzy_best_match(
    alignment: Alignment,
    p: int,
    candidates_b: Iterable[int],
    params: AlignParams,
) -> int | None:
    """Pick the best fuzzy partner in tree B for an unmatched leaf of tree A."""
    ta, tb = alignment.tree_a, alignment.tree_b
    leaf: Leaf = ta[p]
    pred = leaf.predicate

    gated = []
    for q in candidates_b:
        other: Leaf = tb[q]
        if other.polarity != leaf.polarity:
            continue
        if other.predicate.value.kind.value_type != pred.value.kind.value_type:
            continue
        if other.predicate.comparator.cmp_class != pred.comparator.cmp_class:
            continue
        gated.append((value_similarity(pred.value, other.predicate.value), q))

    gated.sort(key=lambda sq: (-sq[0], sq[1]))
    gated = gated[: params.candidate_cap]

    same_field = [sq for sq in gated if tb[sq[1]].predicate.field == pred.field]
    cross_field = [sq for sq in gated if tb[sq[1]].predicate.field != pred.field]

    for group in (same_field, cross_field):
        best = None
        for sim, q in group:
            if sim < params.fuzzy_floor or not alignment.consistent(p, q):
                continue

            cmp_equal = 1.0 if tb[q].predicate.comparator == pred.comparator else 0.0
            score = (
                VALUE_WEIGHT * sim
                + SCOPE_WEIGHT * _scope_compat(alignment, p, q)
                + COMPARATOR_WEIGHT * cmp_equal
            )
            if best is None or (-score, q) < best:
                best = (-score, q)

        if best is not None:
            return best[1]

    return None


def _match_fuzzy(alignment: Alignment, params: AlignParams) -> None:
    ta, tb = alignment.tree_a, alignment.tree_b
    for p in ta.leaves():
        if p in alignment.pairs:
            continue

        candidates = [q for q in tb.leaves() if q not in alignment.reverse]
        q = fuzzy_best_match(alignment, p, candidates, params)
        if q is not None:
            alignment.add(p, q, Phase.P4)


def align(
    tree_a: PredicateGraph, tree_b: PredicateGraph, params: AlignParams = None
) -> Alignment:
    """Align two canonical predicate trees.

    Runs unique-key anchoring, operator matching on anchor evidence, duplicate
    completion inside matched scopes, fuzzy leaf matching and a final operator
    pass over all matched leaves. The mapping invariants are checked after every
    phase.
    """
    params = params or AlignParams()
    alignment = Alignment(tree_a, tree_b)

    _match_anchors(alignment)
    alignment.check()

    match_operators(alignment, EvidenceMode.EXACT, params)
    alignment.check()

    _complete_duplicates(alignment)
    alignment.check()

    _match_fuzzy(alignment, params)
    alignment.check()

    match_operators(alignment, EvidenceMode.ALL, params)
    alignment.check()

    return alignment
