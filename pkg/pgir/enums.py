from typing import Literal, TypeAlias
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        def __str__(self) -> str:
            return str.__str__(self)

        def __format__(self, format_spec: str) -> str:
            return str.__format__(str(self), format_spec)


class Comparator(StrEnum):
    EQ = "EQ"
    NEQ = "NEQ"
    LT = "LT"
    LE = "LE"
    GT = "GT"
    GE = "GE"
    IN = "IN"
    NOT_IN = "NOT_IN"
    CONTAINS = "CONTAINS"
    REGEX = "REGEX"

    @property
    def cmp_class(self) -> "CmpClass":
        return _cmp_classes[self]

    @classmethod
    def from_token(cls, token: str) -> "Comparator":
        try:
            return _comparator_tokens[token]
        except KeyError as e:
            raise ValueError(f"Unknown comparator {token}") from e


class CmpClass(StrEnum):
    EQUALITY = "equality"
    ORDERING = "ordering"
    MEMBERSHIP = "membership"
    CONTAINMENT = "containment"
    REGEX = "regex"


_cmp_classes = {
    Comparator.EQ: CmpClass.EQUALITY,
    Comparator.NEQ: CmpClass.EQUALITY,
    Comparator.LT: CmpClass.ORDERING,
    Comparator.LE: CmpClass.ORDERING,
    Comparator.GT: CmpClass.ORDERING,
    Comparator.GE: CmpClass.ORDERING,
    Comparator.IN: CmpClass.MEMBERSHIP,
    Comparator.NOT_IN: CmpClass.MEMBERSHIP,
    Comparator.CONTAINS: CmpClass.CONTAINMENT,
    Comparator.REGEX: CmpClass.REGEX,
}

_comparator_tokens = {
    "=": Comparator.EQ,
    "==": Comparator.EQ,
    "!=": Comparator.NEQ,
    "<": Comparator.LT,
    "<=": Comparator.LE,
    ">": Comparator.GT,
    ">=": Comparator.GE,
}

comparator_symbols = {
    Comparator.EQ: "=",
    Comparator.NEQ: "!=",
    Comparator.LT: "<",
    Comparator.LE: "<=",
    Comparator.GT: ">",
    Comparator.GE: ">=",
}


class ValueKind(StrEnum):
    STRING = "STRING"
    WILDCARD = "WILDCARD"
    NUMBER = "NUMBER"
    REGEX = "REGEX"
    LIST = "LIST"

    @property
    def value_type(self) -> str:
        # Wildcard and plain strings are both text for fuzzy matching
        if self in (ValueKind.STRING, ValueKind.WILDCARD):
            return "text"
        return self.value.lower()


class BoolOp(StrEnum):
    AND = "AND"
    OR = "OR"

    @property
    def opposite(self) -> "BoolOp":
        return BoolOp.OR if self == BoolOp.AND else BoolOp.AND


class Polarity(StrEnum):
    POS = "pos"
    NEG = "neg"

    def flipped(self) -> "Polarity":
        return Polarity.NEG if self == Polarity.POS else Polarity.POS


class StageKind(StrEnum):
    FILTERING = "filtering"
    NON_FILTERING = "non_filtering"


class Phase(StrEnum):
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"
    P4 = "P4"
    P2B = "P2b"


class EvidenceMode(StrEnum):
    EXACT = "EXACT"
    ALL = "ALL"


class StructOp(StrEnum):
    AND_ADD = "and+"
    AND_DEL = "and-"
    OR_ADD = "or+"
    OR_DEL = "or-"
    BRANCH_ADD = "branch+"
    BRANCH_DEL = "branch-"
    MOVE = "move"
    FLIP = "flip"
    VAL_UPDATE = "val-update"

    @property
    def mirrored(self) -> "StructOp":
        return _mirrored.get(self, self)

    @classmethod
    def structural(cls) -> list["StructOp"]:
        return [op for op in cls if op != cls.VAL_UPDATE]


_mirrored = {
    StructOp.AND_ADD: StructOp.AND_DEL,
    StructOp.AND_DEL: StructOp.AND_ADD,
    StructOp.OR_ADD: StructOp.OR_DEL,
    StructOp.OR_DEL: StructOp.OR_ADD,
    StructOp.BRANCH_ADD: StructOp.BRANCH_DEL,
    StructOp.BRANCH_DEL: StructOp.BRANCH_ADD,
}

EXPANSION_OPS = frozenset({StructOp.AND_ADD, StructOp.OR_ADD, StructOp.BRANCH_ADD})
CONTRACTION_OPS = frozenset({StructOp.AND_DEL, StructOp.OR_DEL, StructOp.BRANCH_DEL})
REORGANIZATION_OPS = frozenset({StructOp.MOVE, StructOp.FLIP})


class Rationale(StrEnum):
    CE = "CE"
    FPR = "FPR"
    MT = "MT"
    IE = "IE"

    @classmethod
    def from_label(cls, label: str) -> "Rationale":
        return _rationale_labels[label]


_rationale_labels = {
    "coverage_expansion": Rationale.CE,
    "false_positive_reduction": Rationale.FPR,
    "mixed_tradeoff": Rationale.MT,
    "insufficient_evidence": Rationale.IE,
}


LineageStatus: TypeAlias = Literal["active", "deleted"]
MatchSetDirection: TypeAlias = Literal["broader", "narrower", "mixed", "unclear"]
RationaleLabel: TypeAlias = Literal[
    "coverage_expansion",
    "false_positive_reduction",
    "mixed_tradeoff",
    "insufficient_evidence",
]
Confidence: TypeAlias = Literal["high", "medium", "low"]
PatternName: TypeAlias = Literal[
    "value-only", "expand-only", "contract-only", "restructure-only", "mixed"
]
MixingDetail: TypeAlias = Literal["intra_only", "inter_only", "both"]
Cohort: TypeAlias = Literal["IE-only", "Singleton", "Multi-revision"]
TrajectoryClass: TypeAlias = Literal["Coupled", "CE-only", "FPR-only", "Alternating"]
AlternationKind: TypeAlias = Literal["Oscillating", "Phased"]
PairStatus: TypeAlias = Literal[
    "ok", "labeler_failure", "context_overflow", "disagreement"
]
