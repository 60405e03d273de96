__author__ = "Nikolas Dahn"
__version__ = "0.1.0"

from .spl import SplParseError, extract_detection
from .graph import PredicateGraph, canonicalize, serialize, parse_canonical
from .align import AlignParams, Alignment, align
from .cost import CostWeights, EditScript, edit_script, predicate_distance
from .structops import StructuralOpSet, compare, label_step
from .ingest import Lineage, mine_repository
from .analytics import CorpusAnalysis, analyze_lineages
from . import intent
from . import pipeline
