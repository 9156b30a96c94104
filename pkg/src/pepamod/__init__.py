"""Bio-PEPA models: parsing, stochastic simulation, CTMC with levels, decomposition."""

__version__ = "0.1.0"

from .model import BioPepaSystem, SpeciesInfo, SpeciesRef, check_wellformed
from .network import ReactionNetwork, derive_reactions, evaluate_rate
from .parser import parse, parse_file, serialize

__all__ = [
    "__version__",
    "BioPepaSystem",
    "SpeciesInfo",
    "SpeciesRef",
    "check_wellformed",
    "ReactionNetwork",
    "derive_reactions",
    "evaluate_rate",
    "parse",
    "parse_file",
    "serialize",
]
