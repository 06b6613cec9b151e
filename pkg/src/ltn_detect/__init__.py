"""Differentiable first-order logic over proposal embeddings.

Axioms are parsed into formulas, predicates are grounded as neural tensor
networks, and a grounded theory is compiled into a loss minimised by
gradient descent. :class:`LTNDetector` wraps the whole pipeline behind the
scikit-learn estimator interface.
"""

from .estimator import LTNDetector
from .logic import KnowledgeBase, parse_axioms

__all__ = ["LTNDetector", "KnowledgeBase", "parse_axioms"]
__version__ = "0.1.0"
