"""Evasion attacks on learning-based code vulnerability detectors.

The pipeline trains an attention surrogate, mines important features from
its SVM support vectors, turns them into dead-code snippets, searches
snippet combinations with a fuzzy genetic algorithm and measures how often
the combined snippets flip a black-box victim.
"""

from .errors import EatVulError

__version__ = "0.1.0"

__all__ = ["EatVulError", "__version__"]
