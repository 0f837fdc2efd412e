"""Multi-domain recommender simulation with residual-exchange assisted learning."""

from .objectives import FeedbackKind
from .align import AlignmentMode

__all__ = ["FeedbackKind", "AlignmentMode"]
__version__ = "0.1.0"
