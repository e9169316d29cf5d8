"""Self-supervised cognitive diagnosis toolkit.

Trains an attention-based graph convolutional diagnosis model on a
student-exercise-concept relation graph, with a degree-aware edge-dropout
contrastive auxiliary task, and evaluates both overall and long-tail
(bottom-half-by-interaction) prediction quality.
"""

__version__ = "0.1.0"
