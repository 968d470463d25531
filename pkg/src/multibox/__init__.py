"""Grid-prior region proposals with a matching-based objective.

The pipeline, end to end: procedural synthetic scenes (`synthdata`),
multi-scale grid priors (`priors`), a small from-scratch convolutional
proposer and post-classifier (`toynet`) trained with the bipartite-matching
objective (`matching_loss`), decoding / multi-crop inference / ensembling
(`inference`), and recall/AP measurement (`evaluation`). `cli` exposes all
of it as subcommands of one executable.
"""

from .geometry import BBox, ScoredBox, iou, iou_matrix, nms

__all__ = ["BBox", "ScoredBox", "iou", "iou_matrix", "nms"]

__version__ = "0.1.0"
