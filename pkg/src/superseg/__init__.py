"""Open-vocabulary 3D point segmentation on superpoints.

Pipeline: normal-based graph-cut superpoints, a trainable multi-scale
voxel embedding field, and a merging step that assigns each superpoint a
class from relevancy scores refined by cross-superpoint affinity.
"""

__version__ = "0.1.0"
