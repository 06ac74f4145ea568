"""Weakly supervised cell instance segmentation from centroid annotations.

A small U-Net learns to regress cell-centroid likelihood maps. Guided
backpropagation from each detected center region yields a per-cell
contribution map; the maps are fused by winner-takes-pixel projection and
each cell is then cut out of the image with a seeded min-cut.
"""

__version__ = "0.1.0"
