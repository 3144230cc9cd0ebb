"""Unsupervised domain adaptation for single-view implicit occupancy models.

A small pixel-aligned occupancy network is pretrained on a labeled synthetic
shape family and adapted to an unlabeled family with different topology using
multi-level feature alignment, source supervision, neighbour-aggregated
pseudo-labels and a mutual-information diversity term. Reconstruction goes
through occupancy-grid sampling, marching cubes and mesh metrics (CD / P2S).
"""

__version__ = "0.1.0"
