"""Desk-scale RGB-D depth pipeline.

Synthetic stereo rendering with SGM sensor simulation, natural-mask
token sampling, a joint RGB-D completion network with seeded training,
corruption protocols, and depth/disparity evaluation.
"""

__version__ = "0.1.0"

from . import colormap, core, dataio, degrade, masking, metrics, model, rng, sgm
