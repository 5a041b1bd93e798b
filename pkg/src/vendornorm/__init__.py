"""Unpaired bidirectional vendor normalization for 2D grayscale images.

CycleGAN generators/discriminators with a selectable PatchGAN field of view,
an optional MINE mutual-information term, and a synthetic phantom harness.
"""

__version__ = "0.1.0"
