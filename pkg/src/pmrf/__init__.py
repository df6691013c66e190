"""Two-stage posterior-mean + rectified-flow pipeline for paired volumetric
image translation, with tiled Hann-fused inference and a perception-distortion
sweep harness. Desk-scale and self-contained."""

__version__ = "0.1.0"
