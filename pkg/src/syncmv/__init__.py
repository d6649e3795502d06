"""Synchronized multiview diffusion on procedurally rendered voxel objects.

A self-contained desk-scale stack: a tape-based tensor engine, ring-camera
geometry, the joint multiview diffusion process with DDPM/DDIM samplers and
an analytic Gaussian verification oracle, a volume-conditioned UNet noise
predictor, a voxel-object dataset renderer, a deterministic trainer, and a
CLI tying them together.
"""

__version__ = "0.1.0"
