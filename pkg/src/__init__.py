"""
GGSS-R lab: gradient inversion with diffusion-guided spherical sampling.
"""

__version__ = "0.1.0"
