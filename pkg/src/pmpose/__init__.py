"""3D human pose estimation from bed pressure-mat images."""

__version__ = "0.1.0"
