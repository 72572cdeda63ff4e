"""3D-prior-guided diffusion for blind face restoration, at desk scale."""

__version__ = "0.1.0"
