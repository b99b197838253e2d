"""SE(3)-equivariant trajectory diffusion with adapter fine-tuning under geometric controls."""

__version__ = "0.1.0"
