"""Mixed-precision low-bit weight quantization and QAT on a toy conditional diffusion model."""

__version__ = "0.1.0"
