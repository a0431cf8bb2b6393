"""Speaker-verification toolkit: x-vector style embedders and a PLDA scoring back-end."""

__version__ = "0.1.0"
