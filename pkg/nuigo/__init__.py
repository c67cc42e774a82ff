"""NuI-Go: retinal non-uniform illumination synthesis, removal and evaluation."""

__version__ = "0.1.0"
