"""Style-ambiguity rewards for creative image generation."""

__version__ = "0.1.0"
