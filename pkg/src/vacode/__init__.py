"""vacode: adaptive visual-augmented contrastive decoding."""

__version__ = "0.1.0"
