"""Few-shot surface reconstruction: a meta-learned SDF decoder in convolutional feature space."""

__version__ = "0.1.0"
