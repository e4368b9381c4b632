"""Self-paced, self-consistent co-training for semi-supervised segmentation."""

__version__ = "0.1.0"
