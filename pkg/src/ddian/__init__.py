"""Domain generalization by adversarial marginal/conditional alignment and center-based discriminative features."""

__version__ = "0.1.0"
