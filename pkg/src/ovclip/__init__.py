"""Video CLIP fine-tuning with interpolated weight regularization, at desk scale."""

__version__ = "0.1.0"
