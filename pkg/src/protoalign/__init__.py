"""Unsupervised cross-modality segmentation adaptation with conditional
adversarial alignment and category-centric prototypes, on a numpy autodiff core."""

__version__ = "0.1.0"
