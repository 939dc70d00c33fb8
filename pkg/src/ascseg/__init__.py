"""Appearance and structure consistency for unsupervised domain adaptation
of volumetric segmentation, at desk scale on synthetic phantoms."""

__version__ = "0.1.0"
