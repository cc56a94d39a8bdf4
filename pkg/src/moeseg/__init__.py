"""Promptable 3D segmentation with a gated bank of expert mask decoders."""

__version__ = "0.1.0"
