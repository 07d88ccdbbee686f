"""Land-use/land-cover segmentation with a toy-scale FastFCN."""

__version__ = "0.1.0"
