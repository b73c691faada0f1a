"""Search for intermediate supervision features in point-cloud part segmentation."""

__version__ = "0.1.0"
