"""Shape-based abnormality classification of 3D binary organ masks."""

__version__ = "0.1.0"
