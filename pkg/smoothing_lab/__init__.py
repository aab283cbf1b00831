"""Fixed points of the smoothing transform in i.i.d. random environments."""

__version__ = "0.1.0"
