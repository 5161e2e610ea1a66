"""Feed-forward multi-frame pointmap estimation with trajectory attention."""

__version__ = "0.1.0"
