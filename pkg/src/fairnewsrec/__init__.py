"""Provider-fair neural news recommendation on a numpy autodiff core."""

__version__ = "0.1.0"
