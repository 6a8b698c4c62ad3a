"""Camera model attribution: CNN patch features, one-vs-one linear SVMs, patch voting."""

__version__ = "0.1.0"
