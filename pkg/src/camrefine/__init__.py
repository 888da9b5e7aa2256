"""Perimeter-guided refinement of class activation maps."""
__version__ = "0.1.0"
