"""Extract a narrow student from a trained transformer teacher, then distill it."""

__version__ = "0.1.0"
