"""One-class classifiers, score fusion and evaluation for continuous authentication."""

__version__ = "0.1.0"
