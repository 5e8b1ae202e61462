"""Memory-free generative replay for class-incremental learning."""

__version__ = "0.1.0"
