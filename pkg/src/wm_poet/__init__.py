"""Working-memory poetry generation: model, pipeline and CLI."""

__version__ = "0.1.0"
