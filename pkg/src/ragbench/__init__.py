"""Comparative retrieval-augmented generation pipelines with LLM-as-judge scoring."""

__version__ = "0.1.0"
