"""Discrete-event simulator for software-defined serving of agentic LLM pipelines."""

__version__ = "0.1.0"
