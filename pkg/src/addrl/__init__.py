"""Attribute-driven disentangled multimodal recommender toolkit."""

__version__ = "0.1.0"
