"""Attribute-query person retrieval with two cooperating GANs (feature synthesis and common-space alignment)."""

__version__ = "0.1.0"
