# __init__.py
"""Pool-based active learning for multi-label classification with spatial pooling heads."""

__version__ = "1.0.0"
