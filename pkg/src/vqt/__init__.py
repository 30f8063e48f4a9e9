"""Visual Quality Transformer: sparse temporal attention for no-reference VQA."""

__version__ = "0.1.0"
