"""delm: desk-scale retrieval-augmented language modeling with decoupled,
precomputable context encodings."""

__version__ = "0.1.0"
