"""Word-level visual guidance: retrieval-backed image features fused into
text representations through gated attention."""

__version__ = "0.1.0"
