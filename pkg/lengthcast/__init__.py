"""Output-length prediction from reused hidden states, plus a batching simulator."""

__version__ = "0.1.0"
