"""BM25 retrieval followed by cross-encoder re-ranking, in numpy."""

__version__ = "0.1.0"
