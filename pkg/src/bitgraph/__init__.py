"""Binary-code nearest-neighbor engine.

Packs bit vectors into 64-bit words, clusters them with binary k-means,
builds a k-nearest-neighbor graph through a deterministic map-shuffle-reduce
pipeline, refines it by neighborhood propagation, prunes occluded edges, and
serves queries with a best-first beam search (optionally reranked by exact
squared L2 over the original real-valued vectors).
"""

from .errors import BitgraphError, FormatError, IndexDataError, PipelineError, UsageError

__version__ = "0.1.0"

__all__ = [
    "BitgraphError",
    "FormatError",
    "IndexDataError",
    "PipelineError",
    "UsageError",
    "__version__",
]
