"""Expert-retrieval dynamic convolutions with meta-learned per-expert rates."""

__version__ = "0.1.0"
