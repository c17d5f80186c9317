"""Multi-domain CTR models with mixture-of-expert low-rank adapters."""

__version__ = "0.1.0"
