"""Physics-guided inductive spatiotemporal kriging for sparse sensor networks."""

__version__ = "0.1.0"
