"""Graph-based ecohydrological simulation and knowledge distillation."""

__version__ = "0.1.0"
