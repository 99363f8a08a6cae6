"""Expression prediction from histology tiles via co-expression clusters."""
__version__ = "0.1.0"
