"""Multi-layered simulation relations for temporal-logic control."""
