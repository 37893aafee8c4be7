"""Multi-BS electromagnetic property sensing: forward model, distributed
reconstruction, pilot design and material identification."""

__version__ = "0.1.0"
