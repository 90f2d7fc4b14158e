"""Reduced-order models of nonlinear dynamics: VAEs with manifold latent
spaces, an exact Cole-Hopf Burgers solver, and linear baselines (DMD/POD)."""

__version__ = "0.1.0"
