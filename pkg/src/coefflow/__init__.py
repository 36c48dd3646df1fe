"""Zero-shot forecaster synthesis for network dynamics.

Expert forecasters trained per environment are tokenized, compressed by a
weight VAE and regenerated for unseen dynamical coefficients by conditional
flow matching in the latent space.
"""
__version__ = "0.1.0"
