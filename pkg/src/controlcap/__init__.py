"""Rigorous numerics for controlled pendulum and cartpole dynamics."""
__version__ = "0.1.0"
