"""Group-relative policy optimisation for head-conditioned motion diffusion,
on a synthetic articulated skeleton."""
__version__ = "0.1.0"
