"""Class-extension transfer for conditional GANs by propagating batch-norm
parameters from old classes to new ones, on synthetic 2D tasks."""

__version__ = "0.1.0"
