"""Class-conditional motion/content video GAN with a zero-shot holdout protocol."""

__version__ = "0.1.0"
