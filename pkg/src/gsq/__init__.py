"""Grid-block Gaussian splat compression with shared residual codebooks and image-conditioned decoding."""

__version__ = "0.1.0"
