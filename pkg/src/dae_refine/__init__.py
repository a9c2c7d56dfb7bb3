"""Score estimation with conditional denoising autoencoders and iterative refinement of segmentations."""

__version__ = "0.1.0"
