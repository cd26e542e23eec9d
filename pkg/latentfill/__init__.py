"""
latentfill - Diffusion models trained on incomplete images

Pixel-space and latent-space score-based diffusion on MCAR-masked MNIST,
with a masked beta-VAE, masked denoising score matching, and replacement,
self-guided and EM imputation. Includes the evaluation classifier, FID/IS/MSE
metrics and a resumable sweep driver.
"""

__version__ = "0.1.0"
__author__ = "latentfill Development Team"
