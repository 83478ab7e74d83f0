"""PartedVAE: a VAE whose latent space is parted into a discrete class code,
class-related continuous factors with a learnable per-class Gaussian prior
bank, and class-independent continuous factors."""

__version__ = "0.1.0"

from .tensor import Tensor, make_rng, no_grad

__all__ = ["Tensor", "make_rng", "no_grad", "__version__"]
