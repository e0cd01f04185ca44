"""Off-the-grid MRI reconstruction.

Single-coil recovery of Fourier coefficients from undersampled Cartesian
measurements, using annihilation relations on the k-space gradient:

* ``kspace``   -- centered DFT, sampling, gradient weighting operators
* ``lifting``  -- Toeplitz lifting, Gram matrix, filter-bank normal operator
* ``giraf``    -- IRLS structured low-rank solver
* ``network``  -- unrolled conv/deconv denoiser + data-consistency network
* ``training`` -- MSE training loop, Adam, checkpoints
* ``phantoms`` -- synthetic piecewise-constant data and sampling masks
* ``recon``    -- baseline reconstructions and metrics
"""

from . import giraf, kspace, lifting, network, phantoms, recon, training

__all__ = ["kspace", "lifting", "giraf", "network", "training", "phantoms", "recon"]
