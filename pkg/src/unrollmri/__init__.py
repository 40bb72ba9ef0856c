"""Unrolled optimization for accelerated parallel MR image reconstruction.

Pure numpy/scipy: multicoil Fourier sampling operators, data-consistency
layers, a small reverse-mode autodiff engine, trainable regularizer networks,
losses, a synthetic multicoil data pipeline and evaluation metrics.
"""

__version__ = "0.1.0"
