"""Rotation-equivariant CNNs built from steerable circular-harmonic filters.

Submodules: basis, tensor, gconv, autodiff, model, data, config, checkpoint,
train, report, gradcheck, cli. Nothing heavy is imported here so that the
command-line entry point can cap BLAS threads before numpy loads.
"""
__version__ = "0.1.0"
