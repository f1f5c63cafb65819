"""Network Tikhonov (NETT) regularization for ill-posed inverse problems."""

__version__ = "0.1.0"
