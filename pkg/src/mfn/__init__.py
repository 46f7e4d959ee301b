"""Matrix function networks: non-local graph learning through learnable
analytic functions of learned self-adjoint graph operators."""

__version__ = "0.1.0"
