"""Matrix-only lowering of small neural graphs with elastic piecewise-linear nonlinearities."""

__version__ = "0.1.0"
