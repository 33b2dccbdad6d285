"""Stochastic predictive control, model-based and direct data-driven.

Subpackages:
    numkit      dense matrix kernels (Hankel/Toeplitz, pinv, Riccati, sqrt)
    plant       stochastic LTI simulation, noise models, offline data capture
    datadriven  Hankel data partitions, predictor recovery, auxiliary model
    predictive  shared receding-horizon engine (estimator, cones, programs)
    socp        built-in interior-point solver for quadratic cone programs
    equivalence paired model-based vs data-driven execution harness
    experiments case-study configuration, runners and metrics
    cli         command-line entry point
"""

__version__ = "0.1.0"
