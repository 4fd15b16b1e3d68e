"""Learned fixed-point refinement of a base solver on a 1-D periodic problem.

A small MLP ``Phi(x, h)`` corrects an initial estimate ``h0`` through
``h_{k+1} = h_k + alpha * Phi(x, h_k)``.  The package contains the field and
FFT primitives, the network with hand-written reverse mode, the base
operators, training losses with AdamW, contraction and spectral diagnostics,
and a command line harness.
"""

from .base import BaseOperatorSpec, EllipticProblem, base_predict, solve_exact
from .config import ExperimentConfig, load_config, parse, serialize
from .data import DataSpec, Dataset, generate_dataset, load_dataset, save_dataset, train_test_split
from .errors import (
    ConfigError,
    ConjugateSymmetryError,
    ConvergenceError,
    DivergenceError,
    GridError,
    InsufficientDataError,
    NoInvariantBallError,
    RefineError,
    UndefinedCorrelationError,
)
from .field import Grid, fft_forward, fft_inverse, l2_norm
from .losses import LossWeights, unrolled_loss
from .mlp import MlpParams, init_params, load_params, phi, save_params
from .refine import RefineConfig, RefinementTrajectory, refine_batch, run_refinement
from .train import TrainConfig, train

__version__ = "0.1.0"
