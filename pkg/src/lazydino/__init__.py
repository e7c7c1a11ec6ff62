"""Derivative-informed lazy transport maps for Bayesian inverse problems.

Modules
-------
prior        Gaussian random-field prior on a structured grid.
forward      Nonlinear reaction-diffusion forward model and its derivatives.
subspace     Derivative-informed reduced basis and latent embedding.
surrogate    Reduced-basis MLP surrogate with L2 and H1 training.
transport    Inverse autoregressive lazy maps and their training.
baselines    MAP point, Laplace approximation and pCN sampling.
diagnostics  Moment and density-based posterior error measures.
io, pipeline Configuration, archives and the command implementations.
"""
from .prior import GaussianPrior, Mesh, build_prior, sample_prior
from .forward import PdeConfig, PdeError, solve_pde, pto
from .subspace import ReducedBasis, solve_gevp, estimate_gn_hessian, embed_dataset, lift
from .surrogate import MlpSurrogate, TrainConfig, train
from .transport import IafMap, StageSchedule, train_lazy_map

__version__ = "0.1.0"
