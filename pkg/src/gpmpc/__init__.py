"""Cautious stochastic MPC with Gaussian-process residual dynamics."""

from .constraints import (Ball, HalfSpace, Polytope, PrsKind, PrsSpec, Slab, TrackTube,
                          empirical_violation, tighten_halfspace, tighten_marginal_box,
                          tighten_polytope_faces, tighten_slab, tighten_track_tube, tube_radius)
from .gp import (GpDataset, GpModel, GpPrediction, SeKernel, build_model, fit_hyperparameters,
                 log_marginal_likelihood, posterior, update_dataset)
from .mpc import (InputConstraint, MpcProblem, MpcSolution, QuadraticCost, SolverError,
                  StateConstraint, expected_cost, input_box, lqr_gains, receding_step, solve)
from .prob import GaussianBelief, NumericalError, make_rng, mvn_sample
from .propagation import NominalModel, PropagationMethod, gp_moments, propagate, rollout
from .sparse import SparseGpModel, fitc_build, fitc_posterior, select_inducing_from_trajectory

__version__ = "0.1.0"
