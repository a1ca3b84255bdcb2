"""Model-based meta-policy optimization on analytic desk-scale environments."""

import os as _os

# All arrays here are tiny; BLAS thread pools only add contention and they
# break single-threaded determinism guarantees.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from .autodiff import MlpSpec, ParameterVector, grad, hvp_fd, mlp_forward
from .dynamics import ModelEnsemble, PerturbationConfig, TransitionBuffer, train_ensemble
from .envs import make_env
from .metaopt import MetaPolicyState, TrpoConfig
from .orchestrator import RunConfig, evaluate, run
from .policy import GaussianPolicy, mean_kl

__all__ = [
    "MlpSpec",
    "ParameterVector",
    "grad",
    "hvp_fd",
    "mlp_forward",
    "ModelEnsemble",
    "PerturbationConfig",
    "TransitionBuffer",
    "train_ensemble",
    "make_env",
    "MetaPolicyState",
    "TrpoConfig",
    "RunConfig",
    "evaluate",
    "run",
    "GaussianPolicy",
    "mean_kl",
]
