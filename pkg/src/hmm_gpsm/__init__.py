"""Hidden Markov models with Gaussian-process spectral mixture emissions.

Segments of a time series are clustered into hidden states; each state
emits whole segments under a zero-mean GP with its own spectral mixture
kernel. Training runs by variational Bayes EM or by stochastic variational
inference over sub-sequences, optionally with a random-Fourier-feature
bound for emissions whose cost is linear in the segment length.
"""

from .data import MissingSpec, Sequence, SyntheticSpec, gen_dataset, load_csv, save_csv
from .emission import EmissionModel, emission_loglik_grid, exact_lml, regularized_bound, sparse_lml
from .hmm import DirichletPriors, forward_backward, vbem_fit
from .kernel_init import init_all
from .metrics import cluster_count, munkres_accuracy
from .pipeline import TrainedModel, TrainSettings, evaluate, train
from .spectral import SmKernelParams, rff_features, sm_kernel_eval
from .svi import SviConfig, svi_fit

__version__ = "0.1.0"

__all__ = [
    "DirichletPriors", "EmissionModel", "MissingSpec", "Sequence", "SmKernelParams", "SviConfig",
    "SyntheticSpec", "TrainSettings", "TrainedModel", "cluster_count", "emission_loglik_grid",
    "evaluate", "exact_lml", "forward_backward", "gen_dataset", "init_all", "load_csv",
    "munkres_accuracy", "regularized_bound", "rff_features", "save_csv", "sm_kernel_eval",
    "sparse_lml", "svi_fit", "train", "vbem_fit",
]
