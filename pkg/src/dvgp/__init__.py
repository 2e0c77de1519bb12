"""Distributed variational inference for sparse GP regression and the Bayesian GPLVM."""
from ._accel import backend_name
from .distributed import Cluster, GlobalParams, IterationSkipped, ProtocolError, partition
from .elbo import BoundReport, QuDistribution, SingularKernelError, SufficientStats
from .kernel import ContractError, InducingSet, KernelHyperparams, VariationalEmbedding
from .optimizer import SCGOptions, scg_minimize

__version__ = "0.1.0"
