"""Tensor partition regression models.

Partitioned Bayesian CP decomposition of image tensors, latent factor
compression of the extracted features and spike-and-slab probit regression,
all fitted jointly by Gibbs sampling.
"""

from .cp import CPHyper, CPState, BlockSampler, cp_als, gibbs_cp, rmse
from .errors import NumericError, ShapeError
from .factor import FactorHyper, FactorState
from .pipeline import ChainStore, PipelineConfig, cross_validate, fit, predict_new, projection, screen
from .probit import RegressionState, SelectHyper, sample_truncated_normal
from .tensor import (
    CPFactors, DenseTensor, PartitionGrid, cp_reconstruct, inner_product, outer_product,
    partition, read_tensor, unpartition, write_tensor,
)

__version__ = "0.1.0"
