"""Exact distributed inference for low-rank spatial and spatio-temporal models."""
from .errors import LRDSError
from .model import (
    DEFAULT_PARAMS,
    CompactSupport,
    FixedBasis,
    GaussianState,
    MaternParams,
    ModelParams,
    PredictiveProcessBasis,
)
from .worker import Shard, Summary

__version__ = "0.1.0"
