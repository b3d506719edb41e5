"""Proxy-based feature distribution alignment on raw feature matrices."""
from . import _backend
from .dataset import LabeledFeatureSet
from .fda import LossScalars, Objective, combined_objective, fda_loss, fda_loss_batch, pointwise_l2_loss
from .graph import ConfigError, FeatureBatch, NeighborGraph, build_neighbor_graph, split_by_graph
from .proxy import (ProxyGenerator, ProxySet, generate_proxies, proxy_fda_loss, proxy_training_loss,
                    variance_loss)

BACKEND = _backend.NAME

__version__ = "0.1.0"
