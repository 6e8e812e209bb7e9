"""Nearest-neighbor Gaussian process spatial regression with distance-pattern
clustering.

The library fits the hierarchical model y(s) = x(s)'beta + w(s) + eps(s) with
a sparse nearest-neighbor factorization of the spatial effects, either with
per-location kriging factors or with per-cluster factors shared across
locations whose neighbor-distance patterns are similar.
"""

from .clustering import (ClusterModel, PcaReducer, RadiusSweep, assign_all,
                         build_cluster_model, distance_vector, distance_vectors,
                         fit_pca, leader_cluster, radius_sweep)
from .covariance import (CovarianceParams, NoiseParams, cov_from_distances,
                         effective_range, exponential_cov)
from .evaluation import (MetricReport, crps_empirical, crps_mean,
                         parameter_summary, point_metrics, score_predictions,
                         waic)
from .factors import (FactorBuilder, FactorSet, batch_factors, build_factorset,
                      location_factors, log_joint_w)
from .geometry import (NeighborGraph, SpatialDataset, build_neighbor_graph,
                       euclidean_distance, knn_batch, knn_query, maxmin_order)
from .inference import (PosteriorChain, PriorSpec, SamplerConfig,
                        phi_prior_from_distances, run_chain)
from .prediction import PredictionResult, predict
from .simulate import (FoldAssignment, ModelConfig, ScenarioSpec,
                       generate_dataset, run_experiment, spatial_block_folds)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
