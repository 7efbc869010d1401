"""Differentiable deep clustering with cluster-size constraints via entropic optimal transport."""

from .autodiff import Tape, Var, backward, pairwise_sqdist
from .data import Dataset, batch_iter, load_idx, make_blobs
from .errors import (
    ContractError,
    IdxConsistencyError,
    IdxFormatError,
    IdxTruncatedError,
    NumericalInstabilityError,
    ShapeError,
    SinkclustError,
    SizeError,
)
from .evaluation import clustering_accuracy, confusion_matrix, hungarian_max, welch_t_test
from .kmeans import KmeansResult, assign_nearest, kmeans, kmeanspp_init, lloyd
from .losses import ClusterModel, combined_loss, kmeans_loss, ot_cluster_loss, soft_kmeans_assign, soft_kmeans_loss
from .nn import AdamState, Autoencoder, StepDecay, adam_step, decoder_forward, encoder_forward, reconstruction_loss
from .sinkhorn import (
    SinkhornConfig,
    TransportPlan,
    exact_lp_oracle,
    ot_loss,
    ot_loss_grad_envelope,
    sinkhorn,
    sinkhorn_log_domain,
)
from .training import RunMetrics, TrainConfig, run_experiment

__version__ = "0.1.0"
