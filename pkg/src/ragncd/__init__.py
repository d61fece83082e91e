"""Retrieval-augmented novel class discovery on precomputed embeddings."""

from .store import (
    BundleError,
    EmbeddingBundle,
    SampleRecord,
    l2_normalize,
    load_bundle,
    make_bundle,
    validate_bundle,
    write_bundle,
)
from .retrieval import RetrievalResult, batch_retrieve, cosine_similarity, retrieve_topk
from .fusion import FusedView, fuse, fuse_dataset, mean_pool
from .sskmeans import ClusterConfig, ClusterModel, assign, fit, init_centers, update_centers
from .losses import LossBatch, sup_loss, total_loss, total_loss_grad, unsup_loss
from .evaluation import EvalReport, cluster_accuracy, hungarian_match, subset_report
from .synth import MixtureSpec, SplitSpec, build_split, generate_mixture
from .pipeline import PipelineConfig, run_pipeline, topk_sweep

__version__ = "0.1.0"
