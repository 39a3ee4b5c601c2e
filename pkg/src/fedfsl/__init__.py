"""Desk-scale simulator of federated few-shot learning.

Episodic meta-learning on partitioned clients with weighted model averaging,
optional divergence regularization toward the shared model, and a two-stage
adversarial feature-alignment variant, plus baselines and an evaluation
harness.
"""

from .adversarial import AdvConfig, SplitModel, adv_loss, client_update_adv
from .checkpoints import SnapshotStore, load_checkpoint, save_checkpoint
from .data import (
    Dataset,
    Episode,
    EpisodeInfeasibleError,
    PartitionPlan,
    load_digits_like,
    make_synthetic_blobs,
    partition,
    rng_stream,
    sample_batch,
    sample_episode,
)
from .diffcore import (
    Batch,
    ConfigurationError,
    ModelSpec,
    NumericsError,
    ParamVector,
    cross_entropy_loss,
    forward_logits,
    grad,
    init_params,
    kl_divergence,
    meta_grad,
    softmax_probs,
)
from .eval import EvalPlan, EvalReport, FeatureDump, dump_features, evaluate
from .federation import (
    Algorithm,
    ClientState,
    EpisodeShape,
    FederationConfig,
    RoundRecord,
    aggregate,
    k_exclusive,
    mi_loss,
    run_round,
    run_training,
)
from .fsl import (
    InnerLoopConfig,
    OuterLoopConfig,
    adapt,
    episode_loss,
    local_fsl_loss,
    meta_step,
)

__all__ = [name for name in dir() if not name.startswith("_")]
