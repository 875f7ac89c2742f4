"""Causally-aware Bayesian meta-learning with expert-guided task embeddings.

Library layout:

- ``taskgen``: synthetic task worlds from a shared linear SCM
- ``embedding``: embedding-space geometry, corruption, correlation baseline
- ``bayes``: diagonal Gaussians, KL, likelihoods, ELBO gradients
- ``metalearn``: meta-training, adaptation and baselines
- ``expert``: pairwise elicitation of a target embedding
- ``evaluation``: AUROC, negative transfer and theory checks
- ``experiments``: the synthetic experiment grids
- ``service``: HTTP sessions for live elicitation
"""

from .bayes import DiagGaussian, ElboEstimate, PredictorSpec, elbo_grad, kl_diag, loglik
from .embedding import (
    CorrelationProjector,
    EmbeddingSet,
    corrupt,
    dist,
    embed_by_correlation,
    eps_similar,
    fit_correlation_projector,
    mean_source_embedding,
)
from .errors import ConfigurationError, DomainError, NumericalError
from .evaluation import (
    EpsDecomposition,
    RiskEstimate,
    auroc,
    check_lipschitz,
    check_nt_mitigation,
    eps_decomposition,
    log_loss,
    negative_transfer,
    prior_induced_risk,
)
from .expert import (
    Comparison,
    ExpertQuery,
    ExpertSession,
    SimulatedExpert,
    bald_eig,
    delta,
    probit_lik,
    run_loop,
    select_query,
    simulate_expert,
    svi_update,
)
from .metalearn import (
    EvalSplit,
    HyperParams,
    MetaState,
    TaskPosterior,
    TrainSchedule,
    adapt_and_predict,
    init_state,
    inner_adapt,
    meta_train,
    outer_update,
    prior_for_task,
    train_bnn_baseline,
    train_fomaml_baseline,
)
from .taskgen import (
    GeneratorSpec,
    TaskDataset,
    TaskEmbedding,
    World,
    generate_experiment_world,
    generate_task,
    make_target_embedding,
    sample_source_embeddings,
)

__version__ = "0.1.0"
