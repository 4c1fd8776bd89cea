"""Dataset condensation for implicit-feedback recommendation."""

from dconrec.augment import DataPool, build_data_pool, topk_unexposed, train_proxy
from dconrec.baselines import (
    BaselineConfig,
    gradmatch_condense,
    majority_select,
    random_select,
    svp_cf_select,
)
from dconrec.condense import (
    CondenseConfig,
    ConvergenceMonitor,
    ProbabilityMask,
    SampledMask,
    condense,
    finalize_dataset,
    init_probabilities,
    log_prob_grad,
    lpge_step,
)
from dconrec.data import (
    DataFormatError,
    DatasetSplit,
    InteractionSet,
    group_users,
    load_interactions,
    split_dataset,
)
from dconrec.metrics import EvalReport, evaluate, ndcg_at_k, recall_at_k
from dconrec.model import EmbeddingModel, TrainConfig, bpr_loss, init_model, train
from dconrec.projection import project_feasible

__version__ = "0.1.0"
