"""Sequential recommendation with a masked-item bidirectional transformer.

A self-contained toolkit: a float64 tensor core with a reverse-mode tape,
the transformer model (bidirectional or causal attention), an implicit-
feedback data pipeline, an Adam training loop with checkpointing, a
leave-one-out ranking evaluator, and a CLI that renders figures alongside
every delimited report.
"""

from .data import (
    InteractionDataset,
    InteractionRecord,
    LeaveOneOutSplit,
    MaskedBatch,
    build_dataset,
    cloze_mask,
    dataset_fingerprint,
    last_item_mask,
    leave_one_out,
    load_dataset,
    make_training_batches,
    pad_truncate,
    parse_csv,
    parse_movielens,
    popularity_negatives,
    save_dataset,
)
from .evaluate import (
    EvalReport,
    ModelScorer,
    PopScorer,
    RankedCase,
    evaluate,
    hr_at_k,
    mrr,
    ndcg_at_k,
    pop_scorer,
    rank_target,
)
from .model import (
    PAD_ID,
    ModelConfig,
    ModelParams,
    TransformerRecommender,
    build_attention_mask,
)
from .seeds import derive_rng, derive_seed
from .tensor import Tape, Tensor, backward, grad_check
from .trainer import (
    Checkpoint,
    TrainResult,
    TrainSettings,
    adam_step,
    clip_global_norm,
    cloze_loss,
    init_params,
    load_checkpoint,
    lr_at,
    restore_model,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
