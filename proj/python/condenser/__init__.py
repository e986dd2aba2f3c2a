"""Condenser pre-training, dense retrieval and attention analysis.

Configuration arguments take plain dicts; missing keys keep their defaults
(see ``default_model_config()`` and friends) and unknown keys raise.
"""

from ._core import (
    CondenserError,
    DenseIndex,
    Encoder,
    FormatError,
    NumericError,
    Pretrainer,
    PretrainModel,
    ShapeError,
    Vocabulary,
    cls_attention_entropy,
    contrastive_nll,
    default_finetune_options,
    default_model_config,
    default_pretrain_options,
    encode_corpus,
    entropy,
    evaluate_run,
    finetune_regression,
    finetune_retriever,
    finetune_triplet,
    make_synthetic_dataset,
    mrr_at_k,
    ndcg_at_k,
    num_threads,
    pairwise_accuracy,
    recall_at_k,
    set_num_threads,
    spearman,
    tokenize,
    topk_hit,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
