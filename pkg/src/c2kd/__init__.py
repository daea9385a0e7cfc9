"""Cross-lingual cross-modal knowledge distillation for text-video retrieval, at desk scale."""

from .data import Corpus, CorpusRecord, Split, SyntheticSpec, generate_synthetic, load_corpus, make_split, save_corpus
from .distill import PoolerKind, TeacherEnsemble, pool_teacher_matrices, teacher_scores
from .evaluation import RetrievalReport, evaluate_retrieval, rank_videos, recall_at_k
from .model import ModelConfig, ModelParams, init_model, load_checkpoint, save_checkpoint
from .objectives import (
    LossBreakdown,
    SimilarityMatrix,
    c2kd_loss,
    combined_loss,
    cross_entropy_soft,
    nce_loss,
    similarity_matrix,
    smooth_l1_distill,
)
from .train import TrainConfig, adam_step, train_student, train_teachers

__version__ = "0.1.0"

__all__ = [
    "Corpus",
    "CorpusRecord",
    "Split",
    "SyntheticSpec",
    "generate_synthetic",
    "load_corpus",
    "make_split",
    "save_corpus",
    "PoolerKind",
    "TeacherEnsemble",
    "pool_teacher_matrices",
    "teacher_scores",
    "RetrievalReport",
    "evaluate_retrieval",
    "rank_videos",
    "recall_at_k",
    "ModelConfig",
    "ModelParams",
    "init_model",
    "load_checkpoint",
    "save_checkpoint",
    "LossBreakdown",
    "SimilarityMatrix",
    "c2kd_loss",
    "combined_loss",
    "cross_entropy_soft",
    "nce_loss",
    "similarity_matrix",
    "smooth_l1_distill",
    "TrainConfig",
    "adam_step",
    "train_student",
    "train_teachers",
]
