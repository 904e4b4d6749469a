"""Domain-invariant prompt tuning for vision-language distillation on synthetic pathology-like data."""

from .data import DatasetSpec, DomainDataset, RotationPlan, generate_dataset, load_manifest, make_rotation_plan
from .distill import DistillConfig, StudentModel, train_student
from .evaluation import DEFAULT_ROSTER, RotationResult, ZeroShot, compute_metrics, run_rotation
from .prompts import PromptTemplateBank, compute_aggregated_embeddings, default_bank
from .stage1 import Stage1Config, train_domain_prompts
from .store import EmbeddingStore, aggregate_class_embeddings
from .teacher import TeacherModel, Tokenizer, pretrain_teacher

__version__ = "0.1.0"

__all__ = [
    "DatasetSpec", "DomainDataset", "RotationPlan", "generate_dataset", "load_manifest", "make_rotation_plan",
    "DistillConfig", "StudentModel", "train_student",
    "DEFAULT_ROSTER", "RotationResult", "ZeroShot", "compute_metrics", "run_rotation",
    "PromptTemplateBank", "compute_aggregated_embeddings", "default_bank",
    "Stage1Config", "train_domain_prompts",
    "EmbeddingStore", "aggregate_class_embeddings",
    "TeacherModel", "Tokenizer", "pretrain_teacher",
]
