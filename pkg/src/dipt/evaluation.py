"""Metrics, the leave-one-domain-out rotation harness, and tabular reports."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DomainDataset, RotationPlan, access_scope
from .distill import DistillConfig, StudentCheckpoint, predict, train_student, zero_shot_predict
from .stage1 import DomainClassEmbeddings
from .store import EmbeddingStore, aggregate_class_embeddings
from .teacher import TeacherModel, parameter_hash

logger = logging.getLogger(__name__)


class LeakageError(RuntimeError):
    """A held-out test domain reached a training or aggregation input."""


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_f1: float
    per_class_f1: tuple[float, ...]
    confusion: np.ndarray = field(compare=False)


def compute_metrics(predictions, labels, num_classes: int) -> Metrics:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.size == 0:
        raise ValueError("cannot compute metrics on an empty prediction set")
    if pred.shape != true.shape:
        raise ValueError(f"predictions {pred.shape} and labels {true.shape} differ in length")
    if true.min() < 0 or true.max() >= num_classes or pred.min() < 0 or pred.max() >= num_classes:
        raise ValueError("class id out of range")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)
    tp = np.diag(confusion).astype(float)
    denom = confusion.sum(axis=0) + confusion.sum(axis=1)  # 2TP + FP + FN
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return Metrics(float(tp.sum() / true.size), float(f1.mean()), tuple(float(v) for v in f1), confusion)


@dataclass(frozen=True)
class RotationResult:
    method: str
    per_rotation: tuple[tuple[int, Metrics], ...]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([m.accuracy for _, m in self.per_rotation]))

    @property
    def mean_f1(self) -> float:
        return float(np.mean([m.macro_f1 for _, m in self.per_rotation]))

    @property
    def worst_accuracy(self) -> float:
        return float(min(m.accuracy for _, m in self.per_rotation))

    @property
    def worst_f1(self) -> float:
        return float(min(m.macro_f1 for _, m in self.per_rotation))


def mean_and_worst(values: Sequence[float]) -> tuple[float, float]:
    return float(np.mean(values)), float(np.min(values))


@dataclass(frozen=True)
class ZeroShot:
    """Teacher zero-shot baseline: cosine argmax of h_I(x) against aggregated template embeddings."""

    name: str = "zero_shot"
    embedding_source: str = "agg_template"


Method = DistillConfig | ZeroShot


DEFAULT_ROSTER: tuple[Method, ...] = (
    ZeroShot("Agg. prompt Zero-Shot"),
    DistillConfig(name="KD", mode="vanilla_kd", embedding_source="agg_template"),
    DistillConfig(name="RISE", mode="dual", embedding_source="agg_template"),
    DistillConfig(name="RISE + DIPT", mode="dual", embedding_source="dipt_invariant"),
    DistillConfig(name="VL2V", mode="dual", embedding_source="generic_prompt"),
    DistillConfig(name="VL2V + DIPT", mode="dual", embedding_source="dipt_invariant"),
)


class RotationHandles:
    """In-memory provider of stores and students for :func:`run_rotation`.

    Subclasses may load from / persist to a workspace instead of computing.
    """

    def __init__(
        self,
        dataset: DomainDataset,
        teacher: TeacherModel,
        stores: dict[str, EmbeddingStore],
        domain_embeddings: dict[int, DomainClassEmbeddings],
    ):
        self.dataset = dataset
        self.teacher = teacher
        self.stores = stores
        self.domain_embeddings = domain_embeddings
        self._students: dict[tuple, StudentCheckpoint] = {}
        self._images: dict[int, np.ndarray] = {}

    def images(self, domains: Sequence[int], stage: str, **tags) -> tuple[DomainDataset, np.ndarray]:
        """Load the given domains' images under a tagged access scope (order: by domain, then manifest)."""
        doms = sorted(set(domains))
        parts = [self.dataset.filter([d]) for d in doms]
        with access_scope(stage=stage, **tags):
            arrays = [p.load_images() for p in parts]
        records = tuple(r for p in parts for r in p.records)
        return DomainDataset(records, self.dataset.class_names, tuple(doms), self.dataset.root), np.concatenate(arrays)

    def invariant_store(self, train_domains: frozenset[int], test_domain: int) -> EmbeddingStore:
        sources = [self.domain_embeddings[d] for d in sorted(train_domains)]
        return aggregate_class_embeddings(sources, self.dataset.class_names, {"rotation_test_domain": test_domain})

    def store_for(self, source: str, train_domains: frozenset[int], test_domain: int) -> EmbeddingStore:
        if source == "dipt_invariant":
            return self.invariant_store(train_domains, test_domain)
        return self.stores[source]

    def student(self, method: DistillConfig, train_domains: frozenset[int], test_domain: int,
                store: EmbeddingStore) -> StudentCheckpoint:
        key = (method.training_key(), test_domain)
        if key not in self._students:
            train, images = self.images(sorted(train_domains), "stage2", test_domain=test_domain)
            self._students[key] = train_student(train, self.teacher, store, method, images=images)
        return self._students[key]


def _check_no_leakage(train_domains: frozenset[int], test_domain: int, validation: int, store: EmbeddingStore | None):
    if test_domain in train_domains:
        raise LeakageError(f"test domain {test_domain} is among train domains {sorted(train_domains)}")
    if validation in train_domains or validation == test_domain:
        raise LeakageError(f"validation domain {validation} used for training or testing")
    if store is not None and store.name == "invariant":
        sources = set(store.provenance.get("source_domains", ()))
        if test_domain in sources or not sources <= set(train_domains):
            raise LeakageError(
                f"invariant store sources {sorted(sources)} leak outside train domains {sorted(train_domains)}"
            )


def run_rotation(plan: RotationPlan, methods: Sequence[Method], handles: RotationHandles) -> list[RotationResult]:
    """Train every method on each rotation's train domains and score it on the held-out test domain."""
    per_method: dict[str, list[tuple[int, Metrics]]] = {m.name: [] for m in methods}
    if len(per_method) != len(methods):
        raise ValueError("method names must be unique")
    teacher_hash = parameter_hash(handles.teacher)
    n_c = handles.dataset.num_classes
    for train_domains, test_domain in plan.rotations:
        for m in methods:
            store = handles.store_for(m.embedding_source or "agg_template", train_domains, test_domain)
            _check_no_leakage(train_domains, test_domain, plan.validation_domain, store)
            if isinstance(m, DistillConfig):
                ckpt = handles.student(m, train_domains, test_domain, store)
                if ckpt.teacher_hash != teacher_hash:
                    raise RuntimeError(f"student {m.name} was distilled from a different teacher")
        test, images = handles.images([test_domain], "eval", test_domain=test_domain)
        labels = test.labels()
        for m in methods:
            store = handles.store_for(m.embedding_source or "agg_template", train_domains, test_domain)
            if isinstance(m, ZeroShot):
                pred = zero_shot_predict(handles.teacher, store, images)
            else:
                pred = predict(handles.student(m, train_domains, test_domain, store), store, images)
            per_method[m.name].append((test_domain, compute_metrics(pred, labels, n_c)))
    if parameter_hash(handles.teacher) != teacher_hash:
        raise RuntimeError("teacher parameters changed during the rotation run")
    return [RotationResult(m.name, tuple(per_method[m.name])) for m in methods]


# -- reports -------------------------------------------------------------------------


def _pct(x: float) -> str:
    return f"{100.0 * x:.4f}"


def detail_csv(results: Sequence[RotationResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "test_domain", "acc", "f1"])
    for r in results:
        for dom, m in r.per_rotation:
            w.writerow([r.method, dom, _pct(m.accuracy), _pct(m.macro_f1)])
    return buf.getvalue()


def summary_csv(results: Sequence[RotationResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "mean_acc", "mean_f1", "worst_acc", "worst_f1"])
    for r in results:
        w.writerow([r.method, _pct(r.mean_accuracy), _pct(r.mean_f1), _pct(r.worst_accuracy), _pct(r.worst_f1)])
    return buf.getvalue()


def emit_report(results: Sequence[RotationResult], out_dir: str | Path, figures: bool = True) -> dict[str, Path]:
    if not results:
        raise ValueError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"detail": out / "detail.csv", "summary": out / "summary.csv"}
    paths["detail"].write_text(detail_csv(results), encoding="utf-8")
    paths["summary"].write_text(summary_csv(results), encoding="utf-8")
    if figures:
        from .plotting import plot_metric_bars

        for metric in ("acc", "f1"):
            paths[f"figure_{metric}"] = plot_metric_bars(results, metric, out / f"{metric}.png")
    return paths


def results_to_json(results: Sequence[RotationResult]) -> list[dict]:
    return [
        {
            "method": r.method,
            "rotations": [
                {
                    "test_domain": d,
                    "accuracy": m.accuracy,
                    "macro_f1": m.macro_f1,
                    "per_class_f1": list(m.per_class_f1),
                    "confusion": m.confusion.tolist(),
                }
                for d, m in r.per_rotation
            ],
        }
        for r in results
    ]


def results_from_json(obj: list[dict]) -> list[RotationResult]:
    return [
        RotationResult(
            r["method"],
            tuple(
                (x["test_domain"], Metrics(x["accuracy"], x["macro_f1"], tuple(x["per_class_f1"]),
                                           np.array(x["confusion"], dtype=np.int64)))
                for x in r["rotations"]
            ),
        )
        for r in obj
    ]
