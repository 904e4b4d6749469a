"""Named class-indexed embedding matrices, domain aggregation, and their JSON store format."""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .stage1 import DomainClassEmbeddings

STORE_FORMAT_VERSION = 1


class StoreError(ValueError):
    pass


class AggregationError(StoreError):
    pass


class StoreIntegrityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EmbeddingStore:
    name: str
    class_names: tuple[str, ...]
    matrix: torch.Tensor  # (N_c, d_e), float32
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        m = self.matrix.detach().to(torch.float32).clone()
        if m.dim() != 2 or m.shape[0] != len(self.class_names):
            raise StoreError(f"matrix shape {tuple(m.shape)} does not match {len(self.class_names)} classes")
        if not bool(torch.isfinite(m).all()):
            raise StoreError(f"store {self.name!r} has non-finite entries")
        m.requires_grad_(False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "provenance", dict(self.provenance))

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def teacher_hash(self) -> str | None:
        return self.provenance.get("teacher_hash")

    def content_hash(self) -> str:
        return _checksum(self.name, self.class_names, _round_rows(self.matrix), self.provenance)


def _fmt(x: float) -> float:
    # 9 significant digits round-trip any float32 exactly
    return float(f"{x:.9g}")


def _round_rows(matrix: torch.Tensor) -> list[list[float]]:
    return [[_fmt(v) for v in row] for row in matrix.numpy().astype(np.float32).tolist()]


def _checksum(name, class_names, rows, provenance) -> str:
    prov = {k: v for k, v in provenance.items() if k != "checksum"}
    blob = json.dumps([name, list(class_names), rows, prov], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def aggregate_class_embeddings(
    domain_embeddings: Sequence[DomainClassEmbeddings],
    class_names: Sequence[str],
    provenance: dict | None = None,
) -> EmbeddingStore:
    """Unweighted mean over domains of the per-domain class embeddings."""
    if not domain_embeddings:
        raise AggregationError("need at least one domain to aggregate")
    first = domain_embeddings[0]
    for e in domain_embeddings[1:]:
        if e.embeddings.shape != first.embeddings.shape:
            raise AggregationError(
                f"domain {e.domain_id} embeddings have shape {tuple(e.embeddings.shape)}, "
                f"domain {first.domain_id} has {tuple(first.embeddings.shape)}"
            )
        if e.teacher_hash != first.teacher_hash:
            raise AggregationError(f"domain {e.domain_id} was encoded by a different teacher ({e.teacher_hash[:12]})")
    if first.embeddings.shape[0] != len(class_names):
        raise AggregationError(f"{first.embeddings.shape[0]} embedding rows for {len(class_names)} class names")
    ids = [e.domain_id for e in domain_embeddings]
    if len(set(ids)) != len(ids):
        raise AggregationError(f"duplicate source domains {ids}")
    stacked = torch.stack([e.embeddings.to(torch.float64) for e in domain_embeddings])
    mean = stacked.sum(dim=0) / len(domain_embeddings)
    prov = {"teacher_hash": first.teacher_hash, "source_domains": sorted(ids), **(provenance or {})}
    return EmbeddingStore("invariant", tuple(class_names), mean, prov)


def save_store(store: EmbeddingStore, path: str | Path) -> None:
    path = Path(path)
    if path.exists():
        raise StoreError(f"store {path} already exists (stores are write-once)")
    rows = _round_rows(store.matrix)
    prov = dict(store.provenance)
    prov["checksum"] = _checksum(store.name, store.class_names, rows, prov)
    obj = {
        "format_version": STORE_FORMAT_VERSION,
        "name": store.name,
        "dim": store.dim,
        "class_names": list(store.class_names),
        "embeddings": {n: r for n, r in zip(store.class_names, rows)},
        "provenance": prov,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_store(
    path: str | Path, expected_class_names: Sequence[str] | None = None, expected_dim: int | None = None
) -> EmbeddingStore:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StoreError(f"cannot read store {path}: {exc}") from exc
    if obj.get("format_version") != STORE_FORMAT_VERSION:
        raise StoreError(f"unsupported store format {obj.get('format_version')!r}")
    names = tuple(obj["class_names"])
    if expected_class_names is not None and tuple(expected_class_names) != names:
        raise StoreError(f"store class order {list(names)} differs from requested {list(expected_class_names)}")
    if expected_dim is not None and obj["dim"] != expected_dim:
        raise StoreError(f"store dim {obj['dim']} differs from expected {expected_dim}")
    rows = [obj["embeddings"][n] for n in names]
    if any(len(r) != obj["dim"] for r in rows):
        raise StoreError("embedding row length disagrees with dim")
    prov = dict(obj.get("provenance", {}))
    recorded = prov.pop("checksum", None)
    if recorded != _checksum(obj["name"], names, rows, prov):
        warnings.warn(f"store {path} provenance checksum mismatch; contents may have been edited", StoreIntegrityWarning)
    return EmbeddingStore(obj["name"], names, torch.tensor(rows, dtype=torch.float32), prov)
