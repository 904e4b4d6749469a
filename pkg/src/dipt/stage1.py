"""Per-domain continuous prompt learning against the frozen teacher.

For domain d and class i the prompt is ``[T_1^d, ..., T_k^d, E_i^Agg]``; the k
tokens are shared across classes and are the only trainable quantity.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import CheckpointError, read_container, write_container
from .data import DomainDataset, access_scope
from .teacher import ShapeError, TeacherModel, parameter_hash

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Stage1Config:
    k: int = 2
    learning_rate: float = 5e-5
    temperature: float = 0.01
    steps: int = 500
    batch_size: int = 32
    seed: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class DomainTokens:
    domain_id: int
    tokens: torch.Tensor  # (k, d_t)

    @property
    def k(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class DomainClassEmbeddings:
    domain_id: int
    embeddings: torch.Tensor  # (N_c, d_e)
    teacher_hash: str


@dataclass
class Stage1Result:
    tokens: DomainTokens
    embeddings: DomainClassEmbeddings
    loss_trace: list[float]
    config: Stage1Config


def init_domain_tokens(k: int, d_t: int, seed: int, domain_id: int = 0, init_std: float = 0.02) -> DomainTokens:
    if k < 1:
        raise ValueError("k must be >= 1: with no learnable tokens the prompt degenerates to the class-generic token")
    gen = torch.Generator().manual_seed(int(seed) % 2**63)
    return DomainTokens(domain_id, torch.randn(k, d_t, generator=gen) * init_std)


def build_prompt(tokens: torch.Tensor, class_id: int, agg: torch.Tensor) -> torch.Tensor:
    """Concatenate the k learnable rows with the class-generic row: shape (k+1, d_t)."""
    if not 0 <= class_id < agg.shape[0]:
        raise IndexError(f"class_id {class_id} out of range [0, {agg.shape[0]})")
    if tokens.shape[-1] != agg.shape[-1]:
        raise ShapeError(f"token dim {tokens.shape[-1]} != class-generic embedding dim {agg.shape[-1]}")
    return torch.cat([tokens, agg[class_id : class_id + 1].to(tokens.dtype)], dim=0)


def encode_domain_prompts(teacher: TeacherModel, tokens: torch.Tensor, agg: torch.Tensor) -> torch.Tensor:
    """Differentiable (N_c, d_e) matrix of E_{d,i} for all classes at once."""
    n_c = agg.shape[0]
    if tokens.shape[-1] != agg.shape[-1] or tokens.shape[-1] != teacher.token_dim:
        raise ShapeError(f"token dim {tokens.shape[-1]} incompatible with teacher/agg dim {teacher.token_dim}")
    prompts = torch.cat([tokens.expand(n_c, -1, -1), agg.to(tokens.dtype)[:, None, :]], dim=1)
    return teacher.encode_continuous(prompts)


def domain_class_embeddings(teacher: TeacherModel, tokens: DomainTokens, agg: torch.Tensor) -> DomainClassEmbeddings:
    with torch.no_grad():
        emb = encode_domain_prompts(teacher, tokens.tokens, agg)
    return DomainClassEmbeddings(tokens.domain_id, emb, parameter_hash(teacher))


def _as_matrix(e) -> torch.Tensor:
    return e.embeddings if isinstance(e, DomainClassEmbeddings) else e


def loss_ds(image_feats: torch.Tensor, labels: torch.Tensor, domain_embeddings, temperature: float) -> torch.Tensor:
    """Batch-mean cross-entropy over logits cos(h_I(x), E_{d,i}) / temperature."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if image_feats.shape[0] == 0:
        raise ValueError("empty batch")
    e = _as_matrix(domain_embeddings)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.min() < 0 or labels.max() >= e.shape[0]:
        raise IndexError("label out of range")
    z = F.normalize(image_feats, dim=-1) @ F.normalize(e, dim=-1).T
    return F.cross_entropy(z / temperature, labels)


def _safe_cos_rows(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise FloatingPointError("cosine of a zero-norm vector is undefined")
    return (a * b).sum(-1) / (na * nb)


def loss_g(domain_embeddings, agg: torch.Tensor) -> torch.Tensor:
    """Mean over classes of 1 - cos(E_{d,i}, E_i^Agg)."""
    e = _as_matrix(domain_embeddings)
    if e.shape != agg.shape:
        raise ShapeError(f"shape mismatch {tuple(e.shape)} vs {tuple(agg.shape)}")
    return (1.0 - _safe_cos_rows(e, agg.to(e.dtype))).mean()


def stage1_objective(
    teacher: TeacherModel, tokens: torch.Tensor, agg: torch.Tensor, image_feats, labels, temperature: float
) -> torch.Tensor:
    e = encode_domain_prompts(teacher, tokens, agg)
    return loss_ds(image_feats, labels, e, temperature) + loss_g(e, agg)


def teacher_image_features(teacher: TeacherModel, images: np.ndarray, batch_size: int = 256) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([teacher.encode_image(images[i : i + batch_size]) for i in range(0, len(images), batch_size)])


def train_domain_prompts(
    domain_data: DomainDataset,
    teacher: TeacherModel,
    agg: torch.Tensor,
    config: Stage1Config,
    image_feats: torch.Tensor | None = None,
) -> Stage1Result:
    """Plain SGD on the k domain tokens; teacher and E^Agg stay frozen."""
    domains = {r.domain_id for r in domain_data.records}
    if len(domains) != 1:
        raise ValueError(f"stage-1 training is strictly per-domain, got domains {sorted(domains)}")
    (domain,) = domains
    if image_feats is None:
        with access_scope(stage="stage1", domain=domain):
            image_feats = teacher_image_features(teacher, domain_data.load_images())
    labels = torch.as_tensor(domain_data.labels())
    agg = agg.detach()

    init = init_domain_tokens(config.k, teacher.token_dim, config.seed, domain, config.init_std)
    tokens = init.tokens.clone().requires_grad_(True)
    opt = torch.optim.SGD([tokens], lr=config.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x51, domain]))
    trace = []
    n = len(labels)
    for _ in range(config.steps):
        idx = torch.as_tensor(rng.choice(n, size=min(config.batch_size, n), replace=False))
        loss = stage1_objective(teacher, tokens, agg, image_feats[idx], labels[idx], config.temperature)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(loss.item())
    final = DomainTokens(domain, tokens.detach().clone())
    return Stage1Result(final, domain_class_embeddings(teacher, final, agg), trace, config)


def evaluate_prompts(
    teacher: TeacherModel, embeddings, agg: torch.Tensor, image_feats: torch.Tensor, labels, temperature: float
) -> tuple[float, np.ndarray]:
    """Full-set objective value and cosine-argmax predictions for held-out features."""
    e = _as_matrix(embeddings)
    labels = torch.as_tensor(labels)
    with torch.no_grad():
        loss = (loss_ds(image_feats, labels, e, temperature) + loss_g(e, agg)).item()
        pred = (F.normalize(image_feats, dim=-1) @ F.normalize(e, dim=-1).T).argmax(dim=1).numpy()
    return loss, pred


def full_loss(teacher: TeacherModel, tokens: torch.Tensor, agg, image_feats, labels, temperature: float) -> float:
    with torch.no_grad():
        return stage1_objective(teacher, tokens, agg, image_feats, torch.as_tensor(labels), temperature).item()


# -- token checkpoints ---------------------------------------------------------------


def save_tokens(tokens: DomainTokens, path: str | Path, config: Stage1Config, meta: dict | None = None) -> None:
    header = {
        "kind": "domain_tokens",
        "domain_id": tokens.domain_id,
        "k": tokens.k,
        "d_t": tokens.tokens.shape[1],
        "seed": config.seed,
        "config": asdict(config),
        "meta": meta or {},
    }
    write_container(path, header, {"tokens": tokens.tokens.numpy()})


def load_tokens(path: str | Path) -> tuple[DomainTokens, dict]:
    header, tensors = read_container(path)
    if header.get("kind") != "domain_tokens":
        raise CheckpointError(f"{path} is not a domain-token checkpoint", field="kind")
    t = torch.from_numpy(tensors["tokens"])
    if tuple(t.shape) != (header["k"], header["d_t"]):
        raise CheckpointError("token matrix shape disagrees with header", field="k")
    return DomainTokens(int(header["domain_id"]), t), header
