"""Student distillation from the frozen teacher's image encoder and class text embeddings."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import CheckpointError, read_container, write_container
from .data import DomainDataset, access_scope, images_to_tensor
from .store import EmbeddingStore
from .teacher import Block, ShapeError, TeacherModel, conv_block, parameter_hash

logger = logging.getLogger(__name__)

MODES = ("vanilla_kd", "image_only", "text_aligned", "dual")
SOURCES = ("generic_prompt", "agg_template", "dipt_invariant")
ARCHS = ("conv", "vit")
ZERO_SHOT_TAU = 0.01


class ConfigError(ValueError):
    pass


class ProvenanceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    name: str = "dual"
    mode: str = "dual"
    embedding_source: str | None = "dipt_invariant"
    lambda_image: float = 1.0
    lambda_text: float = 1.0
    kd_temperature: float = 4.0
    learning_rate: float = 1e-3
    epochs: int = 15
    batch_size: int = 32
    seed: int = 0
    arch: str = "conv"
    width: int = 32

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "vanilla_kd":
            if self.embedding_source not in (None, "agg_template"):
                raise ConfigError("vanilla_kd draws teacher logits from agg_template embeddings")
        elif self.embedding_source not in SOURCES:
            raise ConfigError(f"mode {self.mode!r} requires embedding_source in {SOURCES}")
        if self.lambda_image < 0 or self.lambda_text < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.mode == "dual" and self.lambda_image + self.lambda_text <= 0:
            raise ConfigError("dual mode needs lambda_image + lambda_text > 0")
        if self.kd_temperature <= 0:
            raise ConfigError("kd_temperature must be > 0")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}")

    @property
    def store_name(self) -> str:
        return self.embedding_source or "agg_template"

    def training_key(self) -> tuple:
        """Everything that influences the trained weights (the display name does not)."""
        d = asdict(self)
        d.pop("name")
        return tuple(sorted(d.items()))

    def loss_weights(self) -> tuple[float, float]:
        if self.mode == "image_only":
            return 1.0, 0.0
        if self.mode == "text_aligned":
            return 0.0, 1.0
        return self.lambda_image, self.lambda_text


class StudentModel(nn.Module):
    def __init__(self, embed_dim: int, num_classes: int, arch: str = "conv", width: int = 32, image_size: int = 64,
                 conv_widths: tuple[int, ...] | None = None, with_head: bool = False):
        super().__init__()
        self.arch = arch
        # per-image channel standardization: the student sees stain intensity only relative to its own image
        self.input_norm = nn.InstanceNorm2d(3, eps=1e-5)
        self.spec = {"embed_dim": embed_dim, "num_classes": num_classes, "arch": arch, "width": width,
                     "image_size": image_size, "conv_widths": list(conv_widths) if conv_widths else None,
                     "with_head": with_head}
        if arch == "conv":
            widths = conv_widths or (width // 2, width, 2 * width)
            chans = (3, *widths)
            self.backbone = nn.Sequential(
                *(conv_block(chans[i], chans[i + 1], stride=2 if i == 0 else 1) for i in range(len(widths)))
            )
            feat = chans[-1]
        elif arch == "vit":
            patch = 8
            self.patch = nn.Conv2d(3, width, patch, stride=patch)
            n = (image_size // patch) ** 2
            self.cls = nn.Parameter(torch.zeros(1, 1, width))
            self.pos = nn.Parameter(torch.randn(1, n + 1, width) * 0.02)
            self.blocks = nn.ModuleList(Block(width, 4) for _ in range(2))
            self.norm = nn.LayerNorm(width)
            feat = width
        else:
            raise ConfigError(f"unknown student arch {arch!r}")
        self.projection = nn.Linear(feat, embed_dim)
        self.head = nn.Linear(feat, num_classes) if with_head else None

    def features(self, x: torch.Tensor) -> torch.Tensor:
        x = self.input_norm(x)
        if self.arch == "conv":
            return self.backbone(x).mean(dim=(2, 3))
        t = self.patch(x).flatten(2).transpose(1, 2)
        t = torch.cat([self.cls.expand(t.shape[0], -1, -1), t], dim=1) + self.pos
        for b in self.blocks:
            t = b(t)
        return self.norm(t[:, 0])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Unnormalised projection f(x) in the teacher embedding space."""
        return self.projection(self.features(x))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if self.head is None:
            raise RuntimeError("student has no linear head")
        return self.head(self.features(x))


def _cos(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise FloatingPointError("cosine of a zero-norm feature is undefined")
    return (a * b).sum(-1) / (na * nb)


def loss_image_align(student_feats: torch.Tensor, teacher_feats: torch.Tensor) -> torch.Tensor:
    if student_feats.shape != teacher_feats.shape:
        raise ShapeError(f"{tuple(student_feats.shape)} vs {tuple(teacher_feats.shape)}")
    return (1.0 - _cos(student_feats, teacher_feats.to(student_feats.dtype))).mean()


def loss_text_align(student_feats: torch.Tensor, labels, store: EmbeddingStore | torch.Tensor) -> torch.Tensor:
    e = store.matrix if isinstance(store, EmbeddingStore) else store
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= e.shape[0]):
        raise IndexError(f"label without an embedding row (store has {e.shape[0]} classes)")
    return (1.0 - _cos(student_feats, e.to(student_feats.dtype)[labels])).mean()


def loss_vanilla_kd(student_logits: torch.Tensor, teacher_logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """T^2 * KL(softmax(teacher/T) || softmax(student/T)), batch mean."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"{tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}")
    log_q = F.log_softmax(student_logits / temperature, dim=-1)
    log_p = F.log_softmax(teacher_logits.to(student_logits.dtype) / temperature, dim=-1)
    kl = (log_p.exp() * (log_p - log_q)).sum(-1)
    return temperature**2 * kl.mean()


def distill_objective(student: StudentModel, images, labels, teacher_feats, store_matrix, lambda_image, lambda_text):
    f = student(images)
    total = 0.0
    if lambda_image:
        total = total + lambda_image * loss_image_align(f, teacher_feats)
    if lambda_text:
        total = total + lambda_text * loss_text_align(f, labels, store_matrix)
    return total


def teacher_zero_shot_logits(teacher_feats: torch.Tensor, agg: torch.Tensor, tau: float = ZERO_SHOT_TAU):
    return F.normalize(teacher_feats, dim=-1) @ F.normalize(agg, dim=-1).T / tau


def init_student(config: DistillConfig, embed_dim: int, num_classes: int, image_size: int, seed: int | None = None):
    torch.manual_seed((config.seed if seed is None else seed) % 2**63)
    return StudentModel(embed_dim, num_classes, config.arch, config.width, image_size,
                        with_head=config.mode == "vanilla_kd")


@dataclass
class StudentCheckpoint:
    model: StudentModel
    config: DistillConfig
    store_name: str
    store_hash: str
    teacher_hash: str
    loss_trace: list[float] = field(default_factory=list)


def train_student(
    train_data: DomainDataset,
    teacher: TeacherModel,
    store: EmbeddingStore,
    config: DistillConfig,
    *,
    images: np.ndarray | None = None,
    teacher_feats: torch.Tensor | None = None,
) -> StudentCheckpoint:
    """Adam on the student; returns the checkpoint and per-epoch mean losses."""
    if len(train_data) == 0:
        raise ValueError("cannot distill from an empty training set")
    t_hash = parameter_hash(teacher)
    if store.teacher_hash != t_hash:
        raise ProvenanceError(
            f"store {store.name!r} was built with teacher {str(store.teacher_hash)[:12]}, not {t_hash[:12]}"
        )
    if store.dim != teacher.embed_dim:
        raise ShapeError(f"store dim {store.dim} != teacher dim {teacher.embed_dim}")
    store_hash = store.content_hash()
    if images is None:
        with access_scope(stage="stage2"):
            images = train_data.load_images()
    x_all = images_to_tensor(images)
    labels = torch.as_tensor(train_data.labels())
    if teacher_feats is None:
        with torch.no_grad():
            teacher_feats = torch.cat([teacher.encode_image(x_all[i : i + 256]) for i in range(0, len(x_all), 256)])

    student = init_student(config, teacher.embed_dim, len(store.class_names), x_all.shape[-1])
    trace: list[float] = []
    if config.epochs > 0:
        opt = torch.optim.Adam(student.parameters(), lr=config.learning_rate)
        steps = config.epochs * math.ceil(len(labels) / config.batch_size)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed % 2**63, 0x52]))
        kd_logits = teacher_zero_shot_logits(teacher_feats, store.matrix) if config.mode == "vanilla_kd" else None
        w_img, w_txt = config.loss_weights()
        student.train()
        for _ in range(config.epochs):
            order = torch.as_tensor(rng.permutation(len(labels)))
            running = 0.0
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                if config.mode == "vanilla_kd":
                    logits = student.logits(x_all[idx])
                    loss = loss_vanilla_kd(logits, kd_logits[idx], config.kd_temperature) + F.cross_entropy(
                        logits, labels[idx]
                    )
                else:
                    loss = distill_objective(
                        student, x_all[idx], labels[idx], teacher_feats[idx], store.matrix, w_img, w_txt
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                running += loss.item() * len(idx)
            trace.append(running / len(labels))
    student.eval()
    return StudentCheckpoint(student, config, store.name, store_hash, t_hash, trace)


def cosine_argmax(feats: torch.Tensor, matrix: torch.Tensor) -> np.ndarray:
    """argmax_i cos(feats, matrix_i); exact ties resolve to the lowest class id."""
    if feats.shape[-1] != matrix.shape[-1]:
        raise ShapeError(f"feature dim {feats.shape[-1]} != store dim {matrix.shape[-1]}")
    sims = F.normalize(feats.to(torch.float64), dim=-1) @ F.normalize(matrix.to(torch.float64), dim=-1).T
    return sims.argmax(dim=1).numpy()  # torch.argmax returns the first maximal index


def _as_input(images) -> torch.Tensor:
    if isinstance(images, np.ndarray):
        return images_to_tensor(images)
    return images


def predict(student: StudentModel | StudentCheckpoint, store: EmbeddingStore, images) -> np.ndarray:
    if isinstance(student, StudentCheckpoint):
        student = student.model
    with torch.no_grad():
        x = _as_input(images)
        if student.head is not None:
            return student.logits(x).argmax(dim=1).numpy()
        return cosine_argmax(student(x), store.matrix)


def zero_shot_predict(teacher: TeacherModel, store: EmbeddingStore, images) -> np.ndarray:
    with torch.no_grad():
        return cosine_argmax(teacher.encode_image(_as_input(images)), store.matrix)


# -- checkpoints ---------------------------------------------------------------------


def save_student(ckpt: StudentCheckpoint, path: str | Path, meta: dict | None = None) -> None:
    header = {
        "kind": "student",
        "mode": ckpt.config.mode,
        "embedding_source": ckpt.config.embedding_source,
        "config": asdict(ckpt.config),
        "arch": ckpt.model.spec,
        "store_name": ckpt.store_name,
        "store_hash": ckpt.store_hash,
        "teacher_hash": ckpt.teacher_hash,
        "loss_trace": ckpt.loss_trace,
        "meta": meta or {},
    }
    write_container(path, header, {k: v.detach().float().numpy() for k, v in ckpt.model.state_dict().items()})


def load_student(path: str | Path) -> tuple[StudentCheckpoint, dict]:
    header, tensors = read_container(path)
    if header.get("kind") != "student":
        raise CheckpointError(f"{path} is not a student checkpoint", field="kind")
    spec = header["arch"]
    model = StudentModel(
        spec["embed_dim"], spec["num_classes"], spec["arch"], spec["width"], spec["image_size"],
        tuple(spec["conv_widths"]) if spec.get("conv_widths") else None, spec["with_head"],
    )
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    config = DistillConfig(**header["config"])
    return (
        StudentCheckpoint(model, config, header["store_name"], header["store_hash"], header["teacher_hash"],
                          list(header["loss_trace"])),
        header,
    )
