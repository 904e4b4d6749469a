"""Frozen mini vision-language teacher: tokenizer, text/image encoders, pretraining, checkpoints.

The text encoder accepts either token ids or a sequence of continuous token
embeddings. Continuous sequences are wrapped with the bos/eos rows of the token
table and pooled at the eos position, so both input kinds go through the same
computation.
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import CheckpointError, read_container, write_container
from .data import DomainDataset, access_scope, class_morphology, images_to_tensor

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
_WORD = re.compile(r"[a-z0-9&]+")

CAPTION_TEMPLATES = (
    "{}",
    "a photo of {}",
    "an image of {}",
    "a patch of {}",
    "tissue showing {}",
    "a slide with {}",
)


class ShapeError(ValueError):
    pass


class LengthError(ValueError):
    pass


class Tokenizer:
    """Whitespace/word tokenizer with reserved special ids below all word ids."""

    def __init__(self, words: Iterable[str], max_length: int = 16):
        vocab = sorted(set(words) - set(SPECIAL_TOKENS))
        self.itos = list(SPECIAL_TOKENS) + vocab
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        self.max_length = max_length

    @classmethod
    def from_corpus(cls, texts: Iterable[str], max_length: int = 16) -> "Tokenizer":
        words: set[str] = set()
        for t in texts:
            words.update(cls.split(t))
        return cls(words, max_length)

    @staticmethod
    def split(text: str) -> list[str]:
        return _WORD.findall(text.lower())

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def vocab_hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def content_ids(self, text: str) -> list[int]:
        return [self.stoi.get(w, UNK) for w in self.split(text)]

    def fits(self, text: str) -> bool:
        return len(self.content_ids(text)) + 2 <= self.max_length

    def tokenize(self, text: str) -> list[int]:
        ids = self.content_ids(text)[: self.max_length - 2]
        seq = [BOS, *ids, EOS]
        return seq + [PAD] * (self.max_length - len(seq))

    def decode(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            if i == EOS:
                break
            if i in (BOS, PAD):
                continue
            words.append(self.itos[i])
        return " ".join(words)


@dataclass(frozen=True)
class TeacherConfig:
    vocab_size: int
    width: int = 64  # token dim == embedding dim
    heads: int = 4
    layers: int = 2
    max_length: int = 16
    image_size: int = 64
    conv_channels: tuple[int, ...] = (16, 32, 64, 64)
    logit_scale: float = 1.0 / 0.07

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, w = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, w // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(w // self.heads)
        if mask is not None:
            scores = scores.masked_fill(mask, float("-inf"))
        y = scores.softmax(dim=-1) @ v
        return self.out(y.transpose(1, 2).reshape(b, n, w))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))


def conv_block(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
        nn.GroupNorm(1 if c_out < 4 else 4, c_out),
        nn.ReLU(),
        nn.MaxPool2d(2),
    )


class TeacherModel(nn.Module):
    def __init__(self, config: TeacherConfig, tokenizer: Tokenizer | None = None):
        super().__init__()
        self.config = config
        self.tokenizer = tokenizer
        w = config.width
        self.token_embedding = nn.Embedding(config.vocab_size, w)
        self.positional_embedding = nn.Parameter(torch.zeros(config.max_length, w))
        self.blocks = nn.ModuleList(Block(w, config.heads) for _ in range(config.layers))
        self.ln_final = nn.LayerNorm(w)
        self.text_projection = nn.Linear(w, w, bias=False)

        chans = (3, *config.conv_channels)
        # first block is strided so a 64px input reaches 4px after four blocks at low cost
        self.image_encoder = nn.Sequential(
            *(conv_block(chans[i], chans[i + 1], stride=2 if i == 0 else 1) for i in range(len(chans) - 1))
        )
        self.image_projection = nn.Linear(chans[-1], w)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        nn.init.normal_(self.positional_embedding, std=0.01)
        nn.init.normal_(self.text_projection.weight, std=self.config.width**-0.5)

    @property
    def embed_dim(self) -> int:
        return self.config.width

    @property
    def token_dim(self) -> int:
        return self.config.width

    # -- text ---------------------------------------------------------------------

    def _transform(self, x: torch.Tensor, eos_index: torch.Tensor, pad: torch.Tensor | None) -> torch.Tensor:
        n = x.shape[1]
        x = x + self.positional_embedding[:n]
        mask = torch.ones(n, n, dtype=torch.bool, device=x.device).triu(1)[None, None]
        if pad is not None:
            mask = mask | pad[:, None, None, :]
        for block in self.blocks:
            x = block(x, mask)
        x = self.ln_final(x)
        pooled = x[torch.arange(x.shape[0]), eos_index]
        return F.normalize(self.text_projection(pooled), dim=-1)

    def encode_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        squeeze = ids.dim() == 1
        if squeeze:
            ids = ids[None]
        if ids.shape[1] > self.config.max_length:
            raise LengthError(f"token sequence of length {ids.shape[1]} exceeds max_length {self.config.max_length}")
        is_eos = ids == EOS
        if not bool(is_eos.any(dim=1).all()):
            raise ValueError("every token sequence needs an eos id")
        out = self._transform(self.token_embedding(ids), is_eos.int().argmax(dim=1), ids == PAD)
        return out[0] if squeeze else out

    def encode_continuous(self, prompts: torch.Tensor) -> torch.Tensor:
        """Encode continuous sequences of shape (n, d_t) or (B, n, d_t)."""
        squeeze = prompts.dim() == 2
        if squeeze:
            prompts = prompts[None]
        if prompts.dim() != 3 or prompts.shape[-1] != self.token_dim:
            raise ShapeError(f"continuous prompt rows must have dimension {self.token_dim}, got {tuple(prompts.shape)}")
        b, n, _ = prompts.shape
        if n + 2 > self.config.max_length:
            raise LengthError(f"continuous prompt of length {n} (+bos/eos) exceeds max_length {self.config.max_length}")
        table = self.token_embedding.weight
        bos = table[BOS].to(prompts.dtype).expand(b, 1, -1)
        eos = table[EOS].to(prompts.dtype).expand(b, 1, -1)
        x = torch.cat([bos, prompts, eos], dim=1)
        out = self._transform(x, torch.full((b,), n + 1, dtype=torch.long), None)
        return out[0] if squeeze else out

    def encode_text(self, inputs) -> torch.Tensor:
        """Encode token ids (integer tensor / list) or continuous token embeddings (float tensor)."""
        if isinstance(inputs, str):
            inputs = self.tokenizer.tokenize(inputs)
        t = torch.as_tensor(inputs)
        if t.is_floating_point():
            return self.encode_continuous(t)
        return self.encode_tokens(t)

    def embed_lookup(self, ids: Sequence[int]) -> torch.Tensor:
        """Token-table rows of the content ids of a tokenized sequence (bos/eos/pad stripped)."""
        content = []
        for i in list(ids)[1:]:
            if i == EOS:
                break
            content.append(int(i))
        return self.token_embedding.weight[torch.tensor(content, dtype=torch.long)]

    def encode_texts(self, texts: Sequence[str]) -> torch.Tensor:
        ids = torch.tensor([self.tokenizer.tokenize(t) for t in texts], dtype=torch.long)
        return self.encode_tokens(ids)

    # -- image --------------------------------------------------------------------

    def encode_image(self, images) -> torch.Tensor:
        """Encode (B, 3, H, W) float tensors or uint8 (B, H, W, 3) arrays; single images are accepted too."""
        if isinstance(images, np.ndarray):
            images = images_to_tensor(images if images.ndim == 4 else images[None])
            squeeze = False
        else:
            squeeze = images.dim() == 3
            if squeeze:
                images = images[None]
        s = self.config.image_size
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, s, s):
            raise ShapeError(f"expected images of shape (B, 3, {s}, {s}), got {tuple(images.shape)}")
        h = self.image_encoder(images.to(self.image_projection.weight.dtype)).mean(dim=(2, 3))
        out = F.normalize(self.image_projection(h), dim=-1)
        return out[0] if squeeze else out

    def freeze(self) -> "TeacherModel":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def parameter_hash(module: nn.Module) -> str:
    """sha256 over the float32 bytes of every parameter/buffer, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode("utf-8"))
        h.update(t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def build_tokenizer(class_names: Iterable[str], templates: Iterable[str] = (), max_length: int = 16) -> Tokenizer:
    from .prompts import BANK_TEMPLATES

    names = list(class_names)
    corpus = [tpl.format(n) for tpl in (*CAPTION_TEMPLATES, *BANK_TEMPLATES, *templates) for n in names]
    corpus += [tpl.format(class_morphology(i)) for tpl in MORPHOLOGY_TEMPLATES for i in range(len(names))]
    return Tokenizer.from_corpus(corpus, max_length=max_length)


MORPHOLOGY_TEMPLATES = ("{}", "tissue with {}", "a patch showing {}", "an image of {}")
NAME_CAPTION_PROB = 0.2
# Weight of a second contrastive term in which every caption comes back as a continuous token (its own
# detached sentence embedding behind up to MAX_PREFIX random word rows), so h_T learns to read
# embedding-space inputs the way a large pretrained text encoder does.
EMBED_TOKEN_WEIGHT = 0.5
MAX_PREFIX = 4


def neutral_caption(class_id: int, class_name: str, rng: np.random.Generator) -> str:
    """Mostly morphology descriptions; the class name itself appears only occasionally."""
    if rng.random() < NAME_CAPTION_PROB:
        return CAPTION_TEMPLATES[int(rng.integers(len(CAPTION_TEMPLATES)))].format(class_name)
    return MORPHOLOGY_TEMPLATES[int(rng.integers(len(MORPHOLOGY_TEMPLATES)))].format(class_morphology(class_id))


def init_teacher(tokenizer: Tokenizer, seed: int, **overrides) -> TeacherModel:
    torch.manual_seed(seed)
    config = TeacherConfig(vocab_size=len(tokenizer), max_length=tokenizer.max_length, **overrides)
    return TeacherModel(config, tokenizer)


def pretrain_teacher(
    dataset: DomainDataset,
    caption_fn: Callable[[int, str, np.random.Generator], str] = neutral_caption,
    epochs: int = 30,
    seed: int = 0,
    *,
    tokenizer: Tokenizer | None = None,
    batch_size: int = 32,
    learning_rate: float = 2e-3,
    width: int = 64,
    images: np.ndarray | None = None,
    labels: np.ndarray | None = None,
) -> TeacherModel:
    """Symmetric in-batch InfoNCE between images and captions rendered from their class names.

    ``images``/``labels`` replace the dataset's own samples (the dataset then only supplies class names).
    """
    if len(dataset) == 0:
        raise ValueError("cannot pretrain a teacher on an empty dataset")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    tokenizer = tokenizer or build_tokenizer(dataset.class_names)
    if images is None:
        with access_scope(stage="teacher"):
            images = dataset.load_images()
    size = images.shape[1]
    model = init_teacher(tokenizer, seed, width=width, image_size=size)
    if epochs == 0:
        return model.freeze()

    x_all = images_to_tensor(images)
    labels = dataset.labels() if labels is None else np.asarray(labels)
    if len(labels) != len(x_all):
        raise ValueError(f"{len(x_all)} images but {len(labels)} labels")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7EAC]))
    opt = torch.optim.AdamW(model.parameters(), lr=learning_rate, weight_decay=0.01)
    total = epochs * math.ceil(len(labels) / batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=learning_rate, total_steps=total, pct_start=0.1)
    scale = model.config.logit_scale
    model.train()
    for epoch in range(epochs):
        order = rng.permutation(len(labels))
        running = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue
            captions = [caption_fn(int(labels[i]), dataset.class_names[labels[i]], rng) for i in idx]
            img = model.encode_image(x_all[idx])
            txt = model.encode_texts(captions)
            target = torch.arange(len(idx))
            loss = _clip_loss(scale * img @ txt.T, target)
            if EMBED_TOKEN_WEIGHT > 0:
                fed = model.encode_continuous(_embedding_prompts(model, txt.detach(), rng))
                loss = loss + EMBED_TOKEN_WEIGHT * _clip_loss(scale * img @ fed.T, target)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            running += loss.item() * len(idx)
        logger.debug("teacher epoch %d loss %.4f", epoch, running / len(order))
    return model.freeze()


def _clip_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def _embedding_prompts(model: TeacherModel, emb: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """[w_1..w_p, e] per row: p random content-word rows (p shared by the batch) then the embedding."""
    p = int(rng.integers(0, MAX_PREFIX + 1))
    words = torch.as_tensor(rng.integers(len(SPECIAL_TOKENS), model.config.vocab_size, size=(len(emb), p)))
    return torch.cat([model.token_embedding(words), emb[:, None, :]], dim=1)


# -- checkpoint I/O ------------------------------------------------------------------


def save_checkpoint(model: TeacherModel, path: str | Path, meta: dict | None = None) -> None:
    header = {
        "kind": "teacher",
        "d_t": model.token_dim,
        "d_e": model.embed_dim,
        "vocab_hash": model.tokenizer.vocab_hash,
        "vocab": model.tokenizer.itos,
        "arch": model.config.to_dict(),
        "parameter_hash": parameter_hash(model),
        "meta": meta or {},
    }
    tensors = {k: v.detach().cpu().float().numpy() for k, v in model.state_dict().items()}
    write_container(path, header, tensors)


def load_checkpoint(path: str | Path, tokenizer: Tokenizer | None = None) -> TeacherModel:
    header, tensors = read_container(path)
    if header.get("kind") != "teacher":
        raise CheckpointError(f"{path} is not a teacher checkpoint", field="kind")
    for key in ("d_t", "d_e", "vocab_hash", "arch", "vocab"):
        if key not in header:
            raise CheckpointError(f"{path} header lacks {key!r}", field=key)
    if header["d_t"] != header["d_e"]:
        raise CheckpointError("teacher requires d_t == d_e", field="d_t")
    stored = Tokenizer([], max_length=header["arch"]["max_length"])
    stored.itos = list(header["vocab"])
    stored.stoi = {w: i for i, w in enumerate(stored.itos)}
    if stored.vocab_hash != header["vocab_hash"]:
        raise CheckpointError("stored vocabulary does not match its hash", field="vocab_hash")
    if tokenizer is not None and tokenizer.vocab_hash != header["vocab_hash"]:
        raise CheckpointError(
            f"tokenizer vocab hash {tokenizer.vocab_hash[:12]} incompatible with checkpoint "
            f"{header['vocab_hash'][:12]}",
            field="vocab_hash",
        )
    try:
        config = TeacherConfig.from_dict(header["arch"])
    except TypeError as exc:
        raise CheckpointError(f"bad arch record: {exc}", field="arch") from exc
    if config.width != header["d_e"]:
        raise CheckpointError("arch width disagrees with d_e", field="d_e")
    model = TeacherModel(config, tokenizer or stored)
    expected = set(model.state_dict())
    if set(tensors) != expected:
        missing = sorted(expected ^ set(tensors))
        raise CheckpointError(f"parameter table mismatch: {missing[:5]}", field="tensors")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.checkpoint_meta = header.get("meta", {})
    return model.freeze()


def zero_shot_accuracy(model: TeacherModel, class_embeddings: torch.Tensor, images: np.ndarray, labels) -> float:
    with torch.no_grad():
        feats = model.encode_image(images)
        pred = (feats @ F.normalize(class_embeddings, dim=-1).T).argmax(dim=1).numpy()
    return float((pred == np.asarray(labels)).mean())
