"""Per-class prompt template banks and their aggregated (mean) text embeddings."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from .teacher import LengthError, TeacherModel

BANK_TEMPLATES = (
    "a patch of {}",
    "an image of {} tissue",
    "a histopathology image of {}",
    "a microscopy slide showing {}",
    "a tissue sample of {}",
    "an h&e stained patch of {}",
    "a close up view of {}",
    "a pathology image with {}",
)


@dataclass(frozen=True)
class PromptTemplateBank:
    class_names: tuple[str, ...]
    templates: tuple[tuple[str, ...], ...]  # templates[i] are the M prompts of class i

    def __post_init__(self):
        if len(self.class_names) != len(self.templates):
            raise ValueError("one template list per class required")
        sizes = {len(t) for t in self.templates}
        if len(sizes) != 1 or 0 in sizes:
            raise ValueError(f"every class needs the same number M >= 1 of templates, got sizes {sorted(sizes)}")
        if any(not p.strip() for ts in self.templates for p in ts):
            raise ValueError("templates must be nonempty")

    @property
    def m(self) -> int:
        return len(self.templates[0])

    def to_json(self) -> dict:
        return {"class_names": list(self.class_names), "templates": dict(zip(self.class_names, map(list, self.templates)))}

    @classmethod
    def from_json(cls, obj: dict) -> "PromptTemplateBank":
        names = tuple(obj["class_names"])
        return cls(names, tuple(tuple(obj["templates"][n]) for n in names))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PromptTemplateBank":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def default_bank(class_names: Sequence[str], m: int = 8) -> PromptTemplateBank:
    names = tuple(class_names)
    if not names:
        raise ValueError("class_names must be nonempty")
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate class names: {list(names)}")
    if not 1 <= m <= len(BANK_TEMPLATES):
        raise ValueError(f"m must be in [1, {len(BANK_TEMPLATES)}]")
    return PromptTemplateBank(names, tuple(tuple(t.format(n) for t in BANK_TEMPLATES[:m]) for n in names))


def generic_prompt_bank(class_names: Sequence[str]) -> PromptTemplateBank:
    """Single generic prompt per class ("a patch of {class}")."""
    return default_bank(class_names, m=1)


def compute_aggregated_embeddings(teacher: TeacherModel, bank: PromptTemplateBank) -> torch.Tensor:
    """Row i is the plain mean of the M encoded templates of class i (no renormalisation)."""
    tok = teacher.tokenizer
    for ts in bank.templates:
        for p in ts:
            if not tok.fits(p):
                raise LengthError(f"template {p!r} exceeds max_length {tok.max_length}")
    flat = [p for ts in bank.templates for p in ts]
    with torch.no_grad():
        enc = teacher.encode_texts(flat)
    return enc.view(len(bank.class_names), bank.m, -1).mean(dim=1)
