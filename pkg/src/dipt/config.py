"""Experiment configuration: YAML loading, ``--set`` overrides, and seed derivation.

Sub-seeds are derived from the global seed as the first 8 bytes (big endian,
masked to 63 bits) of ``sha256(f"{global_seed}/{label}")``, where ``label`` is a
slash-joined path such as ``"stage1/domain3/k2/lr5e-05"``. A stage whose own
``seed`` field is set uses that value as its root instead of the global seed,
so changing one stage's seed leaves every other stage's artifacts untouched.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import DatasetSpec
from .distill import DistillConfig
from .evaluation import DEFAULT_ROSTER, ZeroShot


class ConfigValidationError(ValueError):
    pass


def derive_seed(root: int, *labels: Any) -> int:
    text = "/".join([str(root), *map(str, labels)])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big") & (2**63 - 1)


@dataclass
class TeacherSettings:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 2e-3
    width: int = 64
    seed: int | None = None
    # "disjoint": pretrain on fresh renders of every domain that share no sample with the benchmark data;
    # "dataset": pretrain on the generated dataset itself (the teacher then has seen every test image)
    corpus: str = "disjoint"


@dataclass
class Stage1Settings:
    k: int = 2
    learning_rate: float = 5e-5
    temperature: float = 0.01
    steps: int = 500
    batch_size: int = 32
    init_std: float = 0.02
    seed: int | None = None
    sweep_k: list[int] = field(default_factory=lambda: [2, 3, 4])
    sweep_learning_rate: list[float] = field(default_factory=lambda: [5e-6, 5e-5])
    select: str = "config"  # "sweep": tune-prompts uses the per-domain winners of the sweep


@dataclass
class Stage2Settings:
    seed: int | None = None
    methods: list[dict] = field(default_factory=list)


@dataclass
class EvalSettings:
    validation_domain: int = 2
    figures: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: dict = field(default_factory=dict)
    teacher: TeacherSettings = field(default_factory=TeacherSettings)
    stage1: Stage1Settings = field(default_factory=Stage1Settings)
    stage2: Stage2Settings = field(default_factory=Stage2Settings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    workspace: str | None = None

    # -- derived objects ----------------------------------------------------------

    def stage_seed(self, stage: str) -> int:
        own = getattr(getattr(self, stage), "seed", None) if stage != "dataset" else self.dataset.get("seed")
        return own if own is not None else derive_seed(self.seed, stage)

    def dataset_spec(self) -> DatasetSpec:
        d = {k: v for k, v in self.dataset.items() if k != "seed"}
        if "class_names" in d and d["class_names"] is not None:
            d["class_names"] = tuple(d["class_names"])
        return DatasetSpec(**d, seed=self.stage_seed("dataset"))

    def methods(self) -> list:
        if not self.stage2.methods:
            base = list(DEFAULT_ROSTER)
        else:
            base = []
            for m in self.stage2.methods:
                m = dict(m)
                if m.get("mode") == "zero_shot":
                    base.append(ZeroShot(m.get("name", "zero_shot"), m.get("embedding_source", "agg_template")))
                else:
                    base.append(DistillConfig(**m))
        # paired design: every distilled method starts from the same student init and batch order,
        # so differences between rows come from the objective, not from seed noise
        seed = derive_seed(self.stage_seed("stage2"), "student")
        return [dataclasses.replace(m, seed=seed) if isinstance(m, DistillConfig) else m for m in base]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def section_hash(self, *names: str) -> str:
        d = self.to_dict()
        blob = json.dumps({n: d[n] for n in names}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_SECTIONS = {"teacher": TeacherSettings, "stage1": Stage1Settings, "stage2": Stage2Settings, "eval": EvalSettings}


def config_from_dict(d: dict) -> ExperimentConfig:
    d = copy.deepcopy(d or {})
    unknown = set(d) - {f.name for f in dataclasses.fields(ExperimentConfig)}
    if unknown:
        raise ConfigValidationError(f"unknown config keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        section = d.pop(name, None) or {}
        try:
            kwargs[name] = cls(**section)
        except TypeError as exc:
            raise ConfigValidationError(f"{name}: {exc}") from exc
    cfg = ExperimentConfig(**d, **kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    try:
        cfg.dataset_spec()
        cfg.methods()
    except (ValueError, TypeError) as exc:
        raise ConfigValidationError(str(exc)) from exc
    s1 = cfg.stage1
    if not s1.sweep_k or not s1.sweep_learning_rate:
        raise ConfigValidationError("stage1 sweep lists must be nonempty")
    if s1.k < 1 or min(s1.sweep_k) < 1:
        raise ConfigValidationError("stage1.k must be >= 1")
    if s1.learning_rate <= 0 or min(s1.sweep_learning_rate) <= 0 or s1.temperature <= 0 or s1.steps < 0:
        raise ConfigValidationError("stage1 learning rates and temperature must be > 0, steps >= 0")
    if s1.select not in ("config", "sweep"):
        raise ConfigValidationError(f"stage1.select must be 'config' or 'sweep', got {s1.select!r}")
    if cfg.teacher.corpus not in ("disjoint", "dataset"):
        raise ConfigValidationError(f"teacher.corpus must be 'disjoint' or 'dataset', got {cfg.teacher.corpus!r}")
    if cfg.teacher.epochs < 0:
        raise ConfigValidationError("teacher.epochs must be >= 0")


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigValidationError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    return key.strip().split("."), _numeric(yaml.safe_load(raw))


def _numeric(value: Any) -> Any:
    """YAML 1.1 reads exponent floats without a dot (``5e-5``) as strings; recover them, recursively."""
    if isinstance(value, str):
        return float(value) if _FLOAT.fullmatch(value.strip()) else value
    if isinstance(value, list):
        return [_numeric(v) for v in value]
    if isinstance(value, dict):
        return {k: _numeric(v) for k, v in value.items()}
    return value


_FLOAT = re.compile(r"[-+]?(\d+\.?\d*|\.\d+)[eE][-+]?\d+")


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    d = copy.deepcopy(d)
    for item in overrides:
        path, value = parse_override(item)
        node = d
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigValidationError(f"cannot set {'.'.join(path)}: {part} is not a mapping")
        node[path[-1]] = value
    return d


def load_config(path: str | Path | None, overrides: list[str] = (), seed: int | None = None) -> ExperimentConfig:
    d: dict = {}
    if path is not None:
        try:
            d = _numeric(yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {})
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigValidationError(f"cannot read config {path}: {exc}") from exc
    d = apply_overrides(d, list(overrides))
    if seed is not None:
        d["seed"] = seed
    return config_from_dict(d)
