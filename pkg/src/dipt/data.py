"""Synthetic multi-domain patch datasets, JSONL manifests and rotation plans.

Class identity is carried only by texture geometry and domain identity only by
a photometric transform, so class evidence is domain-invariant by construction.
"""

from __future__ import annotations

import contextlib
import contextvars
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

CAMELYON_CLASSES = ("normal lymph node", "tumor metastasis")
KATHER_CLASSES = (
    "adipose",
    "background",
    "debris",
    "lymphocytes",
    "mucus",
    "smooth muscle",
    "normal colon mucosa",
    "cancer associated stroma",
    "colorectal adenocarcinoma epithelium",
)

MANIFEST_NAME = "manifest.jsonl"
SIDECAR_NAME = "dataset.json"
_RECORD_FIELDS = ("path", "class_id", "class_name", "domain_id")


class DatasetError(ValueError):
    """Invalid dataset spec, manifest schema violation, or missing image."""


@dataclass(frozen=True)
class DatasetSpec:
    num_domains: int = 5
    num_classes: int = 2
    samples_per_class_per_domain: int = 200
    image_size: int = 64
    shift_strength: float = 0.6
    seed: int = 0
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.class_names is not None:
            object.__setattr__(self, "class_names", tuple(self.class_names))
        self.validate()

    def validate(self) -> None:
        checks = [
            ("num_domains", isinstance(self.num_domains, int) and self.num_domains >= 2),
            ("num_classes", isinstance(self.num_classes, int) and self.num_classes >= 2),
            (
                "samples_per_class_per_domain",
                isinstance(self.samples_per_class_per_domain, int) and self.samples_per_class_per_domain >= 1,
            ),
            ("image_size", isinstance(self.image_size, int) and self.image_size >= 16),
            ("shift_strength", 0.0 <= float(self.shift_strength) <= 1.0),
            ("seed", isinstance(self.seed, int) and 0 <= self.seed < 2**64),
        ]
        for name, ok in checks:
            if not ok:
                raise DatasetError(f"invalid DatasetSpec.{name}: {getattr(self, name)!r}")
        if self.class_names is not None and (
            len(self.class_names) != self.num_classes or len(set(self.class_names)) != self.num_classes
        ):
            raise DatasetError(f"invalid DatasetSpec.class_names: {self.class_names!r}")

    def resolved_class_names(self) -> tuple[str, ...]:
        if self.class_names is not None:
            return self.class_names
        if self.num_classes == 2:
            return CAMELYON_CLASSES
        if self.num_classes <= len(KATHER_CLASSES):
            return KATHER_CLASSES[: self.num_classes]
        return tuple(f"tissue type {i}" for i in range(self.num_classes))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["class_names"] = list(self.resolved_class_names())
        return d

    @classmethod
    def camelyon_like(cls, **overrides) -> "DatasetSpec":
        return cls(**{"num_domains": 5, "num_classes": 2, **overrides})

    @classmethod
    def kather_like(cls, **overrides) -> "DatasetSpec":
        return cls(**{"num_domains": 3, "num_classes": 9, **overrides})


@dataclass(frozen=True)
class Record:
    path: str
    class_id: int
    class_name: str
    domain_id: int


@dataclass(frozen=True)
class DomainDataset:
    records: tuple[Record, ...]
    class_names: tuple[str, ...]
    domain_ids: tuple[int, ...]
    root: Path = field(default=Path("."), compare=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def resolve(self, record: Record) -> Path:
        return self.root / record.path

    def filter(self, domains: Iterable[int]) -> "DomainDataset":
        keep = set(domains)
        records = tuple(r for r in self.records if r.domain_id in keep)
        present = tuple(d for d in self.domain_ids if d in keep)
        return DomainDataset(records, self.class_names, present, self.root)

    def labels(self) -> np.ndarray:
        return np.array([r.class_id for r in self.records], dtype=np.int64)

    def load_images(self) -> np.ndarray:
        """Return all images as a uint8 array of shape (N, H, W, 3)."""
        return np.stack([read_image(self, r) for r in self.records]) if self.records else np.zeros((0, 0, 0, 3), np.uint8)


@dataclass(frozen=True)
class RotationPlan:
    validation_domain: int
    rotations: tuple[tuple[frozenset[int], int], ...]

    @property
    def test_domains(self) -> tuple[int, ...]:
        return tuple(test for _, test in self.rotations)


# -- image access logging ------------------------------------------------------------

_scope: contextvars.ContextVar[dict] = contextvars.ContextVar("dipt_access_scope", default={})
_access_hooks: list[Callable[[dict, Record], None]] = []


@contextlib.contextmanager
def access_scope(**tags) -> Iterator[None]:
    """Tag every image read inside the block (e.g. ``stage="stage1", domain=3``)."""
    token = _scope.set({**_scope.get(), **tags})
    try:
        yield
    finally:
        _scope.reset(token)


@contextlib.contextmanager
def record_access(hook: Callable[[dict, Record], None]) -> Iterator[None]:
    _access_hooks.append(hook)
    try:
        yield
    finally:
        _access_hooks.remove(hook)


def read_image(dataset: DomainDataset, record: Record) -> np.ndarray:
    for hook in _access_hooks:
        hook(dict(_scope.get()), record)
    with Image.open(dataset.resolve(record)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


# -- procedural rendering ------------------------------------------------------------

# domain-transform magnitudes at shift_strength = 1
MIX_STD = 0.2
MAX_HUE = 0.8
BRIGHTNESS_STD = 0.08
MAX_CONTRAST = 0.25
DISTRACTOR_MIN, DISTRACTOR_MAX = 0.4, 0.9

_BACKGROUND = np.array([0.93, 0.86, 0.90])  # eosin-tinted glass
_STAIN = np.array([0.38, 0.18, 0.52])  # hematoxylin purple


def _domain_rng(seed: int, domain: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xD0, domain]))


def _image_rng(seed: int, domain: int, class_id: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x1A, domain, class_id, index]))


def domain_transform(seed: int, domain: int, strength: float) -> tuple[np.ndarray, np.ndarray, float]:
    """Return (3x3 color matrix, additive offset, contrast) for one domain.

    Parameters depend only on (seed, domain); magnitude scales linearly with ``strength``.
    """
    rng = _domain_rng(seed, domain)
    mix = rng.normal(0.0, MIX_STD, size=(3, 3))
    angle = rng.uniform(-MAX_HUE, MAX_HUE)
    brightness = rng.normal(0.0, BRIGHTNESS_STD, size=3)
    contrast = rng.uniform(-MAX_CONTRAST, MAX_CONTRAST)
    # hue rotation about the gray axis
    u = np.ones(3) / np.sqrt(3.0)
    k = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    a = strength * angle
    hue = np.eye(3) + np.sin(a) * k + (1 - np.cos(a)) * (k @ k)
    matrix = hue @ (np.eye(3) + strength * mix)
    return matrix, strength * brightness, strength * contrast


def _pattern(kind: int, level: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    if kind == 0:  # scattered round nuclei
        n = 10 + 8 * level
        radius = (0.055 - 0.012 * level) * rng.uniform(0.8, 1.2, size=n)
        cy, cx = rng.uniform(0, 1, size=(2, n))
        d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
        density = np.exp(-d2 / (2 * radius[:, None, None] ** 2)).max(axis=0)
    elif kind == 1:  # oriented fibres
        freq = 3.0 + 2.5 * level + rng.uniform(-0.4, 0.4)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        density = np.clip(0.5 + 0.8 * wave, 0, 1)
    else:  # glandular rings
        freq = 2.5 + 1.5 * level + rng.uniform(-0.3, 0.3)
        cy, cx = rng.uniform(0.25, 0.75, size=2)
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        density = np.clip(0.5 + 0.8 * np.sin(2 * np.pi * freq * r + rng.uniform(0, 2 * np.pi)), 0, 1)
    return density


_KIND_WORDS = ("round nuclei", "fibrous stripes", "glandular rings")
_LEVEL_WORDS = ("sparse", "dense", "fine")


def class_morphology(class_id: int) -> str:
    """Plain-language description of the texture that carries a class's signal."""
    kind, level = class_id % 3, class_id // 3
    return f"{_LEVEL_WORDS[level % 3]} {_KIND_WORDS[kind]}"


def _texture(class_id: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Stain density map in [0, 1]; the dominant geometry is a deterministic function of class_id."""
    kind, level = class_id % 3, class_id // 3
    density = _pattern(kind, level, size, rng)
    # weaker distractor texture of another kind keeps the task from being trivially separable
    other = (kind + 1 + int(rng.integers(0, 2))) % 3
    distractor = _pattern(other, int(rng.integers(0, 3)), size, rng)
    density = np.maximum(density, rng.uniform(DISTRACTOR_MIN, DISTRACTOR_MAX) * distractor)
    density = density * rng.uniform(0.75, 1.0) + rng.normal(0.0, 0.06, size=density.shape)
    return np.clip(density, 0.0, 1.0)


def render_image(spec: DatasetSpec, domain: int, class_id: int, index: int) -> np.ndarray:
    rng = _image_rng(spec.seed, domain, class_id, index)
    density = _texture(class_id, spec.image_size, rng)
    tint = rng.normal(0.0, 0.02, size=3)
    rgb = _BACKGROUND * (1 - density[..., None]) + (_STAIN + tint) * density[..., None]
    matrix, offset, contrast = domain_transform(spec.seed, domain, spec.shift_strength)
    rgb = rgb @ matrix.T
    rgb = (rgb - 0.5) * (1.0 + contrast) + 0.5 + offset
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


# -- dataset I/O ---------------------------------------------------------------------


def generate_dataset(spec: DatasetSpec, output_dir: str | Path) -> DomainDataset:
    spec.validate()
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = spec.resolved_class_names()
    records = []
    for d in range(spec.num_domains):
        for c in range(spec.num_classes):
            sub = out / "images" / f"d{d}" / f"c{c}"
            sub.mkdir(parents=True, exist_ok=True)
            for i in range(spec.samples_per_class_per_domain):
                rel = f"images/d{d}/c{c}/{i:05d}.png"
                Image.fromarray(render_image(spec, d, c, i), mode="RGB").save(out / rel, format="PNG")
                records.append(Record(rel, c, names[c], d))
    dataset = DomainDataset(tuple(records), names, tuple(range(spec.num_domains)), out)
    write_manifest(dataset, out, spec)
    return dataset


def render_heldout(spec: DatasetSpec, per_class: int, domains: Iterable[int] | None = None, start: int | None = None):
    """In-memory images past the generated index range: same domains and classes, unseen samples.

    Sample indices run from ``start`` (default: just past the generated range) for ``per_class`` images.
    """
    spec.validate()
    doms = range(spec.num_domains) if domains is None else domains
    n0 = spec.samples_per_class_per_domain if start is None else start
    if n0 < spec.samples_per_class_per_domain:
        raise DatasetError(f"start {n0} overlaps the generated samples (0..{spec.samples_per_class_per_domain - 1})")
    images, labels, domain_ids = [], [], []
    for d in doms:
        for c in range(spec.num_classes):
            for i in range(n0, n0 + per_class):
                images.append(render_image(spec, d, c, i))
                labels.append(c)
                domain_ids.append(d)
    return np.stack(images), np.array(labels), np.array(domain_ids)


def write_manifest(dataset: DomainDataset, out: str | Path, spec: DatasetSpec | None = None) -> Path:
    out = Path(out)
    lines = [
        json.dumps({k: getattr(r, k) for k in _RECORD_FIELDS}, ensure_ascii=False, separators=(",", ":"))
        for r in dataset.records
    ]
    path = out / MANIFEST_NAME
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    sidecar = {
        "class_names": list(dataset.class_names),
        "domain_ids": list(dataset.domain_ids),
        "spec": spec.to_dict() if spec is not None else None,
    }
    (out / SIDECAR_NAME).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_manifest(path: str | Path) -> DomainDataset:
    """Load a JSONL manifest (or a directory containing one) and check its invariants."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    root = path.parent
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc

    bindings: dict[int, str] = {}
    records = []
    missing = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        if set(obj) != set(_RECORD_FIELDS):
            raise DatasetError(f"{path}:{lineno}: fields must be exactly {list(_RECORD_FIELDS)}, got {sorted(obj)}")
        rec = Record(str(obj["path"]), int(obj["class_id"]), str(obj["class_name"]), int(obj["domain_id"]))
        if bindings.setdefault(rec.class_id, rec.class_name) != rec.class_name:
            raise DatasetError(
                f"{path}:{lineno}: class_id {rec.class_id} bound to both "
                f"{bindings[rec.class_id]!r} and {rec.class_name!r}"
            )
        if not (root / rec.path).is_file():
            missing.append(rec.path)
        records.append(rec)
    if missing:
        raise DatasetError(f"missing image files: {', '.join(missing)}")

    sidecar_path = root / SIDECAR_NAME
    if sidecar_path.exists():
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
        class_names = tuple(sidecar["class_names"])
        domain_ids = tuple(sidecar["domain_ids"])
    else:
        n = max(bindings) + 1 if bindings else 0
        class_names = tuple(bindings.get(i, f"class {i}") for i in range(n))
        domain_ids = tuple(sorted({r.domain_id for r in records}))
    if len(set(class_names)) != len(class_names):
        raise DatasetError(f"duplicate class names in {sidecar_path}")
    for cid, name in bindings.items():
        if cid >= len(class_names) or class_names[cid] != name:
            raise DatasetError(f"class_id {cid} -> {name!r} disagrees with class_names {list(class_names)}")
    return DomainDataset(tuple(records), class_names, domain_ids, root)


def make_rotation_plan(dataset: DomainDataset | Sequence[int], validation_domain: int) -> RotationPlan:
    domains = sorted(dataset.domain_ids if isinstance(dataset, DomainDataset) else set(dataset))
    if validation_domain not in domains:
        raise DatasetError(f"validation domain {validation_domain} not present in domains {domains}")
    rest = [d for d in domains if d != validation_domain]
    if len(rest) < 2:
        raise DatasetError(f"need at least 2 non-validation domains for a train/test rotation, got {rest}")
    rotations = tuple((frozenset(d for d in rest if d != test), test) for test in rest)
    return RotationPlan(validation_domain, rotations)


def images_to_tensor(images: np.ndarray):
    """uint8 (N, H, W, 3) -> float32 torch tensor (N, 3, H, W), roughly zero-centred."""
    import torch

    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()
    return (x / 255.0 - 0.5) / 0.25
