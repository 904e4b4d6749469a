"""Workspace stages: each reads its upstream artifacts from disk, writes its own, and stamps both.

A stamp (``.stamps/<stage>.json``) records the digests of the stage's inputs (config
sections and upstream stamps) and the sha256 of every file it wrote. Rerunning a stage
whose stamp matches is a no-op; a stamp built from different inputs is refused unless
``force`` is given, and a modified artifact breaks the chain for everything downstream.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import file_sha256
from .config import ExperimentConfig, derive_seed
from .data import (
    DomainDataset,
    RotationPlan,
    access_scope,
    generate_dataset,
    load_manifest,
    make_rotation_plan,
    render_heldout,
)
from .distill import DistillConfig, ProvenanceError, StudentCheckpoint, load_student, save_student, train_student
from .evaluation import (
    RotationHandles,
    compute_metrics,
    emit_report,
    results_from_json,
    results_to_json,
    run_rotation,
)
from .prompts import compute_aggregated_embeddings, default_bank, generic_prompt_bank
from .stage1 import (
    DomainClassEmbeddings,
    Stage1Config,
    evaluate_prompts,
    full_loss,
    init_domain_tokens,
    save_tokens,
    teacher_image_features,
    train_domain_prompts,
)
from .store import EmbeddingStore, aggregate_class_embeddings, load_store, save_store
from .teacher import TeacherModel, load_checkpoint, parameter_hash, pretrain_teacher, save_checkpoint, zero_shot_accuracy

logger = logging.getLogger(__name__)

STAGES = ("gen-data", "pretrain-teacher", "sweep", "tune-prompts", "aggregate", "distill", "evaluate", "report")
PIPELINE = ("gen-data", "pretrain-teacher", "tune-prompts", "aggregate", "distill", "evaluate", "report")
TEACHER_CKPT = "teacher/teacher.ckpt"
HELDOUT_PER_CLASS = 20  # unseen samples per (domain, class) for the teacher zero-shot check


class MissingArtifactError(ProvenanceError):
    """An upstream stage has not been run in this workspace."""


@dataclass(frozen=True)
class StageOutcome:
    stage: str
    skipped: bool
    outputs: tuple[str, ...]

    @property
    def notice(self) -> str:
        return f"{self.stage}: skipped (up to date)" if self.skipped else f"{self.stage}: wrote {len(self.outputs)} files"


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode("utf-8")).hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _fmt(x: float) -> str:
    return f"{x:.6g}"


class Workspace:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def _stamp_path(self, stage: str) -> Path:
        return self.root / ".stamps" / f"{stage}.json"

    def read_stamp(self, stage: str) -> dict | None:
        p = self._stamp_path(stage)
        if not p.exists():
            return None
        return json.loads(p.read_text(encoding="utf-8"))

    def write_stamp(self, stage: str, inputs: dict, outputs: Sequence[Path]) -> dict:
        files = {p.relative_to(self.root).as_posix(): file_sha256(p) for p in sorted(set(outputs))}
        stamp = {"stage": stage, "inputs": inputs, "outputs": files}
        stamp["digest"] = _digest([inputs, files])
        _write_json(self._stamp_path(stage), stamp)
        return stamp

    def verify_outputs(self, stamp: dict) -> None:
        """Raise on the first recorded artifact that is missing or whose bytes changed."""
        for rel, sha in stamp["outputs"].items():
            p = self.path(rel)
            if not p.exists():
                raise ProvenanceError(f"{stamp['stage']}: artifact {rel} is missing (expected sha256 {sha[:12]})")
            actual = file_sha256(p)
            if actual != sha:
                raise ProvenanceError(f"{stamp['stage']}: artifact {rel} hash {actual[:12]} != recorded {sha[:12]}")

    def upstream(self, stage: str, needed_by: str, what: str) -> str:
        """Digest of a verified upstream stage, or a 'run <stage> first' error."""
        stamp = self.read_stamp(stage)
        if stamp is None:
            raise MissingArtifactError(f"{needed_by}: missing {what}; run `dipt {stage}` first")
        self.verify_outputs(stamp)
        return stamp["digest"]

    def clear(self, stage: str) -> None:
        stamp = self.read_stamp(stage)
        if stamp is not None:
            for rel in stamp["outputs"]:
                self.path(rel).unlink(missing_ok=True)
            self._stamp_path(stage).unlink()


def _run_stage(ws: Workspace, stage: str, inputs: dict, build: Callable[[], list[Path]], force: bool) -> StageOutcome:
    stamp = ws.read_stamp(stage)
    if stamp is not None and not force:
        if stamp["inputs"] != inputs:
            key = next(k for k in sorted(set(stamp["inputs"]) | set(inputs)) if stamp["inputs"].get(k) != inputs.get(k))
            raise ProvenanceError(
                f"{stage}: existing artifacts were built from different inputs "
                f"(first mismatch {key}: {str(stamp['inputs'].get(key))[:12]} != {str(inputs.get(key))[:12]}); "
                f"rerun with --force to rebuild"
            )
        ws.verify_outputs(stamp)
        logger.info("%s: skipped (up to date)", stage)
        return StageOutcome(stage, True, tuple(stamp["outputs"]))
    ws.clear(stage)
    outputs = build()
    stamp = ws.write_stamp(stage, inputs, outputs)
    return StageOutcome(stage, False, tuple(stamp["outputs"]))


# -- shared loaders --------------------------------------------------------------------


def _dataset(ws: Workspace) -> DomainDataset:
    return load_manifest(ws.path("data"))


def _teacher(ws: Workspace) -> TeacherModel:
    return load_checkpoint(ws.path(TEACHER_CKPT)).freeze()


def _plan(cfg: ExperimentConfig, dataset: DomainDataset) -> RotationPlan:
    return make_rotation_plan(dataset, cfg.eval.validation_domain)


def _tuned_domains(plan: RotationPlan) -> list[int]:
    return sorted(set().union(*(train for train, _ in plan.rotations)))


def _domain_images(dataset: DomainDataset, domain: int, stage: str, **tags) -> tuple[DomainDataset, np.ndarray]:
    part = dataset.filter([domain])
    with access_scope(stage=stage, domain=domain, **tags):
        return part, part.load_images()


def stage1_config(cfg: ExperimentConfig, domain: int, k: int, learning_rate: float) -> Stage1Config:
    s = cfg.stage1
    seed = derive_seed(cfg.stage_seed("stage1"), f"domain{domain}", f"k{k}", f"lr{learning_rate!r}")
    return Stage1Config(k, learning_rate, s.temperature, s.steps, s.batch_size, seed, s.init_std)


def student_file(method: DistillConfig, test_domain: int) -> str:
    key = hashlib.sha256(json.dumps(method.training_key(), default=str).encode("utf-8")).hexdigest()[:12]
    return f"students/{key}_test{test_domain}.ckpt"


# -- stages ----------------------------------------------------------------------------


def gen_data(cfg: ExperimentConfig, ws: Workspace, force: bool = False) -> StageOutcome:
    spec = cfg.dataset_spec()

    def build():
        out = ws.path("data")
        if out.exists():
            shutil.rmtree(out)
        generate_dataset(spec, out)
        return [p for p in out.rglob("*") if p.is_file()]

    return _run_stage(ws, "gen-data", {"dataset": _digest(spec.to_dict())}, build, force)


def pretrain(cfg: ExperimentConfig, ws: Workspace, force: bool = False) -> StageOutcome:
    data = ws.upstream("gen-data", "pretrain-teacher", "dataset manifest data/manifest.jsonl")
    t = cfg.teacher
    seed = cfg.stage_seed("teacher")
    inputs = {"data": data, "teacher": _digest(asdict(t)), "seed": seed}

    def build():
        dataset, spec = _dataset(ws), cfg.dataset_spec()
        if t.corpus == "disjoint":
            # same domains and classes, sample indices past the held-out check slice
            images, labels, _ = render_heldout(spec, spec.samples_per_class_per_domain,
                                               start=spec.samples_per_class_per_domain + HELDOUT_PER_CLASS)
        else:
            with access_scope(stage="teacher"):
                images = dataset.load_images()
            labels = dataset.labels()
        teacher = pretrain_teacher(dataset, epochs=t.epochs, seed=seed, batch_size=t.batch_size,
                                   learning_rate=t.learning_rate, width=t.width, images=images, labels=labels)
        ckpt = ws.path(TEACHER_CKPT)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(teacher, ckpt, meta={"seed": seed, "data": data})
        agg = compute_aggregated_embeddings(teacher, default_bank(dataset.class_names))
        held, held_labels, held_domains = render_heldout(spec, HELDOUT_PER_CLASS)
        metrics = {
            "parameter_hash": parameter_hash(teacher),
            "corpus": t.corpus,
            "corpus_size": int(len(labels)),
            "heldout_per_class_per_domain": HELDOUT_PER_CLASS,
            "zero_shot_accuracy": zero_shot_accuracy(teacher, agg, held, held_labels),
            "zero_shot_accuracy_by_domain": {
                str(d): zero_shot_accuracy(teacher, agg, held[held_domains == d], held_labels[held_domains == d])
                for d in dataset.domain_ids
            },
        }
        return [ckpt, _write_json(ws.path("teacher/metrics.json"), metrics)]

    return _run_stage(ws, "pretrain-teacher", inputs, build, force)


def _stage1_inputs(cfg: ExperimentConfig, ws: Workspace, needed_by: str) -> dict:
    return {
        "teacher": ws.upstream("pretrain-teacher", needed_by, f"teacher checkpoint {TEACHER_CKPT}"),
        "data": ws.upstream("gen-data", needed_by, "dataset manifest data/manifest.jsonl"),
        "stage1": _digest(asdict(cfg.stage1)),
        "stage1_seed": cfg.stage_seed("stage1"),
        "validation_domain": cfg.eval.validation_domain,
    }


def sweep(cfg: ExperimentConfig, ws: Workspace, force: bool = False) -> StageOutcome:
    """Grid over (k, learning_rate) per domain, scored on the reserved validation domain."""
    inputs = _stage1_inputs(cfg, ws, "sweep")

    def build():
        dataset, teacher = _dataset(ws), _teacher(ws)
        plan = _plan(cfg, dataset)
        agg = compute_aggregated_embeddings(teacher, default_bank(dataset.class_names))
        val, val_images = _domain_images(dataset, plan.validation_domain, "sweep")
        val_feats, val_labels = teacher_image_features(teacher, val_images), val.labels()
        rows, selection = [], {}
        for d in _tuned_domains(plan):
            part, images = _domain_images(dataset, d, "stage1")
            feats = teacher_image_features(teacher, images)
            scored = []
            for k in cfg.stage1.sweep_k:
                for lr in cfg.stage1.sweep_learning_rate:
                    res = train_domain_prompts(part, teacher, agg, stage1_config(cfg, d, k, lr), image_feats=feats)
                    loss, pred = evaluate_prompts(teacher, res.embeddings, agg, val_feats, val_labels,
                                                  cfg.stage1.temperature)
                    f1 = compute_metrics(pred, val_labels, dataset.num_classes).macro_f1
                    rows.append([d, k, lr, loss, f1])
                    scored.append((loss, k, lr))
            _, k_best, lr_best = select_best(scored)
            selection[str(d)] = {"k": k_best, "learning_rate": lr_best}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["domain", "k", "learning_rate", "val_loss", "val_f1"])
        w.writerows([[d, k, repr(lr), _fmt(loss), _fmt(f1)] for d, k, lr, loss, f1 in rows])
        table = ws.path("prompts/sweep.csv")
        table.parent.mkdir(parents=True, exist_ok=True)
        table.write_text(buf.getvalue(), encoding="utf-8")
        return [table, _write_json(ws.path("prompts/selection.json"), selection)]

    return _run_stage(ws, "sweep", inputs, build, force)


def select_best(scored: Sequence[tuple[float, int, float]]) -> tuple[float, int, float]:
    """Lowest validation loss; exact ties go to the smaller k, then the smaller learning rate."""
    if not scored:
        raise ValueError("empty sweep grid")
    return min(scored, key=lambda s: (s[0], s[1], s[2]))


def _store_path(name: str) -> str:
    return f"stores/{name}.json"


def _fresh(path: Path) -> Path:
    # stores are write-once; a rebuild (--force or an interrupted run) replaces them
    path.unlink(missing_ok=True)
    return path


def tune_prompts(cfg: ExperimentConfig, ws: Workspace, force: bool = False) -> StageOutcome:
    inputs = _stage1_inputs(cfg, ws, "tune-prompts")
    use_sweep = cfg.stage1.select == "sweep"
    if use_sweep:
        inputs["sweep"] = ws.upstream("sweep", "tune-prompts", "sweep selection prompts/selection.json")

    def build():
        dataset, teacher = _dataset(ws), _teacher(ws)
        t_hash = parameter_hash(teacher)
        plan = _plan(cfg, dataset)
        outputs = []
        banks = {"agg_template": default_bank(dataset.class_names), "generic_prompt": generic_prompt_bank(dataset.class_names)}
        stores = {}
        for name, bank in banks.items():
            bank_path = ws.path(f"prompts/{name}_bank.json")
            bank_path.parent.mkdir(parents=True, exist_ok=True)
            bank.save(bank_path)
            stores[name] = EmbeddingStore(name, dataset.class_names, compute_aggregated_embeddings(teacher, bank),
                                          {"teacher_hash": t_hash, "templates": bank.m})
            save_store(stores[name], _fresh(ws.path(_store_path(name))))
            outputs += [bank_path, ws.path(_store_path(name))]
        agg = stores["agg_template"].matrix
        selection = json.loads(ws.path("prompts/selection.json").read_text()) if use_sweep else {}
        summary = {"teacher_hash_before": t_hash, "domains": {}}
        for d in _tuned_domains(plan):
            pick = selection.get(str(d), {"k": cfg.stage1.k, "learning_rate": cfg.stage1.learning_rate})
            config = stage1_config(cfg, d, int(pick["k"]), float(pick["learning_rate"]))
            part, images = _domain_images(dataset, d, "stage1")
            feats = teacher_image_features(teacher, images)
            res = train_domain_prompts(part, teacher, agg, config, image_feats=feats)
            init = init_domain_tokens(config.k, teacher.token_dim, config.seed, d, config.init_std)
            labels = part.labels()
            summary["domains"][str(d)] = {
                "k": config.k,
                "learning_rate": config.learning_rate,
                "seed": config.seed,
                "initial_loss": full_loss(teacher, init.tokens, agg, feats, labels, config.temperature),
                "final_loss": full_loss(teacher, res.tokens.tokens, agg, feats, labels, config.temperature),
            }
            tok = ws.path(f"prompts/domain_{d}.ckpt")
            save_tokens(res.tokens, tok, config, meta={"teacher_hash": t_hash})
            store = EmbeddingStore(f"domain_{d}", dataset.class_names, res.embeddings.embeddings,
                                   {"teacher_hash": t_hash, "domain": d, "tokens_sha256": file_sha256(tok)})
            save_store(store, _fresh(ws.path(_store_path(f"domain_{d}"))))
            outputs += [tok, ws.path(_store_path(f"domain_{d}"))]
        summary["teacher_hash_after"] = parameter_hash(teacher)
        if summary["teacher_hash_after"] != t_hash:
            raise RuntimeError("teacher parameters changed during prompt tuning")
        outputs.append(_write_json(ws.path("prompts/stage1.json"), summary))
        return outputs

    return _run_stage(ws, "tune-prompts", inputs, build, force)


def aggregate(cfg: ExperimentConfig, ws: Workspace, force: bool = False) -> StageOutcome:
    """One domain-invariant store per rotation, averaged over that rotation's train domains only."""
    inputs = {
        "prompts": ws.upstream("tune-prompts", "aggregate", "per-domain stores stores/domain_<d>.json"),
        "validation_domain": cfg.eval.validation_domain,
    }

    def build():
        dataset = _dataset(ws)
        plan = _plan(cfg, dataset)
        outputs = []
        for train, test in plan.rotations:
            sources = []
            for d in sorted(train):
                s = load_store(ws.path(_store_path(f"domain_{d}")), dataset.class_names)
                sources.append(DomainClassEmbeddings(d, s.matrix, s.teacher_hash))
            store = aggregate_class_embeddings(sources, dataset.class_names, {"rotation_test_domain": test})
            path = ws.path(_store_path(f"invariant_test{test}"))
            save_store(store, _fresh(path))
            outputs.append(path)
        return outputs

    return _run_stage(ws, "aggregate", inputs, build, force)


def _distill_methods(cfg: ExperimentConfig) -> list[DistillConfig]:
    seen, out = set(), []
    for m in cfg.methods():
        if isinstance(m, DistillConfig) and m.training_key() not in seen:
            seen.add(m.training_key())
            out.append(m)
    return out


class WorkspaceHandles(RotationHandles):
    """Rotation handles backed by the stores and students on disk."""

    def __init__(self, ws: Workspace, dataset: DomainDataset, teacher: TeacherModel, train: bool = False):
        stores = {n: load_store(ws.path(_store_path(n)), dataset.class_names, teacher.embed_dim)
                  for n in ("agg_template", "generic_prompt")}
        super().__init__(dataset, teacher, stores, {})
        self.ws = ws
        self.train = train
        self._feats: dict[int, torch.Tensor] = {}

    def invariant_store(self, train_domains, test_domain):
        store = load_store(self.ws.path(_store_path(f"invariant_test{test_domain}")), self.dataset.class_names,
                           self.teacher.embed_dim)
        if set(store.provenance.get("source_domains", ())) != set(train_domains):
            raise ProvenanceError(f"invariant store for test domain {test_domain} has sources "
                                  f"{store.provenance.get('source_domains')}, expected {sorted(train_domains)}")
        return store

    def student(self, method, train_domains, test_domain, store) -> StudentCheckpoint:
        key = (method.training_key(), test_domain)
        if key in self._students:
            return self._students[key]
        path = self.ws.path(student_file(method, test_domain))
        if self.train:
            train, images = self.images(sorted(train_domains), "stage2", test_domain=test_domain)
            feats = torch.cat([self._teacher_feats(d, images, train) for d in sorted(train_domains)])
            ckpt = train_student(train, self.teacher, store, method, images=images, teacher_feats=feats)
            save_student(ckpt, path, meta={"test_domain": test_domain, "train_domains": sorted(train_domains)})
        else:
            if not path.exists():
                raise MissingArtifactError(f"evaluate: missing student {path.name} for {method.name}; run `dipt distill` first")
            ckpt, _ = load_student(path)
            if ckpt.store_hash != store.content_hash():
                raise ProvenanceError(f"student {path.name} store hash {ckpt.store_hash[:12]} != "
                                      f"{store.content_hash()[:12]} of store {store.name!r}")
        self._students[key] = ckpt
        return ckpt

    def _teacher_feats(self, domain: int, images: np.ndarray, train: DomainDataset) -> torch.Tensor:
        if domain not in self._feats:
            idx = [i for i, r in enumerate(train.records) if r.domain_id == domain]
            self._feats[domain] = teacher_image_features(self.teacher, images[idx])
        return self._feats[domain]


def distill(cfg: ExperimentConfig, ws: Workspace, force: bool = False) -> StageOutcome:
    inputs = {
        "stores": ws.upstream("aggregate", "distill", "invariant stores stores/invariant_test<t>.json"),
        "prompts": ws.upstream("tune-prompts", "distill", "template stores stores/agg_template.json"),
        "teacher": ws.upstream("pretrain-teacher", "distill", f"teacher checkpoint {TEACHER_CKPT}"),
        "methods": _digest([asdict(m) for m in _distill_methods(cfg)]),
        "validation_domain": cfg.eval.validation_domain,
    }

    def build():
        dataset, teacher = _dataset(ws), _teacher(ws)
        t_hash = parameter_hash(teacher)
        plan = _plan(cfg, dataset)
        handles = WorkspaceHandles(ws, dataset, teacher, train=True)
        index = {"teacher_hash_before": t_hash, "students": []}
        ws.path("students").mkdir(parents=True, exist_ok=True)
        for method in _distill_methods(cfg):
            for train, test in plan.rotations:
                store = handles.store_for(method.store_name, train, test)
                handles.student(method, train, test, store)
                index["students"].append({"file": student_file(method, test), "test_domain": test,
                                          "config": asdict(method)})
        index["teacher_hash_after"] = parameter_hash(teacher)
        if index["teacher_hash_after"] != t_hash:
            raise RuntimeError("teacher parameters changed during distillation")
        files = [ws.path(s["file"]) for s in index["students"]]
        return [*files, _write_json(ws.path("students/index.json"), index)]

    return _run_stage(ws, "distill", inputs, build, force)


def evaluate(cfg: ExperimentConfig, ws: Workspace, force: bool = False) -> StageOutcome:
    inputs = {
        "students": ws.upstream("distill", "evaluate", "student checkpoints students/index.json"),
        "stores": ws.upstream("aggregate", "evaluate", "invariant stores stores/invariant_test<t>.json"),
        "methods": _digest([asdict(m) for m in cfg.methods()]),
        "validation_domain": cfg.eval.validation_domain,
    }
    # the whole chain must validate before anything is scored
    for stage in ("gen-data", "pretrain-teacher", "tune-prompts"):
        inputs[stage] = ws.upstream(stage, "evaluate", f"outputs of {stage}")

    def build():
        dataset, teacher = _dataset(ws), _teacher(ws)
        results = run_rotation(_plan(cfg, dataset), cfg.methods(), WorkspaceHandles(ws, dataset, teacher))
        return [_write_json(ws.path("reports/results.json"), results_to_json(results))]

    return _run_stage(ws, "evaluate", inputs, build, force)


def report(cfg: ExperimentConfig, ws: Workspace, force: bool = False) -> StageOutcome:
    inputs = {
        "results": ws.upstream("evaluate", "report", "rotation results reports/results.json"),
        "figures": cfg.eval.figures,
    }

    def build():
        results = results_from_json(json.loads(ws.path("reports/results.json").read_text(encoding="utf-8")))
        return list(emit_report(results, ws.path("reports"), figures=cfg.eval.figures).values())

    return _run_stage(ws, "report", inputs, build, force)


COMMANDS: dict[str, Callable[[ExperimentConfig, Workspace, bool], StageOutcome]] = {
    "gen-data": gen_data,
    "pretrain-teacher": pretrain,
    "sweep": sweep,
    "tune-prompts": tune_prompts,
    "aggregate": aggregate,
    "distill": distill,
    "evaluate": evaluate,
    "report": report,
}


def run_all(cfg: ExperimentConfig, ws: Workspace, force: bool = False) -> list[StageOutcome]:
    stages = list(PIPELINE)
    if cfg.stage1.select == "sweep":
        stages.insert(stages.index("tune-prompts"), "sweep")
    return [COMMANDS[s](cfg, ws, force) for s in stages]

