import csv
import hashlib
import json
import shutil

import pytest

from dipt.cli import EXIT_OK, EXIT_PROVENANCE, EXIT_VALIDATION, main
from dipt.pipeline import select_best

TINY = """\
seed: 3
dataset: {num_domains: 4, num_classes: 2, samples_per_class_per_domain: 6, image_size: 32}
teacher: {epochs: 2, width: 32}
stage1: {steps: 5, sweep_k: [2, 3, 4], sweep_learning_rate: [5e-6, 5e-5], select: sweep}
stage2:
  methods:
    - {name: ZS, mode: zero_shot}
    - {name: KD, mode: vanilla_kd, embedding_source: agg_template, epochs: 1}
    - {name: RISE, mode: dual, embedding_source: agg_template, epochs: 1}
    - {name: DIPT, mode: dual, embedding_source: dipt_invariant, epochs: 1}
    - {name: DIPT again, mode: dual, embedding_source: dipt_invariant, epochs: 1}
eval: {validation_domain: 1, figures: false}
"""


def _tree(root, skip=()):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and not p.relative_to(root).as_posix().startswith(skip)}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    p.write_text(TINY)
    return p


@pytest.fixture(scope="module")
def built(tiny_config, tmp_path_factory):
    ws = tmp_path_factory.mktemp("ws")
    assert main(["run", "--config", str(tiny_config), "--workspace", str(ws)]) == EXIT_OK
    return ws


@pytest.fixture
def copy_of(built, tmp_path):
    dst = tmp_path / "ws"
    shutil.copytree(built, dst)
    return dst


def _run(cfg, ws, *args):
    return main([*args, "--config", str(cfg), "--workspace", str(ws)])


def test_layout_and_reports(built):
    for d in ("data", "teacher", "prompts", "stores", "students", "reports"):
        assert (built / d).is_dir()
    summary = (built / "reports/summary.csv").read_text().splitlines()
    assert summary[0] == "method,mean_acc,mean_f1,worst_acc,worst_f1"
    assert [l.split(",")[0] for l in summary[1:]] == ["ZS", "KD", "RISE", "DIPT", "DIPT again"]
    detail = list(csv.reader((built / "reports/detail.csv").open()))
    assert len(detail) == 1 + 5 * 3  # validation domain 1 leaves three test domains
    assert sorted({row[1] for row in detail[1:]}) == ["0", "2", "3"]


def test_duplicate_training_configs_share_one_student(built):
    index = json.loads((built / "students/index.json").read_text())
    assert len({s["file"] for s in index["students"]}) == 3 * 3  # KD, RISE, one DIPT student per rotation
    rows = {r[0]: r[1:] for r in csv.reader((built / "reports/summary.csv").open())}
    assert rows["DIPT"] == rows["DIPT again"]


def test_frozen_teacher_recorded(built):
    s1 = json.loads((built / "prompts/stage1.json").read_text())
    idx = json.loads((built / "students/index.json").read_text())
    assert s1["teacher_hash_before"] == s1["teacher_hash_after"] == idx["teacher_hash_before"] == idx[
        "teacher_hash_after"]
    assert sorted(s1["domains"]) == ["0", "2", "3"]


def test_sweep_table_and_selection(built):
    rows = list(csv.DictReader((built / "prompts/sweep.csv").open()))
    assert set(rows[0]) == {"domain", "k", "learning_rate", "val_loss", "val_f1"}
    for d in ("0", "2", "3"):
        mine = [r for r in rows if r["domain"] == d]
        assert len(mine) == 6
        best = select_best([(float(r["val_loss"]), int(r["k"]), float(r["learning_rate"])) for r in mine])
        chosen = json.loads((built / "prompts/selection.json").read_text())[d]
        assert (chosen["k"], chosen["learning_rate"]) == (best[1], best[2])
    s1 = json.loads((built / "prompts/stage1.json").read_text())
    assert all(s1["domains"][d]["k"] == json.loads((built / "prompts/selection.json").read_text())[d]["k"]
               for d in ("0", "2", "3"))


def test_select_best_tie_rules():
    assert select_best([(0.5, 3, 5e-5), (0.5, 2, 5e-5)])[1] == 2
    assert select_best([(0.5, 2, 5e-5), (0.5, 2, 5e-6)])[2] == 5e-6
    assert select_best([(0.7, 4, 1e-3)]) == (0.7, 4, 1e-3)
    assert select_best([(0.5, 4, 1e-3), (0.4, 4, 1e-3)])[0] == 0.4
    with pytest.raises(ValueError):
        select_best([])


def test_rerun_is_idempotent(tiny_config, copy_of, capsys):
    before = _tree(copy_of)
    assert _run(tiny_config, copy_of, "run") == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("skipped (up to date)") == 8
    assert _tree(copy_of) == before
    assert _run(tiny_config, copy_of, "evaluate") == EXIT_OK
    assert "evaluate: skipped (up to date)" in capsys.readouterr().out


def test_missing_teacher_is_named(tiny_config, tmp_path, capsys):
    assert _run(tiny_config, tmp_path, "gen-data") == EXIT_OK
    assert _run(tiny_config, tmp_path, "tune-prompts") == EXIT_PROVENANCE
    err = capsys.readouterr().err
    assert "teacher/teacher.ckpt" in err and "run `dipt pretrain-teacher` first" in err


def test_changed_upstream_config_is_a_provenance_error(tiny_config, copy_of, capsys):
    assert _run(tiny_config, copy_of, "pretrain-teacher", "--set", "teacher.epochs=3") == EXIT_PROVENANCE
    assert "first mismatch" in capsys.readouterr().err


def test_tampered_artifact_is_a_provenance_error(tiny_config, copy_of, capsys):
    store = copy_of / "stores/invariant_test0.json"
    obj = json.loads(store.read_text())
    obj["embeddings"]["normal lymph node"][0] += 0.5
    store.write_text(json.dumps(obj))
    assert _run(tiny_config, copy_of, "evaluate") == EXIT_PROVENANCE
    assert "invariant_test0.json" in capsys.readouterr().err


def test_force_rebuilds_identically(tiny_config, copy_of):
    before = _tree(copy_of, skip=("reports/",))
    assert _run(tiny_config, copy_of, "tune-prompts", "--force") == EXIT_OK
    assert _tree(copy_of, skip=("reports/",)) == before


def test_stage2_seed_leaves_stage1_bytes(tiny_config, copy_of):
    stage1 = lambda t: {k: v for k, v in t.items() if k.startswith(("prompts/", "stores/", "teacher/", "data/"))}
    before = _tree(copy_of)
    assert _run(tiny_config, copy_of, "run", "--set", "stage2.seed=99", "--force") == EXIT_OK
    after = _tree(copy_of)
    assert stage1(after) == stage1(before)
    students = lambda t: {v for k, v in t.items() if k.startswith("students/") and k.endswith(".ckpt")}
    assert students(after).isdisjoint(students(before))


@pytest.mark.parametrize("args", [
    ["--set", "bogus=1"],
    ["--set", "stage1.k=0"],
    ["--set", "stage1.sweep_k=[]"],
    ["--set", "novalue"],
    ["--no-such-flag"],
])
def test_validation_exit_code(tiny_config, tmp_path, args):
    assert _run(tiny_config, tmp_path, "gen-data", *args) == EXIT_VALIDATION


def test_unknown_command_and_missing_config(tmp_path):
    assert main(["frobnicate"]) == EXIT_VALIDATION
    assert main(["gen-data", "--config", str(tmp_path / "nope.yaml"), "--workspace", str(tmp_path)]) == EXIT_VALIDATION


def test_workspace_env_var(tiny_config, tmp_path, monkeypatch):
    monkeypatch.setenv("DIPT_WORKSPACE", str(tmp_path / "envws"))
    assert main(["gen-data", "--config", str(tiny_config)]) == EXIT_OK
    assert (tmp_path / "envws/data/manifest.jsonl").exists()


def test_seed_flag_changes_data(tiny_config, tmp_path):
    assert main(["gen-data", "--config", str(tiny_config), "--workspace", str(tmp_path / "a"), "--seed", "3"]) == 0
    assert main(["gen-data", "--config", str(tiny_config), "--workspace", str(tmp_path / "b"), "--seed", "4"]) == 0
    assert _tree(tmp_path / "a") != _tree(tmp_path / "b")


def test_disjoint_teacher_corpus_reads_no_dataset_image(tiny_config, tmp_path):
    from dipt.data import record_access

    assert _run(tiny_config, tmp_path, "gen-data") == EXIT_OK
    seen = []
    with record_access(lambda tags, rec: seen.append(rec.path)):
        assert _run(tiny_config, tmp_path, "pretrain-teacher") == EXIT_OK
    assert seen == []
    metrics = json.loads((tmp_path / "teacher/metrics.json").read_text())
    assert metrics["corpus"] == "disjoint" and metrics["corpus_size"] == 4 * 2 * 6
    assert set(metrics["zero_shot_accuracy_by_domain"]) == {"0", "1", "2", "3"}
