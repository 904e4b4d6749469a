import numpy as np
import pytest
import torch

from dipt.data import DatasetSpec, generate_dataset
from dipt.teacher import build_tokenizer, init_teacher, pretrain_teacher

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """4 domains x 2 classes x 12 images at 32px."""
    spec = DatasetSpec(num_domains=4, num_classes=2, samples_per_class_per_domain=12, image_size=32, seed=11)
    return generate_dataset(spec, tmp_path_factory.mktemp("small"))


@pytest.fixture(scope="session")
def small_images(small_dataset):
    return small_dataset.load_images()


@pytest.fixture(scope="session")
def trained_teacher(small_dataset, small_images):
    return pretrain_teacher(small_dataset, epochs=20, seed=0, images=small_images, width=32)


@pytest.fixture
def random_teacher():
    """Untrained width-16 teacher over the default bank vocabulary."""
    tok = build_tokenizer(["normal lymph node", "tumor metastasis"])
    return init_teacher(tok, seed=5, width=16, heads=4, image_size=32, conv_channels=(4, 4, 4, 4)).freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting -------------------------------------------------------------
# test_acceptance.py records one verdict line per criterion; they are printed after the run.

_CRITERIA: dict[str, list[str]] = {}


@pytest.fixture(scope="session")
def criterion_log():
    def record(criterion: str, ok: bool, detail: str) -> None:
        _CRITERIA.setdefault(criterion, []).append(f"{'PASS' if ok else 'FAIL'}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_CRITERIA, key=lambda c: int(c.split()[1])):
        for line in _CRITERIA[criterion]:
            terminalreporter.write_line(f"{criterion:<13} {line}")
