import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from dipt.prompts import compute_aggregated_embeddings, default_bank
from dipt.stage1 import (
    Stage1Config,
    build_prompt,
    domain_class_embeddings,
    full_loss,
    init_domain_tokens,
    load_tokens,
    loss_ds,
    loss_g,
    save_tokens,
    teacher_image_features,
    train_domain_prompts,
)
from dipt.teacher import ShapeError, parameter_hash


@pytest.fixture(scope="module")
def agg_small(trained_teacher, small_dataset):
    return compute_aggregated_embeddings(trained_teacher, default_bank(small_dataset.class_names))


def test_init_tokens_deterministic_and_shaped():
    a = init_domain_tokens(3, 64, seed=9)
    assert a.tokens.shape == (3, 64) and a.k == 3
    assert torch.equal(a.tokens, init_domain_tokens(3, 64, seed=9).tokens)
    assert not torch.equal(a.tokens, init_domain_tokens(3, 64, seed=10).tokens)


def test_init_tokens_statistics():
    t = init_domain_tokens(4, 4096, seed=0, init_std=0.02).tokens.double()
    se = 0.02 / math.sqrt(t.numel())
    assert abs(float(t.mean())) < 3 * se
    assert float(t.std()) == pytest.approx(0.02, rel=0.05)


def test_init_tokens_rejects_k0():
    with pytest.raises(ValueError, match="k must be"):
        init_domain_tokens(0, 8, seed=0)
    with pytest.raises(ValueError):
        Stage1Config(k=0)


def test_build_prompt_structure():
    tokens = torch.randn(2, 8)
    agg = torch.randn(3, 8)
    p0, p2 = build_prompt(tokens, 0, agg), build_prompt(tokens, 2, agg)
    assert p0.shape == (3, 8)
    assert torch.equal(p0[-1], agg[0]) and torch.equal(p2[-1], agg[2])
    assert torch.equal(p0[:2], p2[:2])
    with pytest.raises(ShapeError):
        build_prompt(torch.randn(2, 7), 0, agg)
    with pytest.raises(IndexError):
        build_prompt(tokens, 3, agg)


def test_domain_embeddings_unit_norm_and_reproducible(random_teacher):
    agg = F.normalize(torch.randn(2, 16), dim=-1)
    tok = init_domain_tokens(2, 16, seed=1, domain_id=4)
    e1 = domain_class_embeddings(random_teacher, tok, agg)
    e2 = domain_class_embeddings(random_teacher, tok, agg)
    assert e1.embeddings.shape == (2, 16) and e1.domain_id == 4
    np.testing.assert_allclose(e1.embeddings.norm(dim=-1).numpy(), 1.0, atol=1e-6)
    assert torch.equal(e1.embeddings, e2.embeddings)
    assert e1.teacher_hash == parameter_hash(random_teacher)


def test_row_i_is_encoding_of_prompt_i(random_teacher):
    agg = F.normalize(torch.randn(2, 16), dim=-1)
    tok = init_domain_tokens(2, 16, seed=1)
    e = domain_class_embeddings(random_teacher, tok, agg).embeddings
    for i in range(2):
        single = random_teacher.encode_text(build_prompt(tok.tokens, i, agg))
        assert (single - e[i]).abs().max() <= 1e-6


def test_perturbing_first_token_changes_every_row(random_teacher):
    agg = F.normalize(torch.randn(3, 16, generator=torch.Generator().manual_seed(0)), dim=-1)
    tok = init_domain_tokens(2, 16, seed=2)
    base = domain_class_embeddings(random_teacher, tok, agg).embeddings
    bumped = tok.tokens.clone()
    bumped[0] += 1e-3
    moved = domain_class_embeddings(random_teacher, type(tok)(0, bumped), agg).embeddings
    assert bool(((moved - base).abs().amax(dim=1) > 0).all())


def test_loss_ds_uniform_logits_is_log_nc():
    feats = torch.tensor([[1.0, 0.0, 0.0, 0.0, 0.0]] * 3, dtype=torch.float64)
    e = torch.zeros(4, 5, dtype=torch.float64)
    e[:, 1] = 1.0  # every class orthogonal to every image: all logits 0
    for tau in (0.01, 1.0, 7.0):
        assert float(loss_ds(feats, torch.tensor([0, 1, 3]), e, tau)) == pytest.approx(math.log(4), abs=1e-12)


def _two_class_pair(cos_true, cos_other):
    # unit image feature x and class vectors with prescribed cosines to it
    x = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    e = torch.tensor([[cos_true, math.sqrt(1 - cos_true**2), 0.0],
                      [cos_other, 0.0, math.sqrt(1 - cos_other**2)]], dtype=torch.float64)
    return x, e


def test_loss_ds_hand_values():
    x, e = _two_class_pair(0.9, 0.1)
    assert float(loss_ds(x, torch.tensor([0]), e, 0.01)) < 1e-30
    assert float(loss_ds(x, torch.tensor([0]), e, 1.0)) == pytest.approx(math.log1p(math.exp(-0.8)), abs=1e-12)


def test_loss_ds_errors():
    with pytest.raises(ValueError):
        loss_ds(torch.zeros(0, 3), torch.zeros(0, dtype=torch.long), torch.eye(3), 0.1)
    with pytest.raises(ValueError):
        loss_ds(torch.ones(1, 3), torch.tensor([0]), torch.eye(3), 0.0)
    with pytest.raises(IndexError):
        loss_ds(torch.ones(1, 3), torch.tensor([3]), torch.eye(3), 0.1)


def test_loss_g_values():
    agg = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
    assert float(loss_g(agg * 3, agg)) == pytest.approx(0.0, abs=1e-7)
    assert float(loss_g(torch.tensor([[0.0, 1.0], [1.0, 0.0]]), agg)) == pytest.approx(1.0)
    assert float(loss_g(torch.tensor([[2.0, 0.0], [1.0, 0.0]]), agg)) == pytest.approx(0.5)
    assert float(loss_g(-agg, agg)) == pytest.approx(2.0)


def test_loss_g_zero_norm_raises():
    with pytest.raises(FloatingPointError):
        loss_g(torch.zeros(2, 3), torch.ones(2, 3))


def test_train_rejects_mixed_domains(trained_teacher, small_dataset, agg_small):
    with pytest.raises(ValueError, match="per-domain"):
        train_domain_prompts(small_dataset.filter([0, 1]), trained_teacher, agg_small, Stage1Config(steps=1))


def test_steps0_returns_init(trained_teacher, small_dataset, agg_small):
    res = train_domain_prompts(small_dataset.filter([1]), trained_teacher, agg_small, Stage1Config(steps=0, seed=3))
    assert torch.equal(res.tokens.tokens, init_domain_tokens(2, trained_teacher.token_dim, 3).tokens)
    assert res.loss_trace == []


def test_training_lowers_loss_and_keeps_teacher_frozen(trained_teacher, small_dataset, agg_small):
    part = small_dataset.filter([2])
    before_hash, agg_before = parameter_hash(trained_teacher), agg_small.clone()
    cfg = Stage1Config(steps=60, learning_rate=5e-3, seed=0)
    res = train_domain_prompts(part, trained_teacher, agg_small, cfg)
    feats = teacher_image_features(trained_teacher, part.load_images())
    init = init_domain_tokens(cfg.k, trained_teacher.token_dim, cfg.seed)
    labels = part.labels()
    assert full_loss(trained_teacher, res.tokens.tokens, agg_small, feats, labels, 0.01) < full_loss(
        trained_teacher, init.tokens, agg_small, feats, labels, 0.01)
    assert parameter_hash(trained_teacher) == before_hash
    assert torch.equal(agg_small, agg_before)
    assert len(res.loss_trace) == 60


def test_domain_order_independence(trained_teacher, small_dataset, agg_small):
    cfg = Stage1Config(steps=5, learning_rate=1e-3, seed=4)
    forward = {d: train_domain_prompts(small_dataset.filter([d]), trained_teacher, agg_small, cfg) for d in (0, 3)}
    backward = {d: train_domain_prompts(small_dataset.filter([d]), trained_teacher, agg_small, cfg) for d in (3, 0)}
    for d in (0, 3):
        assert torch.equal(forward[d].tokens.tokens, backward[d].tokens.tokens)


def test_stage1_reads_only_its_domain(trained_teacher, small_dataset, agg_small):
    from dipt.data import record_access

    seen = []
    with record_access(lambda tags, rec: seen.append((tags, rec.domain_id))):
        train_domain_prompts(small_dataset.filter([3]), trained_teacher, agg_small, Stage1Config(steps=1))
    assert seen and all(d == 3 and tags == {"stage": "stage1", "domain": 3} for tags, d in seen)


def test_token_checkpoint_round_trip(tmp_path):
    tok = init_domain_tokens(3, 16, seed=2, domain_id=5)
    cfg = Stage1Config(k=3, seed=2)
    save_tokens(tok, tmp_path / "d5.ckpt", cfg)
    back, header = load_tokens(tmp_path / "d5.ckpt")
    assert torch.equal(back.tokens, tok.tokens) and back.domain_id == 5
    assert header["k"] == 3 and header["seed"] == 2 and header["config"]["k"] == 3
