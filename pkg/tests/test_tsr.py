import math

import numpy as np
import pytest
import torch

from textcue.corpus import iter_examples
from textcue.diffops import grad_check, module_grad_check
from textcue.embed import Providers
from textcue.tsr import (TSR, Adapter, MatchBatch, ResidualCrossAttention, TsrConfig,
                         candidate_softmax,
                         make_training_batch, masked_mean, match_logits, select_stream, tsr_loss)

from conftest import tiny_corpus_config

SMALL = TsrConfig(dim=8, hidden=16, attn_dim=8)


def test_config_invariants():
    with pytest.raises(ValueError):
        TsrConfig(heads=2)
    with pytest.raises(ValueError):
        TsrConfig(dim=0)
    assert (TsrConfig().dim, TsrConfig().hidden) == (512, 2048)


def test_adapter_cases():
    a = Adapter(512, 2048)
    with torch.no_grad():
        a.fc1.bias.zero_()
        a.fc2.bias.zero_()
    assert torch.all(a(torch.zeros(3, 512)) == 0)
    assert a(torch.randn(5, 512)).shape == (5, 512)
    with pytest.raises(ValueError):
        a(torch.randn(5, 256))
    small = Adapter(4, 6).double()
    x = torch.randn(3, 4, dtype=torch.float64)
    assert module_grad_check(small, lambda f: f(x).pow(2).sum()) <= 1e-4


def test_cross_attention_single_positions():
    torch.manual_seed(0)
    ca = ResidualCrossAttention(8, 8).double()
    for v in (ca.v_t, ca.v_s):
        torch.nn.init.normal_(v.weight)
        torch.nn.init.normal_(v.bias)
    xt, xs = torch.randn(1, 1, 8, dtype=torch.float64), torch.randn(1, 1, 8, dtype=torch.float64)
    mt, ms = ca(xt, xs)
    m_o = ca.v_s(xs)[:, 0] + ca.v_t(xt)[:, 0]
    assert torch.allclose(mt, xt[:, 0] + m_o) and torch.allclose(ms, xs[:, 0] + m_o)


def test_cross_attention_zero_value_init_reduces_to_pooling():
    ca = ResidualCrossAttention(8, 8)
    xt, xs = torch.randn(2, 3, 8), torch.randn(2, 7, 8)
    mt, ms = ca(xt, xs)
    assert torch.equal(mt, xt.mean(1)) and torch.equal(ms, xs.mean(1))
    with pytest.raises(ValueError):
        ca(xt[:, :0], xs)


def test_cross_attention_mask_ignores_padding():
    torch.manual_seed(1)
    ca = ResidualCrossAttention(8, 8)
    torch.nn.init.normal_(ca.v_t.weight)
    torch.nn.init.normal_(ca.v_s.weight)
    xt, xs = torch.randn(1, 2, 8), torch.randn(1, 5, 8)
    padded = torch.cat([xt, torch.randn(1, 3, 8) * 100], 1)
    mask = torch.tensor([[True, True, False, False, False]])
    a = ca(xt, xs)
    b = ca(padded, xs, mask)
    assert torch.allclose(a[0], b[0], atol=1e-5) and torch.allclose(a[1], b[1], atol=1e-5)


def test_tsr_block_gradient():
    torch.manual_seed(2)
    model = TSR(SMALL).double()
    for v in (model.cross.v_t, model.cross.v_s):
        torch.nn.init.normal_(v.weight, std=0.3)
    t = torch.randn(2, 3, 8, dtype=torch.float64)
    c = torch.randn(2, 3, 4, 8, dtype=torch.float64)
    y = torch.tensor([[1.0, 0, 0], [1.0, 0, 0]], dtype=torch.float64)
    assert module_grad_check(model, lambda f: tsr_loss(f(t, c), y), max_coords=6) <= 1e-4


def test_match_logits_cases():
    model = TSR(SMALL)
    text = np.random.default_rng(0).standard_normal((2, 8))
    one = match_logits(model, text, [np.ones((4, 8))])
    assert torch.allclose(one, torch.tensor([1.0]))
    c = np.random.default_rng(1).standard_normal((4, 8))
    p = match_logits(model, text, [c, c.copy()])
    assert torch.allclose(p, torch.tensor([0.5, 0.5]))
    with pytest.raises(ValueError):
        match_logits(model, text, [])


def test_softmax_closed_form():
    p = candidate_softmax(torch.tensor([math.log(3.0), 0.0], dtype=torch.float64))
    assert torch.allclose(p, torch.tensor([0.75, 0.25], dtype=torch.float64), atol=1e-9)


def test_probabilities_and_equivariance():
    torch.manual_seed(3)
    model = TSR(SMALL)
    r = np.random.default_rng(2)
    text = r.standard_normal((3, 8))
    for n in (1, 2, 5):
        cands = [r.standard_normal((6, 8)) for _ in range(n)]
        p = match_logits(model, text, cands).double()
        assert torch.all(p >= 0) and abs(p.sum().item() - 1) < 1e-6
        perm = r.permutation(n)
        q = match_logits(model, text, [cands[i] for i in perm]).double()
        assert torch.equal(q, p[perm])
    model.double()
    cands = [r.standard_normal((6, 8)) for _ in range(4)]
    t64 = torch.as_tensor(text)[None]
    p = model(t64, torch.as_tensor(np.stack(cands))[None])[0]
    perm = r.permutation(4)
    q = model(t64, torch.as_tensor(np.stack([cands[i] for i in perm]))[None])[0]
    assert torch.equal(q, p[perm]) and abs(p.sum().item() - 1) < 1e-9


def test_loss_cases():
    assert tsr_loss(torch.tensor([0.5]), torch.tensor([1.0])).item() == pytest.approx(math.log(2))
    assert tsr_loss(torch.tensor([1 - 1e-7]), torch.tensor([1.0])).item() == pytest.approx(0, abs=1e-6)
    assert tsr_loss(torch.tensor([0.0, 1.0]), torch.tensor([0.0, 1.0])).item() >= 0
    y = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    assert grad_check(lambda p: tsr_loss(p, y), [torch.tensor([0.3, 0.5, 0.2], dtype=torch.float64)]) <= 1e-4


def test_training_batch_construction():
    prov = Providers.stub()
    ex2 = next(iter_examples(tiny_corpus_config(), 0, "train"))
    b = make_training_batch(ex2, prov, k_neg=0)
    assert len(b.candidates) == 2 and b.labels.tolist() == [1, 0]
    ex3 = next(iter_examples(tiny_corpus_config(n_interferers=2), 0, "train"))
    pool = [ex2.target]
    b3 = make_training_batch(ex3, prov, k_neg=1, negative_pool=pool)
    assert len(b3.candidates) == 4 and b3.labels.sum() == 1
    with pytest.raises(ValueError):
        make_training_batch(ex3, prov, k_neg=1, negative_pool=[])
    many = [e.target for e in iter_examples(tiny_corpus_config(), 0, "valid")]
    x = make_training_batch(ex2, prov, 2, many, np.random.default_rng(4))
    y = make_training_batch(ex2, prov, 2, many, np.random.default_rng(4))
    assert all(np.array_equal(a, b) for a, b in zip(x.candidates, y.candidates))
    with pytest.raises(ValueError):
        MatchBatch(b.text_seq, b.candidates, np.array([1.0, 1.0]))


def test_select_stream_cases():
    prov = Providers.stub(dim=8)
    model = TSR(SMALL)
    ex = next(iter_examples(tiny_corpus_config(), 0, "train"))
    idx, p = select_stream(model, ex.prompt, [ex.target], prov)
    assert idx == 0 and p.tolist() == [1.0]
    idx, p = select_stream(model, ex.prompt, [ex.target, ex.target], prov)
    assert idx == 0
    with pytest.raises(ValueError):
        select_stream(model, ex.prompt, [], prov)


def test_masked_mean():
    x = torch.arange(6.0).reshape(1, 3, 2)
    assert torch.equal(masked_mean(x, torch.tensor([[True, False, True]])), torch.tensor([[2.0, 3.0]]))
