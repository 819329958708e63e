import math

import numpy as np
import pytest
import torch

from rqmotion.config import TransformerConfig
from rqmotion.errors import ContractError, TokenIndexError, ValidationError
from rqmotion.numerics import check_gradients
from rqmotion.transformer import RqhcModel, ce_loss, rel_attention, token_accuracy


def small(levels=3, K=16, d=32, heads=None, layers=None, R=8, seed=0):
    torch.manual_seed(seed)
    cfg = TransformerConfig(codebook_size=K, levels=levels, d_model=d, heads=heads or (4,) + (2,) * (levels - 1),
                            layers=layers or (2,) + (1,) * (levels - 1), dropout=0.0, max_relative=R)
    return RqhcModel(cfg).eval()


def attention_oracle(q, k, v, rel, u, vb, R):
    """Explicit per-pair score: content + global content bias + position + global position bias."""
    B, H, T, dh = q.shape
    out = np.zeros_like(q)
    for b in range(B):
        for h in range(H):
            for i in range(T):
                scores = []
                for j in range(i + 1):
                    phi = rel[min(i - j, R), h]
                    s = q[b, h, i] @ k[b, h, j] + u[h] @ k[b, h, j] + q[b, h, i] @ phi + vb[h] @ phi
                    scores.append(s / math.sqrt(dh))
                w = np.exp(np.array(scores) - max(scores))
                w /= w.sum()
                out[b, h, i] = sum(w[j] * v[b, h, j] for j in range(i + 1))
    return out


class TestRelAttention:
    def test_uniform_weights(self):
        T = 6
        zeros = torch.zeros(1, 1, T, 2)
        v = torch.arange(T, dtype=torch.float32).view(1, 1, T, 1).expand(1, 1, T, 2)
        pos = torch.arange(T)
        out = rel_attention(zeros, zeros, v, torch.zeros(4, 1, 2), torch.zeros(1, 2), torch.zeros(1, 2), pos, pos)
        for i in range(T):
            assert out[0, 0, i, 0].item() == pytest.approx(sum(range(i + 1)) / (i + 1))

    def test_single_position(self):
        q, k, v = torch.randn(1, 2, 1, 3), torch.randn(1, 2, 1, 3), torch.randn(1, 2, 1, 3)
        pos = torch.tensor([0])
        out = rel_attention(q, k, v, torch.randn(3, 2, 3), torch.randn(2, 3), torch.randn(2, 3), pos, pos)
        torch.testing.assert_close(out, v)

    def test_four_term_oracle(self):
        g = torch.Generator().manual_seed(0)
        B, H, T, dh, R = 2, 2, 7, 3, 3
        q, k, v = (torch.randn(B, H, T, dh, generator=g, dtype=torch.float64) for _ in range(3))
        rel = torch.randn(R + 1, H, dh, generator=g, dtype=torch.float64)
        u, vb = torch.randn(H, dh, generator=g, dtype=torch.float64), torch.randn(H, dh, generator=g, dtype=torch.float64)
        pos = torch.arange(T)
        got = rel_attention(q, k, v, rel, u, vb, pos, pos).numpy()
        want = attention_oracle(*(t.numpy() for t in (q, k, v, rel, u, vb)), R)
        np.testing.assert_allclose(got, want, atol=1e-10)


def layer_norm(x, ln):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + ln.eps) * ln.weight.detach().numpy() + ln.bias.detach().numpy()


def gelu(x):
    from math import erf
    return np.vectorize(lambda t: 0.5 * t * (1 + erf(t / math.sqrt(2))))(x)


def reference_single_level(model, tokens, prompt):
    """Hand-rolled forward for one level, one layer, one head, from raw weights."""
    W = lambda m: (m.weight.detach().double().numpy(), m.bias.detach().double().numpy())
    emb = model.tok_emb[0].weight.detach().double().numpy()
    n = len(tokens)
    rows = [prompt + model.q_emb[0].detach().double().numpy()]
    prev = [model.bos] + list(tokens[:-1])
    rows += [emb[t] for t in prev]
    x = np.stack(rows)
    blk = model.stacks[0].blocks[0]
    h = layer_norm(x, blk.ln1)
    Wq, bq = W(blk.attn.qkv)
    qkv = h @ Wq.T + bq
    d = x.shape[1]
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    att = attention_oracle(q[None, None], k[None, None], v[None, None], blk.attn.rel.detach().double().numpy(),
                           blk.attn.u.detach().double().numpy(), blk.attn.v.detach().double().numpy(),
                           blk.attn.rel.shape[0] - 1)[0, 0]
    Wo, bo = W(blk.attn.out)
    x = x + att @ Wo.T + bo
    W1, b1 = W(blk.ff[0])
    W2, b2 = W(blk.ff[2])
    x = x + gelu(layer_norm(x, blk.ln2) @ W1.T + b1) @ W2.T + b2
    Wh, bh = W(model.stacks[0].head)
    return (layer_norm(x, model.stacks[0].ln) @ Wh.T + bh)[1:]


class TestForward:
    def test_minimal_reference(self):
        m = small(levels=1, K=5, d=6, heads=(1,), layers=(1,), R=3).double()
        tokens = [0, 3, 3, 1, 4, 2]
        prompt = np.linspace(-1, 1, 6)
        got = m.forward_train(torch.tensor([tokens]), torch.from_numpy(prompt))[0, 0].detach().numpy()
        np.testing.assert_allclose(got, reference_single_level(m, tokens, prompt), atol=1e-9)

    def test_shapes_and_odd_head_split(self):
        m = small(levels=2, d=20, heads=(3, 6), layers=(1, 1))
        out = m.forward_train(torch.randint(0, 16, (2, 2, 9)), torch.randn(20))
        assert out.shape == (2, 2, 9, 17)

    def test_causality(self):
        m = small()
        g = torch.Generator().manual_seed(1)
        p = torch.randn(32)
        with torch.no_grad():
            for _ in range(10):
                grid = torch.randint(0, 17, (1, 3, 12), generator=g)
                base = m.forward_train(grid, p)
                i = int(torch.randint(0, 11, (1,), generator=g))
                pert = grid.clone()
                pert[:, :, i + 1:] = torch.randint(0, 17, pert[:, :, i + 1:].shape, generator=g)
                assert torch.equal(m.forward_train(pert, p)[..., : i + 1, :], base[..., : i + 1, :])

    def test_same_column_coarse_conditioning(self):
        m = small()
        p = torch.randn(32)
        grid = torch.randint(0, 16, (1, 3, 6))
        pert = grid.clone()
        pert[0, 0, 3] = (pert[0, 0, 3] + 1) % 16
        with torch.no_grad():
            a, b = m.forward_train(grid, p), m.forward_train(pert, p)
        assert torch.equal(a[0, 0, :4], b[0, 0, :4])  # level 0 at column 3 must not see its own target
        assert not torch.equal(a[0, 1, 3], b[0, 1, 3])  # finer levels see the coarse token of their column
        assert not torch.equal(a[0, 0, 4], b[0, 0, 4])

    def test_fine_levels_do_not_leak_down(self):
        m = small()
        p = torch.randn(32)
        grid = torch.randint(0, 16, (1, 3, 6))
        pert = grid.clone()
        pert[0, 2] = torch.randint(0, 16, (6,))
        with torch.no_grad():
            a, b = m.forward_train(grid, p), m.forward_train(pert, p)
        assert torch.equal(a[0, :2], b[0, :2])

    def test_batch_symmetry(self):
        m = small()
        grid = torch.randint(0, 16, (3, 3, 7))
        prompts = torch.randn(3, 32)
        with torch.no_grad():
            together = m.forward_train(grid, prompts)
            for i in range(3):
                torch.testing.assert_close(together[i], m.forward_train(grid[i:i + 1], prompts[i])[0], atol=1e-6, rtol=0)

    def test_prompt_matters(self):
        m = small()
        grid = torch.randint(0, 16, (1, 3, 5))
        with torch.no_grad():
            assert not torch.equal(m.forward_train(grid, torch.zeros(32)), m.forward_train(grid, torch.ones(32)))

    def test_build_level_input(self):
        m = small()
        grid = torch.randint(0, 16, (1, 3, 4))
        p = torch.randn(32)
        x0 = m.build_level_input(grid, 0, p)
        assert x0.shape == (1, 5, 32)
        torch.testing.assert_close(x0[0, 0], p + m.q_emb[0])
        torch.testing.assert_close(x0[0, 1], m.tok_emb[0].weight[m.bos])
        torch.testing.assert_close(x0[0, 2], m.tok_emb[0].weight[grid[0, 0, 0]])
        with pytest.raises(ContractError):
            m.build_level_input(grid, 1, p)
        hidden = torch.zeros(1, 5, 32)
        x1 = m.build_level_input(grid, 1, p, hidden)
        torch.testing.assert_close(x1[0, 2], m.tok_emb[1].weight[grid[0, 1, 0]] + m.tok_emb[0].weight[grid[0, 0, 1]])

    def test_token_range(self):
        m = small()
        with pytest.raises(TokenIndexError):
            m.forward_train(torch.full((1, 3, 2), 17), torch.zeros(32))
        with pytest.raises(ContractError):
            m.forward_train(torch.zeros(1, 2, 2, dtype=torch.long), torch.zeros(32))
        with pytest.raises(ValidationError):
            m.forward_train(torch.zeros(1, 3, 2, dtype=torch.long), torch.zeros(31))


class TestLoss:
    def test_uniform_logits(self):
        loss = ce_loss(torch.zeros(2, 3, 5, 65), torch.randint(0, 65, (2, 3, 5)))
        assert float(loss) == pytest.approx(math.log(65), abs=1e-6)

    def test_hand_case(self):
        logits = torch.tensor([[[[2.0, 0.0, -1.0], [0.0, 0.0, 0.0]]]])
        grid = torch.tensor([[[0, 2]]])
        p = math.exp(2) / (math.exp(2) + 1 + math.exp(-1))
        want = (-math.log(p) + math.log(3)) / 2
        assert float(ce_loss(logits, grid)) == pytest.approx(want, abs=1e-6)

    def test_mask(self):
        logits = torch.randn(2, 2, 4, 5)
        grid = torch.randint(0, 5, (2, 2, 4))
        mask = torch.tensor([[1, 1, 0, 0], [1, 0, 0, 0]], dtype=torch.bool)
        sel = [(b, l, c) for b in range(2) for l in range(2) for c in range(4) if mask[b, c]]
        want = np.mean([-float(torch.log_softmax(logits[b, l, c].double(), -1)[grid[b, l, c]]) for b, l, c in sel])
        assert float(ce_loss(logits, grid, mask)) == pytest.approx(want, abs=1e-5)
        with pytest.raises(ValidationError):
            ce_loss(logits, grid, torch.zeros(2, 4, dtype=torch.bool))

    def test_accuracy(self):
        logits = torch.zeros(1, 2, 3, 4)
        logits[0, 0, :, 1] = 1
        grid = torch.tensor([[[1, 1, 0], [2, 2, 2]]])
        assert token_accuracy(logits, grid).tolist() == pytest.approx([2 / 3, 0.0])

    def test_gradient_check(self):
        m = small(levels=2, K=8, d=16, heads=(2, 2), layers=(1, 1), R=4).double()
        grid = torch.randint(0, 9, (1, 2, 5))
        p = torch.randn(16, dtype=torch.float64)
        f = lambda: ce_loss(m.forward_train(grid, p), grid)
        params = [m.q_emb, m.stacks[0].blocks[0].attn.rel, m.stacks[1].blocks[0].attn.u,
                  m.stacks[1].head.bias, m.tok_emb[0].weight]
        assert check_gradients(f, params, eps=1e-6) < 1e-3


def decode_teacher_forced(m, grid, prompt, window):
    cache = m.new_cache(prompt, window)
    out = []
    for i in range(grid.shape[-1]):
        m.forward_step(cache, lambda l, lg: grid[:, l, i])
        out.append(cache.last_logits)
    return torch.stack(out, dim=2), cache


class TestCache:
    def test_matches_full_recompute(self):
        m = small()
        grid = torch.randint(0, 17, (1, 3, 48))
        p = torch.randn(32)
        with torch.no_grad():
            ref = m.forward_train(grid, p)
        inc, cache = decode_teacher_forced(m, grid, p, 1000)
        assert float((inc - ref).abs().max()) < 1e-5
        assert cache.length == 48

    def test_window_matches_masked_recompute(self):
        m = small()
        grid = torch.randint(0, 17, (1, 3, 40))
        p = torch.randn(32)
        with torch.no_grad():
            ref = m.forward_train(grid, p, window=5)
            full = m.forward_train(grid, p)
        inc, cache = decode_teacher_forced(m, grid, p, 5)
        assert float((inc - ref).abs().max()) < 1e-5
        assert cache.length == 5
        assert float((ref - full).abs().max()) > 1e-4  # the window actually bites

    def test_position_mismatch(self):
        m = small()
        cache = m.new_cache(torch.zeros(32), 4)
        m.forward_step(cache, lambda l, lg: lg.argmax(-1), position=1)
        with pytest.raises(ContractError):
            m.forward_step(cache, lambda l, lg: lg.argmax(-1), position=3)

    def test_bad_window(self):
        with pytest.raises(ValidationError):
            small().new_cache(torch.zeros(32), 0)

    def test_chooser_out_of_range(self):
        m = small()
        cache = m.new_cache(torch.zeros(32), 4)
        with pytest.raises(TokenIndexError):
            m.forward_step(cache, lambda l, lg: torch.tensor([99]))

    def test_set_condition_keeps_window(self):
        m = small()
        cache = m.new_cache(torch.zeros(32), 8)
        for _ in range(3):
            m.forward_step(cache, lambda l, lg: lg.argmax(-1))
        before = [(kv.win_k.clone(), kv.win_v.clone()) for level in cache.layers for kv in level]
        m.set_condition(cache, torch.ones(32))
        after = [(kv.win_k, kv.win_v) for level in cache.layers for kv in level]
        assert all(torch.equal(a[0], b[0]) and torch.equal(a[1], b[1]) for a, b in zip(before, after))
