import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from multisoc import numcore as nc
from multisoc import policy as pol
from multisoc.config import ArchConfig
from multisoc.percept import INTRINSIC_DIM, NODE_DIM

from helpers import autograd_grad, fd_grad, rel_err

F64 = torch.float64


def tiny_arch(heads=2, **kw):
    base = dict(edge_selector_emb_size=4 * heads, edge_selector_num_head=heads, mha_emb_size=8,
                mha_num_head=2, agent_embedding_size=8, human_node_rnn_size=8,
                human_node_output_size=8, gain=0.5)
    base.update(kw)
    return ArchConfig(**base)


def random_batch(rng, b, n, density=0.6, agent=None):
    nodes = rng.normal(size=(b, n, NODE_DIM))
    adj = rng.random((b, n, n)) < density
    idx = np.arange(n)
    adj[:, idx, idx] = True
    if agent is None:
        agent = rng.integers(0, n, size=b)
    w = rng.normal(size=(b, INTRINSIC_DIM))
    return pol.ObsBatch.from_arrays(nodes, adj, w, agent, F64)


def params_for(arch, seed=0):
    return pol.init_params(arch, np.random.default_rng(seed), F64)


# -- edge selector --------------------------------------------------------------

def test_single_node_selects_itself():
    arch = tiny_arch()
    batch = random_batch(np.random.default_rng(0), 1, 1)
    sp = pol.edge_selector(batch, params_for(arch), arch, 1.0, rng=np.random.default_rng(1))
    assert sp.weights.tolist() == [[[1.0]]]
    assert sp.mask.tolist() == [[[True]]]


@pytest.mark.parametrize("heads", [1, 2, 4, 8])
def test_hard_out_degree_bounded_by_heads(heads):
    arch = tiny_arch(heads)
    p = params_for(arch, heads)
    rng = np.random.default_rng(heads)
    for _ in range(50):
        n = int(rng.integers(1, 31))
        batch = random_batch(rng, 4, n, density=rng.random())
        sp = pol.edge_selector(batch, p, arch, float(rng.uniform(0.03, 5)), rng=rng)
        assert int(sp.mask.sum(-1).max()) <= heads
        assert torch.all(sp.mask == (sp.weights != 0))
        # selections stay inside the visible neighbourhood
        adj = pol.effective_adjacency(batch.adjacency)
        assert not torch.any(sp.mask & ~adj)


def test_hard_selection_rows_are_one_hot_per_head():
    arch = tiny_arch(4)
    rng = np.random.default_rng(3)
    batch = random_batch(rng, 3, 7)
    sp = pol.edge_selector(batch, params_for(arch), arch, 0.7, rng=rng)
    hw = sp.head_weights
    assert torch.all((hw == 0) | (hw == 1))
    assert torch.all(hw.sum(-1) == 1)
    assert torch.all(sp.weights.sum(-1) == 1)


def test_rows_without_visible_destinations_get_self_loop():
    adj = torch.zeros(1, 3, 3, dtype=torch.bool)
    adj[0, 0, 1] = True
    eff = pol.effective_adjacency(adj)
    assert eff[0].tolist() == [[False, True, False], [False, True, False], [False, False, True]]


def test_zero_temperature_limit_is_argmax():
    arch = tiny_arch(2)
    rng = np.random.default_rng(4)
    batch = random_batch(rng, 2, 6)
    p = params_for(arch, 4)
    with torch.no_grad():
        p["es.mlp.w"].mul_(50.0)  # spread the logits apart
    zero = torch.zeros(2, 2, 6, 6, dtype=F64)
    sp = pol.edge_selector(batch, p, arch, 1e-4, noise=zero, hard=False)
    hard = pol.edge_selector(batch, p, arch, 1e-4, noise=zero, hard=True)
    assert torch.allclose(sp.head_weights, hard.head_weights, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.floats(0.03, 10.0), st.integers(0, 10 ** 6))
def test_soft_head_rows_sum_to_one(n, tau, seed):
    arch = tiny_arch(2)
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, 2, n, density=rng.random())
    sp = pol.edge_selector(batch, params_for(arch), arch, tau, rng=rng, hard=False)
    assert torch.allclose(sp.head_weights.sum(-1), torch.ones(2, 2, n, dtype=F64), atol=1e-9)


def test_straight_through_gradient_equals_soft_gradient():
    rng = np.random.default_rng(6)
    logits = torch.as_tensor(rng.normal(size=(3, 5)), dtype=F64).requires_grad_(True)
    noise = nc.gumbel_noise((3, 5), rng)
    c = torch.as_tensor(rng.normal(size=(3, 5)))
    grads = []
    for hard in (True, False):
        y, _ = nc.gumbel_softmax(logits, noise, 0.5, hard=hard)
        (g,) = torch.autograd.grad((y * c).sum(), logits)
        grads.append(g)
    assert torch.allclose(grads[0], grads[1], atol=1e-14)
    y, _ = nc.gumbel_softmax(logits, noise, 0.5, hard=True)
    assert torch.all((y == 0) | (y == 1))


# -- crowd coordinator ------------------------------------------------------------

def random_sparse(rng, b, n, feat, heads=2):
    m = np.zeros((b, n, n))
    for _ in range(heads):
        pick = rng.integers(0, n, size=(b, n))
        m[np.arange(b)[:, None], np.arange(n)[None, :], pick] += 1.0 / heads
    f = torch.as_tensor(rng.normal(size=(b, n, feat)))
    w = torch.as_tensor(m)
    return pol.SparseGraph(f, w, w != 0, None)


def test_single_neighbour_takes_its_value():
    arch = tiny_arch()
    p = params_for(arch)
    rng = np.random.default_rng(0)
    f = torch.as_tensor(rng.normal(size=(1, 4, arch.edge_selector_emb_size)))
    w = torch.zeros(1, 4, 4, dtype=F64)
    w[0, :, 2] = 1.0
    out = pol.crowd_coordinator(pol.SparseGraph(f, w, w != 0, None), p, arch.mha_num_head)
    expected = f[0, 2] @ p["cc.wv"]
    assert torch.allclose(out[0], expected.expand(4, -1), atol=1e-12)


def test_identical_features_give_uniform_attention():
    arch = tiny_arch()
    p = params_for(arch)
    f = torch.ones(1, 5, arch.edge_selector_emb_size, dtype=F64)
    rng = np.random.default_rng(1)
    mask = torch.as_tensor(rng.random((1, 5, 5)) < 0.5)
    mask[0, range(5), range(5)] = True
    sp = pol.SparseGraph(f, mask.to(F64), mask, None)
    _, alpha = pol.crowd_coordinator(sp, p, arch.mha_num_head, return_attention=True)
    deg = mask.sum(-1, keepdim=True).to(F64)
    expected = (mask.to(F64) / deg)[:, None].expand_as(alpha)
    assert torch.allclose(alpha, expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_crowd_coordinator_matches_loop_oracle(seed):
    arch = tiny_arch()
    p = params_for(arch, seed)
    rng = np.random.default_rng(seed)
    sp = random_sparse(rng, 1, 5, arch.edge_selector_emb_size)
    out = pol.crowd_coordinator(sp, p, arch.mha_num_head)[0].detach().numpy()
    h = sp.features[0].numpy()
    m = sp.weights[0].numpy()
    wq, wk, wv = (p[k].detach().numpy() for k in ("cc.wq", "cc.wk", "cc.wv"))
    H = arch.mha_num_head
    dk = arch.mha_emb_size // H
    for i in range(5):
        parts = []
        for k in range(H):
            sl = slice(k * dk, (k + 1) * dk)
            q = h[i] @ wq[:, sl]
            num = np.zeros(dk)
            den = 0.0
            for j in range(5):
                if m[i, j] == 0:
                    continue
                e = m[i, j] * math.exp(q @ (h[j] @ wk[:, sl]) / math.sqrt(dk))
                num += e * (h[j] @ wv[:, sl])
                den += e
            parts.append(num / den)
        assert np.max(np.abs(np.concatenate(parts) - out[i])) < 1e-10


def test_crowd_attention_rows_normalised():
    arch = tiny_arch()
    p = params_for(arch)
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(1, 20))
        sp = random_sparse(rng, 3, n, arch.edge_selector_emb_size)
        _, alpha = pol.crowd_coordinator(sp, p, arch.mha_num_head, return_attention=True)
        assert torch.allclose(alpha.sum(-1), torch.ones_like(alpha.sum(-1)), atol=1e-9)
        assert torch.all(alpha[~sp.mask[:, None].expand_as(alpha)] == 0)


# -- intrinsic coordinator --------------------------------------------------------

def test_intrinsic_zero_weights():
    arch = tiny_arch()
    p = params_for(arch)
    with torch.no_grad():
        p["ic.w"].zero_()
    out = pol.intrinsic_coordinator(torch.randn(3, INTRINSIC_DIM, dtype=F64), p)
    assert torch.all(out == 0)


def test_intrinsic_dimensions():
    arch = ArchConfig()
    p = pol.init_params(arch, np.random.default_rng(0), F64)
    assert tuple(p["ic.w"].shape) == (9, 64)
    assert pol.intrinsic_coordinator(torch.zeros(1, 9, dtype=F64), p).shape == (1, 64)


@pytest.mark.parametrize("seed", range(5))
def test_intrinsic_gradient(seed):
    arch = tiny_arch()
    p = params_for(arch, seed)
    rng = np.random.default_rng(seed)
    w = torch.as_tensor(rng.normal(size=(4, 9)))
    c = torch.as_tensor(rng.normal(size=(4, 8)))
    f = lambda: (pol.intrinsic_coordinator(w, p) * c).sum()
    assert rel_err(autograd_grad(f, p["ic.w"]), fd_grad(f, p["ic.w"])) < 1e-5


# -- full forward -----------------------------------------------------------------

def value_of(batch, p, arch, noise, h0):
    out = pol.forward(batch, h0, p, arch, 0.8, mode="deterministic", noise=noise, hard=False)
    return out.value.sum()


def end_to_end_gradient_error(seed):
    arch = tiny_arch(2)
    p = params_for(arch, seed)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, t in p.items():
            if name.endswith(".b") or "b_" in name or name.endswith("b1") or name.endswith("b2"):
                t.copy_(torch.as_tensor(rng.normal(size=tuple(t.shape)) * 0.1))
    batch = random_batch(rng, 2, 5)
    noise = nc.gumbel_noise((2, 2, 5, 5), rng)
    h0 = torch.as_tensor(rng.normal(size=(2, 8)) * 0.5)
    f = lambda: value_of(batch, p, arch, noise, h0)
    worst = 0.0
    for name, t in p.items():
        # the per-head selector bias cancels in the softmax, so its exact gradient is zero;
        # the floor keeps finite-difference round-off (~1e-11) from dominating such cases
        worst = max(worst, rel_err(autograd_grad(f, t), fd_grad(f, t), floor=1e-6))
    return worst


@pytest.mark.parametrize("seed", range(3))
def test_value_head_gradient_matches_finite_differences(seed):
    assert end_to_end_gradient_error(seed) < 1e-4


def test_gradient_reaches_edge_selector_in_hard_mode():
    arch = tiny_arch(2)
    p = params_for(arch, 1)
    rng = np.random.default_rng(1)
    batch = random_batch(rng, 4, 6)
    out = pol.forward(batch, torch.zeros(4, 8, dtype=F64), p, arch, 1.0, rng, "deterministic")
    out.value.sum().backward()
    assert float(p["es.mlp.w"].grad.abs().sum()) > 0


def test_zero_gain_actor_still_learns():
    arch = tiny_arch(gain=0.0)
    p = params_for(arch)
    assert torch.all(p["actor.w2"] == 0)
    rng = np.random.default_rng(0)
    batch = random_batch(rng, 3, 4)
    out = pol.forward(batch, torch.zeros(3, 8, dtype=F64), p, arch, 1.0, rng, "sample")
    assert torch.all(out.mean == 0)
    pol.gaussian_log_prob(out.action, out.mean, out.log_std).sum().backward()
    assert float(p["actor.w2"].grad.abs().sum()) > 0


def test_deterministic_forward_is_reproducible():
    arch = tiny_arch()
    p = params_for(arch)
    batch = random_batch(np.random.default_rng(0), 1, 1)
    h = torch.zeros(1, 8, dtype=F64)
    a = pol.forward(batch, h, p, arch, 1.0, np.random.default_rng(5), "deterministic")
    b = pol.forward(batch, h, p, arch, 1.0, np.random.default_rng(5), "deterministic")
    assert torch.equal(a.action, b.action) and torch.equal(a.value, b.value)


def permuted_outputs(seed, arch, p):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 10))
    batch = random_batch(rng, 1, n, density=rng.random(), agent=[0])
    noise = nc.gumbel_noise((1, arch.edge_selector_num_head, n, n), rng)
    h0 = torch.as_tensor(rng.normal(size=(1, arch.human_node_rnn_size)) * 0.3)
    perm = np.concatenate([[0], 1 + rng.permutation(n - 1)])
    t = torch.as_tensor(perm)
    pb = pol.ObsBatch(batch.nodes[:, t], batch.adjacency[:, t][:, :, t], batch.intrinsic, batch.agent)
    pn = noise[:, :, t][:, :, :, t]
    a = pol.forward(batch, h0, p, arch, 0.5, np.random.default_rng(seed), "sample", noise=noise)
    b = pol.forward(pb, h0, p, arch, 0.5, np.random.default_rng(seed), "sample", noise=pn)
    return a, b


@pytest.mark.parametrize("seed", range(20))
def test_permutation_of_other_nodes_leaves_output_unchanged(seed):
    arch = tiny_arch(2)
    p = params_for(arch, seed)
    a, b = permuted_outputs(seed, arch, p)
    for x, y in ((a.mean, b.mean), (a.value, b.value), (a.hidden, b.hidden), (a.action, b.action),
                 (a.log_prob, b.log_prob)):
        assert torch.max(torch.abs(x - y)) < 1e-6


def test_batch_equals_independent_forwards():
    arch = tiny_arch(2)
    p = params_for(arch, 3)
    rng = np.random.default_rng(3)
    batch = random_batch(rng, 6, 5)
    noise = nc.gumbel_noise((6, 2, 5, 5), rng)
    h0 = torch.as_tensor(rng.normal(size=(6, 8)) * 0.3)
    full = pol.forward(batch, h0, p, arch, 0.5, mode="deterministic", noise=noise)
    for i in range(6):
        one = pol.forward(batch.index(slice(i, i + 1)), h0[i:i + 1], p, arch, 0.5,
                          mode="deterministic", noise=noise[i:i + 1])
        assert torch.allclose(one.mean, full.mean[i:i + 1], atol=1e-6)
        assert torch.allclose(one.value, full.value[i:i + 1], atol=1e-6)


def test_non_finite_stage_is_named():
    arch = tiny_arch()
    p = params_for(arch)
    batch = random_batch(np.random.default_rng(0), 1, 3)
    batch.intrinsic[0, 0] = float("nan")
    with pytest.raises(nc.NonFiniteError, match="intrinsic"):
        pol.forward(batch, torch.zeros(1, 8, dtype=F64), p, arch, 1.0, np.random.default_rng(0))


def test_log_std_clamped():
    arch = tiny_arch()
    p = params_for(arch)
    with torch.no_grad():
        p["actor.log_std"].fill_(9.0)
    _, log_std, _ = pol.heads(torch.zeros(1, 8, dtype=F64), p, arch)
    assert torch.all(log_std == arch.log_std_max)


def test_gaussian_log_prob_matches_closed_form():
    mean = torch.tensor([[0.3, -0.2]], dtype=F64)
    log_std = torch.tensor([0.1, -0.4], dtype=F64)
    a = torch.tensor([[1.0, 0.5]], dtype=F64)
    s = torch.exp(log_std)
    want = sum(-((a[0, i] - mean[0, i]) ** 2) / (2 * s[i] ** 2) - math.log(s[i] * math.sqrt(2 * math.pi))
               for i in range(2))
    assert math.isclose(float(pol.gaussian_log_prob(a, mean, log_std)), float(want), rel_tol=1e-12)


# -- temperature ------------------------------------------------------------------

def test_temperature_schedule():
    assert pol.temperature(0) == 5.0
    assert math.isclose(pol.temperature(20_000_000), 0.05)
    assert pol.temperature(10 ** 12) == 0.03
    with pytest.raises(ValueError):
        pol.temperature(-1)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 9), st.integers(0, 10 ** 9))
def test_temperature_monotone_and_floored(a, b):
    lo, hi = min(a, b), max(a, b)
    assert pol.temperature(hi) <= pol.temperature(lo)
    assert pol.temperature(hi) >= 0.03
