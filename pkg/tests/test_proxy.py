import math

import numpy as np
import pytest

from proxyfda import numerics as nx
from proxyfda.fda import LossScalars, fda_loss
from proxyfda.graph import ConfigError, FeatureBatch, NeighborGraph, build_neighbor_graph
from proxyfda.numerics import Parameter
from proxyfda.proxy import (DiversityTracker, ProxyGenerator, ProxySet, diversity, gather_sets,
                            generate_proxies, proxy_counts, proxy_fda_loss, proxy_fda_loss_batch,
                            proxy_regularizer, proxy_side_losses, proxy_training_loss, variance_loss)

import oracles


def instance(rng, d=8, b=12, k=5, s=0.4, seed=0):
    x = rng.standard_normal((d, b))
    g = build_neighbor_graph(FeatureBatch(x, np.arange(b)), k)
    gen = ProxyGenerator(d, *proxy_counts(k, b, s), seed=seed)
    return x, g, gen


def one_hot_set(xpos, xneg, wpos, wneg, ip, ineg):
    """Proxy set whose pooling is a fixed selection of source columns."""
    sp = np.eye(xpos.shape[1])[ip]
    sn = np.eye(xneg.shape[1])[ineg]
    t = nx.constant
    return ProxySet(t(xpos @ sp.T), t(xneg @ sn.T), t(sp @ wpos), t(sn @ wneg), t(sp), t(sn),
                    t(xpos), t(xneg))


@pytest.mark.parametrize("k,b,s,want", [(5, 12, 0.4, (2, 2)), (1, 3, 0.1, (1, 1)),
                                        (8, 64, 0.5, (4, 28)), (4, 32, 0.625, (3, 17))])
def test_proxy_counts(k, b, s, want):
    assert proxy_counts(k, b, s) == want


def test_generator_rejects_zero_counts():
    with pytest.raises(ConfigError):
        ProxyGenerator(4, 0, 2)


def test_mask_independence(rng):
    for trial in range(20):
        x, g, gen = instance(rng, seed=trial)
        xp, xn, wp, wn = gather_sets(x, g)
        a = generate_proxies(xp, xn, wp, wn, gen)
        xn2 = xn.value + rng.standard_normal(xn.shape) * 10.0 ** rng.uniform(-3, 3)
        wn2 = rng.uniform(-1, 1, wn.shape)
        b = generate_proxies(xp, xn2, wp, wn2, gen)
        for f in ("pos", "w_pos", "s_pos", "xdot_pos"):
            assert np.abs(getattr(a, f).value - getattr(b, f).value).max() <= 1e-12
        xp2 = xp.value * rng.uniform(0.1, 5.0) + rng.standard_normal(xp.shape)
        c = generate_proxies(xp2, xn, rng.uniform(-1, 1, wp.shape), wn, gen)
        for f in ("neg", "w_neg", "s_neg", "xdot_neg"):
            assert np.abs(getattr(a, f).value - getattr(c, f).value).max() <= 1e-12


def test_convexity(rng):
    for trial in range(20):
        x, g, gen = instance(rng, d=6, b=10, k=int(rng.integers(2, 8)), seed=trial)
        xp, xn, wp, wn = gather_sets(x, g)
        p = generate_proxies(xp, xn, wp, wn, gen)
        for side, w in (("pos", wp), ("neg", wn)):
            s = getattr(p, "s_" + side).value
            assert np.all(s >= 0)
            assert np.abs(s.sum(axis=-1) - 1.0).max() <= 1e-9
            pooled = getattr(p, "w_" + side).value
            assert np.all(pooled >= w.min(axis=-1, keepdims=True) - 1e-12)
            assert np.all(pooled <= w.max(axis=-1, keepdims=True) + 1e-12)
            xdot = getattr(p, "xdot_" + side).value
            assert np.allclose(getattr(p, side).value, xdot @ np.swapaxes(s, -1, -2))


def test_pooled_similarity_hand_value():
    gen = ProxyGenerator(2, 1, 1, seed=0)
    for p in gen.heads["pos"]:
        p.value = np.zeros_like(p.value)
    xp = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = generate_proxies(xp, np.ones((2, 1)), np.array([0.9, 0.5]), np.array([0.3]), gen)
    assert np.allclose(out.s_pos.value, 0.5)
    assert out.w_pos.value[0] == pytest.approx(0.7)


def test_one_hot_pooling_picks_column():
    gen = ProxyGenerator(2, 1, 1, hidden=1, seed=1)
    gen.wo.value = np.zeros_like(gen.wo.value)  # attention output reduces to the tokens
    w1, b1, w2 = gen.heads["pos"]
    w1.value = np.array([[0.0, 1.0]])
    b1.value = np.zeros((1, 1))
    w2.value = np.array([[1000.0]])
    xp = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = generate_proxies(xp, np.ones((2, 1)), np.array([0.2, 0.8]), np.array([0.1]), gen)
    assert np.allclose(out.s_pos.value, [[0.0, 1.0]])
    assert np.allclose(out.pos.value[:, 0], xp[:, 1])
    assert out.w_pos.value[0] == pytest.approx(0.8)


def test_empty_sets_rejected(rng):
    gen = ProxyGenerator(3, 1, 1)
    with pytest.raises(ValueError):
        generate_proxies(np.ones((3, 0)), np.ones((3, 2)), np.ones(0), np.ones(2), gen)
    with pytest.raises(ValueError):
        generate_proxies(np.ones((3, 2)), np.ones((3, 2)), np.ones(3), np.ones(2), gen)


def test_variance_loss_examples():
    p = np.ones((5, 3))
    assert variance_loss(p, 1e-4).value == pytest.approx(0.99)
    assert variance_loss(np.array([[0.0, 2.0]]), 0.0).value == pytest.approx(0.0)
    wide = np.array([[-3.0, 3.0, 0.0], [5.0, -5.0, 1.0]])
    assert variance_loss(wide).value == 0.0
    with pytest.raises(ValueError):
        variance_loss(np.ones((4, 1)))


def test_training_loss_single_pair():
    xp = np.array([[1.0], [0.0]])
    sel = one_hot_set(xp, np.array([[0.0], [1.0]]), np.array([1.0]), np.array([0.0]), [0], [0])
    lp, _ = proxy_side_losses(sel, xp, np.empty((2, 0)), LossScalars(1.0, 0.0), alpha=0.0)
    assert lp.value == pytest.approx(oracles.softplus(-1.0), abs=1e-12)
    assert lp.value == pytest.approx(0.31326, abs=1e-5)


def test_training_loss_swaps_with_roles(rng):
    xp, xn = rng.standard_normal((4, 3)), rng.standard_normal((4, 5))
    wp, wn = rng.uniform(0, 1, 3), rng.uniform(0, 1, 5)
    a = one_hot_set(xp, xn, wp, wn, [0, 2], [1, 3, 4])
    b = one_hot_set(xn, xp, wn, wp, [1, 3, 4], [0, 2])
    sc = LossScalars(3.0, 1.0)
    lp, ln = proxy_side_losses(a, xp, xn, sc)
    lp2, ln2 = proxy_side_losses(b, xn, xp, sc)
    assert lp.value == pytest.approx(ln2.value) and ln.value == pytest.approx(lp2.value)


def test_training_loss_on_manifold_is_variance_term():
    # proxies sit on their own side with large margin
    xp = np.array([[1.0, 1.0], [0.0, 0.0]])
    xn = np.array([[-1.0, -1.0], [0.0, 0.0]])
    sel = one_hot_set(xp, xn, np.ones(2), np.ones(2), [0, 1], [0, 1])
    sc = LossScalars(100.0, 0.0)
    total = proxy_training_loss(sel, xp, xn, sc, alpha=5.0).value
    var_only = 5.0 * (variance_loss(sel.pos).value + variance_loss(sel.neg).value)
    assert total == pytest.approx(var_only, abs=1e-30 + 1e-12)


def test_proxy_fda_matches_oracle(rng):
    for _ in range(100):
        b = int(rng.integers(4, 12))
        k = int(rng.integers(1, b - 1))
        pre = rng.standard_normal((5, b))
        fin = pre + 0.3 * rng.standard_normal((5, b))
        g = build_neighbor_graph(FeatureBatch(pre, np.arange(b)), k)
        gen = ProxyGenerator(5, *proxy_counts(k, b, float(rng.uniform(0.1, 0.9))), seed=int(rng.integers(1000)))
        inv_tau, bias = float(rng.uniform(0.5, 20)), float(rng.uniform(-10, 10))
        sc = LossScalars(inv_tau, bias)
        xp, xn, wp, wn = gather_sets(fin, g)
        stacked = generate_proxies(xp, xn, wp, wn, gen)
        batch = proxy_fda_loss_batch(FeatureBatch(fin, np.arange(b)), g, stacked, sc).value
        for a in range(b):
            one = ProxySet(*(nx.constant(getattr(stacked, f).value[a]) for f in
                             ("pos", "neg", "w_pos", "w_neg", "s_pos", "s_neg", "xdot_pos", "xdot_neg")))
            want = oracles.proxy_fda(pre, fin, k, inv_tau, bias, a, one.pos.value, one.w_pos.value,
                                     one.neg.value, one.w_neg.value)
            assert abs(proxy_fda_loss(a, FeatureBatch(fin, np.arange(b)), g, one, sc).value - want) <= 1e-10
            assert abs(batch[a] - want) <= 1e-10


def test_duplicated_columns_match_fda_on_duplicated_batch(rng):
    pre = rng.standard_normal((4, 6))
    g = build_neighbor_graph(FeatureBatch(pre, np.arange(6)), 2)
    sc = LossScalars(5.0, 2.0)
    a = 0
    nb, nn = g.neighbors[a], g.non_neighbors[a]
    sel = one_hot_set(pre[:, nb], pre[:, nn], g.w_pos[a], g.w_neg[a], [0], [1])
    got = proxy_fda_loss(a, FeatureBatch(pre, np.arange(6)), g, sel, sc).value
    dup = np.concatenate([pre, pre[:, [nb[0], nn[1]]]], axis=1)
    want = oracles.proxy_fda(pre, pre, 2, 5.0, 2.0, a, dup[:, [6]], [g.w_pos[a][0]], dup[:, [7]], [g.w_neg[a][1]])
    assert got == pytest.approx(want, abs=1e-12)


def test_augmented_mean_of_two_terms():
    pre = np.array([[1.0, 1.0], [0.0, 0.1]])
    g = NeighborGraph(1, np.array([[1], [0]]), np.array([[0.9], [0.9]]), np.empty((2, 0), int),
                      np.empty((2, 0)), np.eye(2))
    sc = LossScalars(1.0, 0.0)
    fb = FeatureBatch(pre, np.arange(2))
    real = fda_loss(0, fb, g, sc).value
    p = np.array([[0.0], [1.0]])
    sel = ProxySet(nx.constant(p), nx.constant(np.empty((2, 0))), nx.constant(np.array([0.4])),
                   nx.constant(np.empty(0)), None, None, None, None)
    cterm = oracles.softplus(0.4 * -oracles.cos([1.0, 0.0], [0.0, 1.0]))
    assert proxy_fda_loss(0, fb, g, sel, sc).value == pytest.approx((real + cterm) / 2)


def test_count_mismatch_rejected(rng):
    pre = rng.standard_normal((3, 5))
    g = build_neighbor_graph(FeatureBatch(pre, np.arange(5)), 2)
    bad = ProxySet(nx.constant(np.ones((3, 2))), nx.constant(np.ones((3, 1))), nx.constant(np.ones(3)),
                   nx.constant(np.ones(1)), None, None, None, None)
    with pytest.raises(ValueError):
        proxy_fda_loss(0, FeatureBatch(pre, np.arange(5)), g, bad, LossScalars())


def test_gradient_separation(rng):
    x, g, gen = instance(rng)
    w = Parameter(np.eye(8) + 0.1 * rng.standard_normal((8, 8)))
    fin = nx.matmul(w, x)
    sc = LossScalars()
    proxy_loss, reg, _ = proxy_regularizer(FeatureBatch(fin, np.arange(12)), g, gen, sc)
    enc_grad = nx.gradient(proxy_loss, [w])[w]
    assert np.all(enc_grad == 0)
    gen_grads = nx.gradient(nx.mean(reg), gen.params)
    assert all(np.all(v == 0) for v in gen_grads.values())
    assert np.any(nx.gradient(nx.mean(reg), [w])[w] != 0)
    assert any(np.any(v != 0) for v in nx.gradient(proxy_loss, gen.params).values())


def test_proxy_loss_descends(rng):
    lower = 0
    seeds = 20
    for seed in range(seeds):
        r = np.random.default_rng(seed)
        x = r.standard_normal((8, 12))
        g = build_neighbor_graph(FeatureBatch(x, np.arange(12)), 5)
        gen = ProxyGenerator(8, *proxy_counts(5, 12, 0.4), seed=seed)
        xp, xn, wp, wn = gather_sets(x, g)
        sc = LossScalars()

        def loss():
            return nx.mean(proxy_training_loss(generate_proxies(xp, xn, wp, wn, gen), xp, xn, sc))

        first = loss().value
        for _ in range(100):
            l = loss()
            for p, gr in nx.gradient(l, gen.params).items():
                p.value = p.value - 0.05 * gr
        lower += loss().value < first
    assert lower >= math.ceil(0.95 * seeds)


def test_diversity_examples():
    same = np.ones((3, 4))
    assert diversity(same, same) == 0.0
    two = np.array([[0.0, 2.0]])
    assert diversity(two, two) == pytest.approx(1.0)
    t = DiversityTracker()
    t.update(two, two)
    assert t.update(same, same) == pytest.approx(0.5)


def test_generator_state_round_trip(rng):
    gen = ProxyGenerator(4, 2, 3, seed=5)
    other = ProxyGenerator(4, 2, 3, seed=6)
    other.load_state_dict(gen.state_dict())
    assert all(np.array_equal(a.value, b.value) for a, b in zip(gen.params, other.params))
    assert gen.num_parameters() == sum(v.size for v in gen.state_dict().values())
    with pytest.raises(ValueError):
        ProxyGenerator(4, 1, 3).load_state_dict(gen.state_dict())
