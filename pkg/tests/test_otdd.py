import numpy as np
import pytest

from proxyfda.dataset import LabeledFeatureSet
from proxyfda.otdd import (MarginalError, SinkhornConvergenceError, exact_ot, kmeans_per_class,
                           label_distance, otdd, sinkhorn_ot)

import oracles


def uniform(n):
    return np.full(n, 1.0 / n)


def unit_square_cost(rng, n, m):
    a, b = rng.random((n, 2)), rng.random((m, 2))
    return np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1))


def gaussian_set(rng, shift=0.0, per=15, d=4):
    means = np.zeros((2, d))
    means[1, 0] = 3.0
    x = np.concatenate([means[c] + rng.standard_normal((per, d)) for c in range(2)]).T
    x[0] += shift
    return LabeledFeatureSet(x, np.repeat([0, 1], per))


def check_plan(plan, tol=1e-9):
    assert np.all(plan.coupling >= -tol)
    assert np.abs(plan.coupling.sum(1) - plan.mu).max() <= 1e-6
    assert np.abs(plan.coupling.sum(0) - plan.nu).max() <= 1e-6


def test_exact_examples():
    x = np.array([0.0, 1.0, 2.5])
    cost = np.abs(x[:, None] - x[None])
    plan = exact_ot(cost, uniform(3), uniform(3))
    assert plan.cost == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(plan.coupling, np.eye(3) / 3)
    assert exact_ot(np.array([[9.0]]), [1.0], [1.0]).cost == 9.0


def test_exact_matches_enumeration(rng):
    for _ in range(50):
        cost = rng.random((3, 3)) * 10 ** rng.uniform(-2, 2)
        plan = exact_ot(cost, uniform(3), uniform(3))
        check_plan(plan)
        assert abs(plan.cost - oracles.transport_vertices(cost, uniform(3), uniform(3))) <= 1e-8
        assert abs(plan.cost - oracles.assignment_min(cost)) <= 1e-8


def test_exact_non_uniform_and_rectangular(rng):
    for n, m in [(2, 3), (3, 2), (3, 4), (1, 4)]:
        for _ in range(10):
            mu, nu = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(m))
            cost = rng.random((n, m))
            plan = exact_ot(cost, mu, nu)
            check_plan(plan)
            assert abs(plan.cost - oracles.transport_vertices(cost, mu, nu)) <= 1e-8


def test_exact_degenerate_marginals(rng):
    # integer costs with ties and zero-mass rows stress degenerate pivots
    for _ in range(20):
        cost = rng.integers(0, 3, (4, 4)).astype(float)
        mu = np.array([0.5, 0.0, 0.25, 0.25])
        plan = exact_ot(cost, mu, uniform(4))
        check_plan(plan)
        assert abs(plan.cost - oracles.transport_vertices(cost, mu, uniform(4))) <= 1e-8


@pytest.mark.parametrize("mu,nu", [([0.5, 0.6], [0.5, 0.5]), ([-0.1, 1.1], [0.5, 0.5]),
                                   ([0.5, 0.5], [1.0])])
def test_marginal_errors(mu, nu):
    with pytest.raises(MarginalError):
        exact_ot(np.ones((2, 2)), mu, nu)


def test_sinkhorn_close_to_exact_unit_scale(rng):
    for _ in range(5):
        cost = unit_square_cost(rng, 20, 20)
        ex = exact_ot(cost, uniform(20), uniform(20)).cost
        sk = sinkhorn_ot(cost, uniform(20), uniform(20), 1e-3)
        check_plan(sk)
        assert ex <= sk.cost + 1e-12
        assert sk.cost <= 1.01 * ex


def test_sinkhorn_never_below_exact(rng):
    for _ in range(10):
        mu, nu = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(8))
        cost = rng.random((6, 8))
        sk = sinkhorn_ot(cost, mu, nu, float(rng.uniform(0.01, 0.5)))
        assert exact_ot(cost, mu, nu).cost <= sk.cost + 1e-12


def test_sinkhorn_identical_shrinks_with_epsilon(rng):
    x = rng.random((12, 2))
    cost = ((x[:, None] - x[None]) ** 2).sum(-1)
    vals = [sinkhorn_ot(cost, uniform(12), uniform(12), eps).cost for eps in (0.1, 0.03, 0.01, 0.003)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-3


def test_sinkhorn_stable_on_large_costs(rng):
    cost = 1e3 * rng.random((10, 10))
    with np.errstate(over="raise", invalid="raise"):
        sk = sinkhorn_ot(cost, uniform(10), uniform(10), 1e-3)
    assert np.all(np.isfinite(sk.coupling)) and np.isfinite(sk.cost)
    assert sk.cost == pytest.approx(exact_ot(cost, uniform(10), uniform(10)).cost, rel=1e-3)


def test_sinkhorn_reports_non_convergence(rng):
    cost = rng.random((8, 8))
    with pytest.raises(SinkhornConvergenceError) as info:
        sinkhorn_ot(cost, uniform(8), uniform(8), 1e-4, max_iter=3, tol=1e-14, anneal=False)
    assert info.value.residual > 0 and info.value.iterations == 3
    with pytest.raises(ValueError):
        sinkhorn_ot(cost, uniform(8), uniform(8), 0.0)


def test_kmeans_k1_is_class_labels(rng):
    fs = gaussian_set(rng)
    pl = kmeans_per_class(fs, 1)
    assert pl.pairs == [(0, 0), (1, 0)]
    assert np.array_equal(pl.as_pairs()[:, 0], fs.labels)


def test_kmeans_separates_blobs(rng):
    blob = np.concatenate([rng.normal(0, 0.1, (2, 10)), rng.normal(20, 0.1, (2, 7))], axis=1)
    pl = kmeans_per_class(LabeledFeatureSet(blob, np.zeros(17, int)), 2, seed=3)
    idx = pl.index
    assert len(set(idx[:10])) == 1 and len(set(idx[10:])) == 1 and idx[0] != idx[10]


def test_kmeans_small_classes_and_determinism(rng):
    x = rng.standard_normal((3, 5))
    fs = LabeledFeatureSet(x, np.array([0, 0, 1, 1, 1]))
    pl = kmeans_per_class(fs, 3, seed=1)
    assert sorted(pl.index[:2].tolist()) == [0, 1]
    assert len(pl.pairs) == 5
    again = kmeans_per_class(fs, 3, seed=1)
    assert np.array_equal(pl.index, again.index) and pl.pairs == again.pairs
    with pytest.raises(ValueError):
        kmeans_per_class(fs, 0)


def test_label_distance_examples(rng):
    a = rng.standard_normal((3, 6))
    assert label_distance(a, a) == pytest.approx(0.0, abs=1e-7)
    assert label_distance(np.zeros((2, 1)), np.array([[3.0], [4.0]])) == pytest.approx(5.0)
    t = np.array([[0.3], [-1.2], [0.4]])
    assert label_distance(a, a + t) == pytest.approx(np.linalg.norm(t), abs=1e-9)
    with pytest.raises(ValueError):
        label_distance(np.empty((3, 0)), a)


def test_otdd_self_and_symmetry(rng):
    for seed in range(5):
        r = np.random.default_rng(seed)
        a, b = gaussian_set(r), gaussian_set(r, shift=1.0)
        assert otdd(a, a, seed=seed).distance <= 1e-8
        assert abs(otdd(a, b, seed=seed).distance - otdd(b, a, seed=seed).distance) <= 1e-8


def test_otdd_grows_with_shift():
    ok = 0
    for seed in range(10):
        r = np.random.default_rng(seed)
        src = gaussian_set(r)
        d = [otdd(src, src.with_features(src.features + s * np.eye(4)[:, [1]]), k=1).distance
             for s in (0.5, 1.0, 2.0)]
        ok += d[0] < d[1] < d[2]
    assert ok >= 9


def test_otdd_report_fields(rng):
    a, b = gaussian_set(rng), gaussian_set(rng, shift=0.5)
    rep = otdd(a, b, k=2)
    assert rep.solver == "exact" and rep.epsilon is None and rep.p == 2
    assert rep.label_distances.shape == (len(rep.source_labels.pairs), len(rep.target_labels.pairs))
    assert np.all(rep.label_distances >= 0) and rep.distance > 0
    sk = otdd(a, b, k=2, solver="sinkhorn")
    assert sk.solver == "sinkhorn" and sk.epsilon > 0 and sk.distance >= rep.distance - 1e-12
    with pytest.raises(ValueError):
        otdd(a, LabeledFeatureSet(np.ones((3, 2)), [0, 1]))
    with pytest.raises(ValueError):
        otdd(a, b, solver="greedy")
