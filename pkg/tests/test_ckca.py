import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ckcalab import ckca, nn
from ckcalab.baselines import StrategyConfig, run_strategy
from ckcalab.ckca import (CentroidStore, CkcaConfig, DistillationSchedule, RegConfig, alpha_at,
                          alpha_init, compute_centroids, featreg_loss, kd_loss, kmeans)
from ckcalab.nn import ModelParams, SgdConfig
from ckcalab.stage import StageContext
from ckcalab.stream import NO_ACCESS, Dataset, StreamSpec, make_blobs, make_stream

from oracles import best_sse, ce_ref, central_diff, kd_ref, rel_error


# --- k-means ---------------------------------------------------------------

def test_kmeans_k1_is_mean():
    pts = np.random.default_rng(0).normal(size=(9, 3))
    res = kmeans(pts, 1, seed=4)
    np.testing.assert_allclose(res.centroids[0], pts.mean(axis=0), atol=1e-12)
    assert res.counts.tolist() == [9]


def test_kmeans_two_pairs_brute_force():
    pts = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])
    res = kmeans(pts, 2, seed=1)
    got = sorted(map(tuple, res.centroids))
    assert got == [(0.0, 0.5), (10.0, 10.5)]
    assert res.sse(pts) == pytest.approx(best_sse(pts, 2), rel=1e-12)


def test_kmeans_identical_points():
    pts = np.tile([1.5, -2.0], (6, 1))
    res = kmeans(pts, 3, seed=0)
    assert res.k == 1 and res.n_iter == 1
    np.testing.assert_array_equal(res.centroids[0], [1.5, -2.0])


def test_kmeans_more_clusters_than_points():
    pts = np.array([[0.0], [1.0], [5.0]])
    res = kmeans(pts, 5)
    assert res.k == 3 and sorted(res.centroids.ravel()) == [0.0, 1.0, 5.0]


def test_kmeans_deterministic():
    pts = np.random.default_rng(3).normal(size=(30, 2))
    a, b = kmeans(pts, 3, seed=8), kmeans(pts, 3, seed=8)
    assert a.centroids.tobytes() == b.centroids.tobytes()


def test_kmeans_centroids_are_group_means():
    pts = np.random.default_rng(5).normal(size=(40, 3))
    res = kmeans(pts, 4, seed=2)
    for j in range(res.k):
        np.testing.assert_allclose(res.centroids[j], pts[res.labels == j].mean(axis=0), atol=1e-12)
    assert res.counts.sum() == 40


# --- centroids ---------------------------------------------------------------

def identity_net(dim, classes):
    """Single affine layer: the feature tap is the raw input."""
    return ModelParams([np.zeros((classes, dim))], [np.zeros(classes)])


def test_centroids_one_sample_per_class():
    x = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]])
    store = compute_centroids(identity_net(2, 3), x, [0, 1, 2], RegConfig(k=1))
    for c in range(3):
        np.testing.assert_array_equal(store.centroids[c][0], x[c])
        assert store.counts[c].tolist() == [1]


def test_centroids_k1_mean():
    store = compute_centroids(identity_net(2, 1), np.array([[0.0, 0.0], [2.0, 0.0]]), [0, 0], RegConfig(k=1))
    assert store.centroids[0].tolist() == [[1.0, 0.0]] and store.counts[0].tolist() == [2]


def test_centroids_k2_brute_force():
    rng = np.random.default_rng(7)
    x = np.concatenate([rng.normal(0, 0.1, size=(3, 2)), rng.normal(4, 0.1, size=(3, 2))])
    store = compute_centroids(identity_net(2, 1), x, np.zeros(6, int), RegConfig(k=2), seed=3)
    cents, counts = store.centroids[0], store.counts[0]
    assign = np.argmin(((x[:, None] - cents[None]) ** 2).sum(-1), axis=1)
    sse = float(((x - cents[assign]) ** 2).sum())
    assert sse == pytest.approx(best_sse(x, 2), rel=1e-9)
    assert sorted(counts.tolist()) == [3, 3]


def test_centroids_skip_absent_class():
    store = compute_centroids(identity_net(2, 4), np.ones((3, 2)), [0, 0, 2], RegConfig())
    assert store.classes() == [0, 2]


def test_centroids_k1_equals_feature_means_through_mlp():
    p = nn.init_params([3, 8, 5, 3], 0)
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(30, 3)), rng.integers(0, 3, 30)
    store = compute_centroids(p, x, y, RegConfig(k=1))
    feats = nn.forward(p, x).feature
    for c in range(3):
        np.testing.assert_allclose(store.centroids[c][0], feats[y == c].mean(axis=0), atol=1e-12)


# --- FeatReg -------------------------------------------------------------------

def store_of(mapping):
    dim = len(next(iter(mapping.values()))[0])
    s = CentroidStore(max(len(v) for v in mapping.values()), dim)
    for c, cents in mapping.items():
        s.centroids[c] = np.array(cents, dtype=float)
        s.counts[c] = np.ones(len(cents), dtype=np.int64)
    return s


def test_featreg_zero_at_centroid():
    store = store_of({0: [[1.0, 2.0]]})
    loss, g = featreg_loss(np.array([1.0, 2.0]), 0, store)
    assert loss == 0.0 and (g == 0).all()


def test_featreg_345():
    loss, g = featreg_loss(np.array([3.0, 4.0]), 1, store_of({1: [[0.0, 0.0]]}))
    assert loss == 5.0
    np.testing.assert_allclose(g, [0.6, 0.8], rtol=1e-15)


def test_featreg_nearest_of_two():
    store = store_of({0: [[0.0, 0.0], [5.0, 5.0]]})
    g = np.array([4.0, 4.5])
    loss, _ = featreg_loss(g, 0, store)
    brute = min(math.dist(g, c) for c in store.centroids[0])
    assert loss == pytest.approx(brute, rel=1e-15)
    assert loss == pytest.approx(math.dist(g, (5.0, 5.0)))


def test_featreg_tie_picks_lowest_index():
    store = store_of({0: [[1.0, 0.0], [-1.0, 0.0]]})
    _, g = featreg_loss(np.zeros(2), 0, store)
    np.testing.assert_allclose(g, [-1.0, 0.0])


def test_featreg_batch_and_skips():
    store = store_of({0: [[0.0, 0.0]]})
    feats = np.array([[3.0, 4.0], [1.0, 1.0], [6.0, 8.0]])
    losses, grads, skipped = featreg_loss(feats, np.array([0, 1, 0]), store)
    assert losses.tolist() == [5.0, 0.0, 10.0] and skipped == 1
    assert (grads[1] == 0).all()


def test_featreg_dim_mismatch():
    with pytest.raises(ValueError):
        featreg_loss(np.zeros(3), 0, store_of({0: [[0.0, 0.0]]}))


def test_featreg_gradient_finite_differences():
    rng = np.random.default_rng(2)
    store = store_of({0: rng.normal(size=(3, 4)).tolist()})
    for _ in range(10):
        g = rng.normal(size=4)
        _, d = featreg_loss(g, 0, store)
        num = central_diff(lambda v: featreg_loss(v, 0, store)[0], g)
        assert rel_error(d, num) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100.0))
def test_featreg_scaling(seed, scale):
    rng = np.random.default_rng(seed)
    cents = rng.normal(size=(3, 4))
    g = rng.normal(size=4)
    base, scaled = store_of({0: cents}), store_of({0: cents * scale})
    i0 = ckca.nearest_centroid(g, cents)
    i1 = ckca.nearest_centroid(g * scale, cents * scale)
    assert i0 == i1
    l0, _ = featreg_loss(g, 0, base)
    l1, _ = featreg_loss(g * scale, 0, scaled)
    assert l1 == pytest.approx(scale * l0, rel=1e-12)


# --- distillation ----------------------------------------------------------------

def test_kd_identical_logits():
    z = np.array([0.3, -1.2, 2.0])
    loss, g = kd_loss(z, z, 2.0)
    assert loss == pytest.approx(0.0, abs=1e-15) and np.abs(g).max() < 1e-15


@pytest.mark.parametrize("T", [0.5, 1.0, 2.0, 4.0])
def test_kd_gradient_finite_differences(T):
    rng = np.random.default_rng(int(T * 10))
    for _ in range(5):
        s, t = rng.normal(scale=2, size=5), rng.normal(scale=2, size=5)
        loss, g = kd_loss(s, t, T)
        assert loss == pytest.approx(kd_ref(s, t, T), rel=1e-10)
        num = central_diff(lambda v: kd_ref(v, t, T), s)
        assert rel_error(g, num) < 1e-6


def test_kd_high_temperature_limit():
    # softened distributions go uniform, so the raw divergence vanishes; the
    # T^2 factor keeps a finite limit of half the centred variance of s - t
    s, t = np.array([2.0, 0.0, -1.0]), np.array([-1.0, 3.0, 0.5])
    hot, cold = kd_loss(s, t, 100.0)[0], kd_loss(s, t, 1.0)[0]
    assert hot / 100.0**2 < cold
    assert hot == pytest.approx(0.5 * np.var(s - t), rel=1e-3)


def test_kd_errors():
    with pytest.raises(ValueError):
        kd_loss(np.zeros(3), np.zeros(4), 1.0)
    with pytest.raises(ValueError):
        kd_loss(np.zeros(3), np.zeros(3), 0.0)
    with pytest.raises(ValueError):
        kd_loss(np.array([np.inf, 0.0]), np.zeros(2), 1.0)


# --- distillation strength -----------------------------------------------------------

def test_alpha_init_examples():
    assert alpha_init([100, 100]) == 0.5
    assert alpha_init([50] * 10) == 0.9
    assert alpha_init([30, 10]) == 0.75


def test_alpha_init_exact_rational():
    sizes = [7, 13, 11]
    assert alpha_init(sizes) == float(Fraction(20, 31))


def test_alpha_init_needs_teacher():
    with pytest.raises(ValueError):
        alpha_init([10])
    with pytest.raises(ValueError):
        alpha_init([10, 0])


def test_alpha_endpoints():
    sch = DistillationSchedule(0.9, 30)
    assert alpha_at(sch, 0) == 0.9
    assert abs(alpha_at(sch, 30) - 0.5) < 1e-12
    # cos(pi/2) = 0 leaves (2*0.9 + 1) / 4
    assert alpha_at(sch, 15) == pytest.approx(0.7, abs=1e-15)


def test_alpha_range_check():
    with pytest.raises(ValueError):
        alpha_at(DistillationSchedule(0.8, 10), 11)
    with pytest.raises(ValueError):
        alpha_at(DistillationSchedule(0.8, 10), -1)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 0.999), st.integers(1, 200))
def test_alpha_monotone_and_bounded(a0, T):
    sch = DistillationSchedule(a0, T)
    vals = [alpha_at(sch, t) for t in range(T + 1)]
    assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))
    assert all(0.5 - 1e-12 <= v <= a0 + 1e-12 for v in vals)


# --- assembled losses ---------------------------------------------------------------

def tiny_setup(seed):
    p = nn.init_params([3, 6, 5, 4], seed)
    rng = np.random.default_rng(seed + 1)
    p = p.map(lambda a: a + 0.1 * rng.normal(size=a.shape))
    teacher = p.map(lambda a: a + 0.3 * rng.normal(size=a.shape))
    X, y = rng.normal(size=(6, 3)), rng.integers(0, 4, size=6)
    store = CentroidStore(2, 5)
    for c in range(3):  # class 3 has no centroid on purpose
        store.centroids[c] = rng.normal(size=(2, 5))
        store.counts[c] = np.array([1, 1])
    return p, teacher, X, y, store


def ref_eq5(p, teacher, X, y, store, lam, alpha, T):
    total = 0.0
    for x, t in zip(X, y):
        tr = nn.forward(p, x)
        kd = kd_ref(tr.logits, nn.forward(teacher, x).logits, T)
        fr = 0.0
        if t in store.centroids:
            fr = min(np.linalg.norm(tr.feature - c) for c in store.centroids[t])
        total += (1 - alpha) * ce_ref(tr.logits, t) + alpha * kd + lam * fr
    return total / len(y)


def test_eq1_lambda_zero_is_ce():
    p, _, X, y, store = tiny_setup(0)
    loss, grad = ckca.total_loss_full_access(p, X, y, store, RegConfig(lam=0.0))
    tr = nn.forward(p, X)
    ce, d = nn.softmax_ce(tr.out, y)
    assert loss == float(ce.mean())
    assert grad.same_as(nn.backward(p, tr, d / len(y)))


def test_eq1_features_on_centroids():
    p, _, X, y, _ = tiny_setup(1)
    y = np.arange(4)
    X = X[:4]
    feats = nn.forward(p, X).feature
    store = CentroidStore(1, 5, {c: feats[c:c + 1].copy() for c in range(4)},
                          {c: np.array([1]) for c in range(4)})
    loss, _ = ckca.total_loss_full_access(p, X, y, store, RegConfig(lam=3.0))
    ce, _ = nn.softmax_ce(nn.forward(p, X).out, y)
    assert loss == pytest.approx(float(ce.mean()), abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_eq1_gradient(seed):
    p, _, X, y, store = tiny_setup(seed)
    reg = RegConfig(lam=0.7)
    _, grad = ckca.total_loss_full_access(p, X, y, store, reg)
    num = central_diff(lambda v: ref_eq5(p.with_flat(v), p, X, y, store, 0.7, 0.0, 1.0), p.flat())
    assert rel_error(grad.flat(), num) < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_eq5_gradient(seed):
    p, teacher, X, y, store = tiny_setup(seed)
    reg = RegConfig(lam=0.4)
    loss, grad = ckca.total_loss_no_access(p, teacher, X, y, store, reg, 0.65, 2.0)
    assert loss == pytest.approx(ref_eq5(p, teacher, X, y, store, 0.4, 0.65, 2.0), rel=1e-10)
    num = central_diff(lambda v: ref_eq5(p.with_flat(v), teacher, X, y, store, 0.4, 0.65, 2.0), p.flat())
    assert rel_error(grad.flat(), num) < 1e-5


def test_eq5_alpha_zero_equals_eq1():
    p, teacher, X, y, store = tiny_setup(3)
    reg = RegConfig(lam=0.5)
    l5, g5 = ckca.total_loss_no_access(p, teacher, X, y, store, reg, 0.0, 2.0)
    l1, g1 = ckca.total_loss_full_access(p, X, y, store, reg)
    assert abs(l5 - l1) <= 1e-12
    assert np.abs(g5.flat() - g1.flat()).max() <= 1e-12


def test_eq5_pure_distillation_of_self_is_zero():
    p, _, X, y, store = tiny_setup(4)
    loss, grad = ckca.total_loss_no_access(p, p, X, y, store, RegConfig(lam=0.0), 1.0, 2.0)
    assert abs(loss) < 1e-14 and np.abs(grad.flat()).max() < 1e-14


# --- stage trainer -----------------------------------------------------------------

SMALL_SGD = SgdConfig(learning_rate=0.05, epochs=4, batch_size=16)


def small_stream(seed=0, stages=3):
    data = make_blobs(4, 60, 5, 0.4, seed)
    chunks = make_stream(StreamSpec(stages, seed), data.y)
    return data, chunks


def ctx_for(stage, chunks, prev=None, store=None, seed=0, regime=NO_ACCESS):
    return StageContext(stage, [5, 12, 8, 4], regime, [len(c) for c in chunks[:stage]], seed,
                        prev, store)


def test_stage1_equals_scratch():
    data, chunks = small_stream()
    a = ckca.train_stage(ctx_for(1, chunks), data, chunks[0], SMALL_SGD, test=data)
    b = run_strategy(StrategyConfig("scratch"), ctx_for(1, chunks), data, chunks[0], SMALL_SGD, test=data)
    assert a.params.same_as(b.params) and a.report.acc == b.report.acc


def test_reduction_to_warm_start():
    data, chunks = small_stream()
    s1 = ckca.train_stage(ctx_for(1, chunks), data, chunks[0], SMALL_SGD)
    ctx = ctx_for(2, chunks, s1.params, s1.store)
    off = CkcaConfig(reg=RegConfig(lam=0.0), kd="off")
    a = ckca.train_stage(ctx, data, chunks[1], SMALL_SGD, off)
    b = run_strategy(StrategyConfig("warm"), ctx, data, chunks[1], SMALL_SGD)
    assert a.params.same_as(b.params)


def test_teacher_is_not_modified():
    data, chunks = small_stream()
    s1 = ckca.train_stage(ctx_for(1, chunks), data, chunks[0], SMALL_SGD)
    frozen = s1.params.copy()
    store_bytes = {c: v.tobytes() for c, v in s1.store.centroids.items()}
    out = ckca.train_stage(ctx_for(2, chunks, s1.params, s1.store), data, chunks[1], SMALL_SGD)
    assert s1.params.same_as(frozen)
    assert {c: v.tobytes() for c, v in s1.store.centroids.items()} == store_bytes
    assert not out.params.same_as(frozen)


def test_missing_teacher_rejected():
    data, chunks = small_stream()
    with pytest.raises(ValueError):
        ckca.train_stage(ctx_for(2, chunks), data, chunks[1], SMALL_SGD)


def test_stage_report_counts():
    data, chunks = small_stream()
    out = ckca.train_stage(ctx_for(1, chunks), data, chunks[0], SMALL_SGD, test=data)
    r = out.report
    assert r.samples_processed == SMALL_SGD.epochs * len(chunks[0])
    assert r.stored_samples == len(chunks[0]) and 0 <= r.acc <= 1
    assert set(out.store.classes()) == set(np.unique(data.y[chunks[0]]).tolist())


def test_two_stage_no_access_beats_warm_start():
    # desk-scale version of the stage-2 comparison, averaged over 5 seeds
    from ckcalab.harness.config import ExperimentConfig, StreamConfig
    from ckcalab.harness.runner import build_data
    import dataclasses

    gains = []
    for seed in range(5):
        cfg = dataclasses.replace(ExperimentConfig(), stream=StreamConfig(num_stages=2))
        split = build_data(cfg, seed)
        sizes = split.chunk_sizes
        lay = cfg.layer_sizes(split.pool.dim, 10)
        c1 = StageContext(1, lay, NO_ACCESS, sizes[:1], seed)
        s1 = ckca.train_stage(c1, split.pool, split.chunks[0], cfg.sgd, test=split.test)
        c2 = StageContext(2, lay, NO_ACCESS, sizes, seed, s1.params, s1.store)
        ours = ckca.train_stage(c2, split.pool, split.chunks[1], cfg.sgd, cfg.ckca, test=split.test)
        warm = run_strategy(StrategyConfig("warm"), c2, split.pool, split.chunks[1], cfg.sgd, test=split.test)
        gains.append(ours.report.acc - warm.report.acc)
    assert np.mean(gains) >= 0.0
