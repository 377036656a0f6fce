import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oneshot_dil import autodiff as ad
from oneshot_dil.augment import AugmentConfig
from oneshot_dil.autodiff import Tensor
from oneshot_dil.batchnorm import StatsMode
from oneshot_dil.continual import (FisherDiag, ReplayBuffer, compose_minibatch, ewc_fisher, ewc_penalty,
                                   ewc_penalty_grad, gem_project, gem_reference_gradient)
from oneshot_dil.gradcheck import check_gradients
from oneshot_dil.models import ModelSpec, build, loss_ce


def buffer(n=40, k=3, seed=0, shape=(1, 6, 6)):
    rng = np.random.default_rng(seed)
    return ReplayBuffer(rng.uniform(size=(n, *shape)), rng.integers(0, k, n), capacity=max(n, 1))


def mlp(k=3, d=36, seed=0, widths=(5,)):
    return build(ModelSpec(kind="mlp", widths=widths, num_classes=k, input_shape=(1, 6, 6) if d == 36 else (d,)),
                 np.random.default_rng(seed))


@pytest.mark.parametrize("sizes", [(32, 32), (63, 1)])
def test_minibatch_composition(sizes, rng):
    buf = buffer(100)
    x0 = rng.uniform(size=(1, 6, 6))
    mb = compose_minibatch(buf, x0, 7, sizes, AugmentConfig(), rng)
    assert mb.x.shape == (64, 1, 6, 6) and len(mb.y) == 64
    assert mb.is_new.sum() == sizes[1]
    assert np.all(mb.y[mb.is_new] == 7)
    # the original part is drawn without replacement
    orig = mb.x[~mb.is_new].reshape(sizes[0], -1)
    assert len({r.tobytes() for r in orig}) == sizes[0]


def test_minibatch_minimal_case(rng):
    buf = buffer(1)
    x0 = rng.uniform(size=(1, 6, 6))
    mb = compose_minibatch(buf, x0, 2, (1, 1), AugmentConfig.identity(), rng)
    np.testing.assert_array_equal(mb.x[~mb.is_new][0], buf.images[0])
    np.testing.assert_allclose(mb.x[mb.is_new][0], x0, atol=1e-10)


def test_minibatch_rejects_bad_requests(rng):
    with pytest.raises(ValueError, match="empty"):
        compose_minibatch(ReplayBuffer(np.zeros((0, 1, 6, 6)), np.zeros(0, int), 5), np.zeros((1, 6, 6)), 0,
                          (0, 1), AugmentConfig(), rng)
    with pytest.raises(ValueError):
        compose_minibatch(buffer(10), np.zeros((1, 6, 6)), 0, (11, 1), AugmentConfig(), rng)
    with pytest.raises(ValueError):
        compose_minibatch(buffer(10), np.zeros((1, 6, 6)), 0, (5, 0), AugmentConfig(), rng)


def test_buffer_from_data_respects_capacity(rng):
    images, labels = rng.uniform(size=(50, 1, 2, 2)), np.arange(50)
    buf = ReplayBuffer.from_data(images, labels, 20, rng)
    assert len(buf) == 20 and len(set(buf.labels)) == 20
    np.testing.assert_array_equal(buf.images, images[buf.labels])
    with pytest.raises(ValueError):
        ReplayBuffer(images, labels, 10)


def test_fisher_dead_unit_has_zero_entries():
    m = mlp()
    # unit 2 has no input weight and a very negative shift, so its ReLU never fires
    w = m.params["fc0.weight"].data.copy()
    w[2] = 0.0
    m.params["fc0.weight"].assign(w)
    beta = m.params["bn0.beta"].data.copy()
    beta[2] = -5.0
    m.params["bn0.beta"].assign(beta)
    f = ewc_fisher(m, buffer()).fisher
    assert np.all(f["fc0.weight"][2] == 0) and f["fc0.bias"][2] == 0
    assert f["bn0.gamma"][2] == 0 and f["bn0.beta"][2] == 0
    assert np.all(f["head.weight"][:, 2] == 0)
    assert all(np.all(v >= 0) for v in f.values())


def test_fisher_deterministic_and_leaves_stats_alone():
    m, buf = mlp(), buffer()
    before = {k: v.copy() for k, v in m.running_stats().items()}
    a, b = ewc_fisher(m, buf), ewc_fisher(m, buf)
    for k in a.fisher:
        np.testing.assert_array_equal(a.fisher[k], b.fisher[k])
        np.testing.assert_array_equal(a.anchor[k], m.params[k].data)
    for k, v in m.running_stats().items():
        np.testing.assert_array_equal(v, before[k])


def test_fisher_single_sample_equals_squared_gradient():
    m, buf = mlp(), buffer(1)
    f = ewc_fisher(m, buf).fisher
    g = ad.backward(loss_ce(m, buf.images, buf.labels, StatsMode.FIXED_STATS), m.params)
    for k in g:
        np.testing.assert_array_equal(f[k], g[k] ** 2)


def test_fisher_rejects_empty_buffer_and_updated_mode():
    with pytest.raises(ValueError):
        ewc_fisher(mlp(), ReplayBuffer(np.zeros((0, 1, 6, 6)), np.zeros(0, int), 1))
    with pytest.raises(ValueError):
        ewc_fisher(mlp(), buffer(), StatsMode.UPDATED_STATS)


def scalar_fisher(f, anchor):
    return FisherDiag({"t": np.array(float(f))}, {"t": np.array(float(anchor))})


def test_ewc_hand_example():
    p = {"t": Tensor(np.array(3.0), requires_grad=True)}
    fd = scalar_fisher(1.0, 0.0)
    pen = ewc_penalty(p, fd, 2.0)
    assert float(pen.data) == 9.0
    assert float(ad.backward(pen, p)["t"]) == 6.0
    assert float(ewc_penalty_grad(p, fd, 2.0)["t"]) == 6.0


def test_ewc_zero_at_anchor():
    m = mlp()
    fd = ewc_fisher(m, buffer())
    pen = ewc_penalty(m.params, fd, 100.0)
    assert float(pen.data) == 0.0
    assert all(np.all(g == 0) for g in ad.backward(pen, m.params).values())


def test_ewc_negative_lambda_rejected():
    with pytest.raises(ValueError):
        ewc_penalty({"t": Tensor(np.array(1.0))}, scalar_fisher(1, 0), -1.0)


def test_ewc_gradient_twenty_points():
    rng = np.random.default_rng(3)
    shapes = {"a": (3, 4), "b": (5,)}
    errs = []
    for _ in range(20):
        fd = FisherDiag({k: rng.uniform(0, 2, s) for k, s in shapes.items()},
                        {k: rng.normal(size=s) for k, s in shapes.items()})
        point = {k: rng.normal(size=s) for k, s in shapes.items()}
        errs.append(check_gradients(lambda t: ewc_penalty(t, fd, 100.0), point))
        analytic = ewc_penalty_grad({k: Tensor(v) for k, v in point.items()}, fd, 100.0)
        for k in shapes:
            np.testing.assert_allclose(analytic[k], 100.0 * fd.fisher[k] * (point[k] - fd.anchor[k]))
    assert max(errs) < 1e-6


def test_gem_examples():
    g_ref = np.array([0.0, 1.0])
    np.testing.assert_array_equal(gem_project(np.array([1.0, 2.0]), g_ref), [1.0, 2.0])
    np.testing.assert_allclose(gem_project(-np.array([3.0, -1.0]), np.array([3.0, -1.0])), 0.0, atol=1e-15)
    out = gem_project(np.array([1.0, -1.0]), g_ref)
    np.testing.assert_array_equal(out, [1.0, 0.0])
    assert out @ g_ref == 0.0


def test_gem_degenerate_reference_warns(caplog):
    # exact zero never violates the constraint; a reference whose squared norm underflows does
    np.testing.assert_array_equal(gem_project(np.array([1.0, 2.0]), np.zeros(2)), [1.0, 2.0])
    with caplog.at_level(logging.WARNING):
        out = gem_project(np.array([-1.0]), np.array([1e-170]))
    np.testing.assert_array_equal(out, [-1.0])
    assert "zero reference gradient" in caplog.text


def test_gem_shape_mismatch():
    with pytest.raises(ValueError):
        gem_project(np.zeros(3), np.zeros(2))


def test_gem_constraint_on_random_pairs():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        g, g_ref = rng.normal(size=1000), rng.normal(size=1000)
        out = gem_project(g, g_ref)
        worst = min(worst, float(out @ g_ref))
        np.testing.assert_allclose(gem_project(out, g_ref), out, atol=1e-12, rtol=0)
        if g @ g_ref >= 0:
            assert out is g or np.array_equal(out, g)
    assert worst >= -1e-10


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3),
       st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_gem_projection_is_minimal_change(g, g_ref):
    g, g_ref = np.array(g), np.array(g_ref)
    out = gem_project(g, g_ref)
    if g @ g_ref < 0 and g_ref @ g_ref > 1e-6:
        # the change is along g_ref only
        d = out - g
        np.testing.assert_allclose(d - (d @ g_ref) / (g_ref @ g_ref) * g_ref, 0.0, atol=1e-6)


def test_reference_gradient_matches_autodiff_and_is_deterministic():
    m, buf = mlp(), buffer()
    a = gem_reference_gradient(m, buf, 16, np.random.default_rng(5), StatsMode.FIXED_STATS)
    b = gem_reference_gradient(m, buf, 16, np.random.default_rng(5), StatsMode.FIXED_STATS)
    np.testing.assert_array_equal(a, b)
    x, y = buf.sample(16, np.random.default_rng(5))
    direct = ad.flatten_grads(ad.backward(loss_ce(m, x, y, StatsMode.FIXED_STATS), m.params), m.params)
    np.testing.assert_array_equal(a, direct)


def test_reference_gradient_vanishes_at_optimum():
    # identical inputs with balanced labels: uniform prediction (zero head) is the CE optimum
    m = mlp(k=3)
    m.params["head.weight"].assign(np.zeros((3, 5)))
    m.params["head.bias"].assign(np.zeros(3))
    x = np.repeat(np.random.default_rng(0).uniform(size=(1, 1, 6, 6)), 30, axis=0)
    buf = ReplayBuffer(x, np.tile([0, 1, 2], 10), 30)
    g = gem_reference_gradient(m, buf, 30, np.random.default_rng(0), StatsMode.FIXED_STATS)
    assert np.linalg.norm(g) < 1e-6


def test_reference_gradient_empty_buffer(rng):
    with pytest.raises(ValueError):
        gem_reference_gradient(mlp(), ReplayBuffer(np.zeros((0, 1, 6, 6)), np.zeros(0, int), 1), 4, rng)
