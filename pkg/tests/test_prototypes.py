import math

import numpy as np
import pytest

from tido import prototypes as proto
from tido.prototypes import (
    GaussianPrototype,
    PrototypeSet,
    class_separability_loss,
    fit_prototypes,
    is_ood,
    log_density,
    merge_prototype_sets,
    sample_proxy,
    separability_loss_batch,
)

from gradcheck import fd_vector_grad


def std_prototype(dim=2, cid=0, mean=None):
    mean = np.zeros(dim) if mean is None else np.asarray(mean, dtype=float)
    return GaussianPrototype(class_id=cid, mean=mean, var=np.ones(dim), count=10)


def std_set(*protos):
    return PrototypeSet(latent_dim=protos[0].dim, prototypes={p.class_id: p for p in protos})


# ---------------------------------------------------------------------------
# fit_prototypes


def test_fit_single_point_hits_variance_floor():
    ps = fit_prototypes(np.array([[2.0, 3.0]]), np.array([0]))
    p = ps.get(0)
    np.testing.assert_array_equal(p.mean, [2.0, 3.0])
    np.testing.assert_array_equal(p.var, [1e-6, 1e-6])
    assert p.count == 1


def test_fit_two_points_midpoint():
    ps = fit_prototypes(np.array([[0.0, 0.0], [2.0, 0.0]]), np.array([5, 5]))
    np.testing.assert_array_equal(ps.get(5).mean, [1.0, 0.0])


def test_fit_monte_carlo_recovery():
    rng = np.random.default_rng(0)
    x = rng.normal(loc=[1.0, -1.0], scale=1.0, size=(10_000, 2))
    ps = fit_prototypes(x, np.zeros(10_000, dtype=int))
    p = ps.get(0)
    assert np.abs(p.mean - [1.0, -1.0]).max() < 0.05
    assert np.abs(p.var - 1.0).max() < 0.1


def test_fit_missing_class_omitted_with_warning(caplog):
    with caplog.at_level("WARNING"):
        ps = fit_prototypes(np.array([[0.0, 0.0]]), np.array([1]), class_ids=[1, 2])
    assert 2 not in ps
    assert 1 in ps
    assert any("class 2" in r.message for r in caplog.records)


def test_fit_empty_input_rejected():
    with pytest.raises(ValueError):
        fit_prototypes(np.zeros((0, 2)), np.zeros(0, dtype=int))


# ---------------------------------------------------------------------------
# log_density


def test_log_density_at_mean_standard():
    for d in (1, 2, 5):
        p = std_prototype(dim=d)
        assert log_density(p, np.zeros(d)) == pytest.approx(-(d / 2) * math.log(2 * math.pi))


def test_log_density_unit_variance_offset():
    p = std_prototype(dim=3)
    at_mean = log_density(p, np.zeros(3))
    z = 1.7
    off = np.array([z, 0.0, 0.0])
    assert log_density(p, off) == pytest.approx(at_mean - z**2 / 2)


def test_log_density_matches_per_dimension_sum():
    rng = np.random.default_rng(1)
    mean = rng.normal(size=4)
    var = rng.uniform(0.5, 2.0, size=4)
    p = GaussianPrototype(class_id=0, mean=mean, var=var, count=3)
    u = rng.normal(size=4)
    manual = sum(
        -0.5 * (math.log(2 * math.pi * var[j]) + (u[j] - mean[j]) ** 2 / var[j])
        for j in range(4)
    )
    assert log_density(p, u) == pytest.approx(manual, abs=1e-12)


def test_log_density_dim_mismatch():
    with pytest.raises(ValueError):
        log_density(std_prototype(dim=2), np.zeros(3))


# ---------------------------------------------------------------------------
# sample_proxy


def test_sample_proxy_zero_draws():
    ps = std_set(std_prototype())
    out = sample_proxy(ps, 0, 0, seed=1)
    assert out.shape == (0, 2)


def test_sample_proxy_floored_variance_sticks_to_mean():
    p = GaussianPrototype(class_id=0, mean=np.array([4.0, -2.0]), var=np.full(2, 1e-6), count=1)
    ps = std_set(p)
    draws = sample_proxy(ps, 0, 500, seed=2)
    assert np.abs(draws - p.mean).max() < 0.01  # 3 sigma at sigma=1e-3


def test_sample_proxy_monte_carlo_mean():
    p = GaussianPrototype(class_id=3, mean=np.array([2.0, -1.0]), var=np.array([1.0, 4.0]), count=9)
    ps = std_set(p)
    draws = sample_proxy(ps, 3, 10_000, seed=3)
    assert np.abs(draws.mean(axis=0) - p.mean).max() < 0.05 * 2  # sigma up to 2


def test_sample_proxy_unknown_class():
    ps = std_set(std_prototype())
    with pytest.raises(ValueError):
        sample_proxy(ps, 9, 5, seed=0)


def test_sample_proxy_deterministic():
    ps = std_set(std_prototype())
    np.testing.assert_array_equal(sample_proxy(ps, 0, 10, seed=5), sample_proxy(ps, 0, 10, seed=5))


# ---------------------------------------------------------------------------
# is_ood


def test_is_ood_false_at_mean():
    ps = std_set(std_prototype(), std_prototype(cid=1, mean=[10.0, 0.0]))
    for p in ps.prototypes.values():
        flag, _ = is_ood(ps, p.mean, 3.0)
        assert not flag


def test_is_ood_true_at_four_sigma():
    ps = std_set(std_prototype())
    flag, dists = is_ood(ps, np.array([4.0, 0.0]), 3.0)
    assert flag
    assert dists[0] == pytest.approx(4.0)


def test_is_ood_boundary_is_inside():
    ps = std_set(std_prototype())
    flag, _ = is_ood(ps, np.array([3.0, 0.0]), 3.0)
    assert not flag


def test_is_ood_monotone_in_k():
    ps = std_set(std_prototype(), std_prototype(cid=1, mean=[8.0, 8.0]))
    rng = np.random.default_rng(4)
    for _ in range(200):
        u = rng.normal(scale=4.0, size=2)
        flags = [is_ood(ps, u, k)[0] for k in (1.0, 2.0, 3.0, 4.0, 5.0)]
        # once inside at some k, stays inside for larger k
        for a, b in zip(flags, flags[1:]):
            assert a or not b


def test_is_ood_empty_set_rejected():
    ps = PrototypeSet(latent_dim=2, prototypes={})
    with pytest.raises(RuntimeError):
        is_ood(ps, np.zeros(2), 3.0)


# ---------------------------------------------------------------------------
# class separability loss


def test_separability_equal_densities_ln2():
    ps = std_set(std_prototype(cid=0, mean=[-1.0, 0.0]), std_prototype(cid=1, mean=[1.0, 0.0]))
    loss, _ = class_separability_loss(ps, np.zeros(2), 0)
    assert loss == pytest.approx(math.log(2))


def test_separability_dominant_class_near_zero():
    # correct-class log density beats the other by >= 20
    ps = std_set(std_prototype(cid=0), std_prototype(cid=1, mean=[7.0, 0.0]))
    loss, _ = class_separability_loss(ps, np.zeros(2), 0)
    assert loss < 1e-8


def test_separability_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    protos = [
        GaussianPrototype(
            class_id=c,
            mean=rng.normal(size=3),
            var=rng.uniform(0.5, 2.0, size=3),
            count=4,
        )
        for c in range(3)
    ]
    ps = std_set(*protos)
    u = rng.normal(size=3)
    _, grad = class_separability_loss(ps, u, 1)
    numeric = fd_vector_grad(lambda: class_separability_loss(ps, u, 1)[0], u)
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-7)


def test_separability_unknown_class():
    ps = std_set(std_prototype())
    with pytest.raises(ValueError):
        class_separability_loss(ps, np.zeros(2), 7)


def test_separability_descent_on_latent():
    rng = np.random.default_rng(6)
    ps = std_set(
        std_prototype(cid=0, mean=rng.normal(size=2) * 2),
        std_prototype(cid=1, mean=rng.normal(size=2) * 2),
    )
    u = rng.normal(size=2) * 3
    loss, grad = class_separability_loss(ps, u, 0)
    for _ in range(100):
        u = u - 0.1 * grad
        new_loss, grad = class_separability_loss(ps, u, 0)
        assert new_loss < loss or new_loss < 1e-6
        loss = new_loss


# ---------------------------------------------------------------------------
# replay fidelity and serialization


def test_fit_sample_fit_round_trip():
    rng = np.random.default_rng(7)
    mean, var = np.array([0.5, -2.0]), np.array([1.0, 0.25])
    x = mean + np.sqrt(var) * rng.standard_normal((10_000, 2))
    ps = fit_prototypes(x, np.zeros(10_000, dtype=int))
    draws = sample_proxy(ps, 0, 10_000, seed=8)
    refit = fit_prototypes(draws, np.zeros(10_000, dtype=int))
    assert np.abs(refit.get(0).mean - mean).max() < 0.1
    assert np.abs(refit.get(0).var - var).max() < 0.1


def test_proxy_samples_rarely_flagged_ood():
    ps = std_set(std_prototype(cid=0, mean=[1.0, -1.0]))
    draws = sample_proxy(ps, 0, 10_000, seed=9)
    rate = proto.is_ood_batch(ps, draws, 3.0).mean()
    assert rate < 0.01


def test_merge_prototype_sets_count_weighted():
    a = std_set(GaussianPrototype(0, np.array([0.0]), np.array([1.0]), 100))
    b = std_set(GaussianPrototype(0, np.array([2.0]), np.array([1.0]), 100))
    merged = merge_prototype_sets(a, b)
    p = merged.get(0)
    assert p.count == 200
    assert p.mean[0] == pytest.approx(1.0)
    # between-group spread adds 1.0 to the pooled variance
    assert p.var[0] == pytest.approx(2.0)


def test_json_round_trip(tmp_path):
    ps = std_set(
        GaussianPrototype(0, np.array([0.1, 0.2]), np.array([1.0, 2.0]), 7),
        GaussianPrototype(3, np.array([-1.0, 4.0]), np.array([0.5, 1e-6]), 2),
    )
    path = tmp_path / "ps.json"
    ps.save(path)
    back = PrototypeSet.load(path)
    assert back.class_ids == [0, 3]
    for cid in back.class_ids:
        np.testing.assert_array_equal(back.get(cid).mean, ps.get(cid).mean)
        np.testing.assert_array_equal(back.get(cid).var, ps.get(cid).var)
        assert back.get(cid).count == ps.get(cid).count


def test_batch_separability_matches_single():
    rng = np.random.default_rng(10)
    ps = std_set(std_prototype(cid=0), std_prototype(cid=1, mean=[3.0, 3.0]))
    u = rng.normal(size=(6, 2))
    y = rng.integers(0, 2, size=6)
    batch_loss, _ = separability_loss_batch(ps, u, y)
    singles = [class_separability_loss(ps, u[i], int(y[i]))[0] for i in range(6)]
    assert batch_loss == pytest.approx(np.mean(singles))
