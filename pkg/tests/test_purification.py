import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import random_gaussians, small_view
from splatloop.metrics import MetricShapeError
from splatloop.purification import (AnnealSchedule, DynamicMask, InsufficientPointsError, InvalidInputError,
                                    PruneSchedule, PurificationError, anneal_opacity, clean_mask, combined_score,
                                    depth_weight, extract_dynamic_mask, knn_density, minmax, opacity_noise,
                                    stage1_loss, survival_and_mask, survival_probability, update_dropout_streak)
from splatloop.render import render
from splatloop.scene import AnchorTrack, SceneModel


def test_knn_examples():
    rho = knn_density(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]), k=1)
    assert np.allclose(rho, [1, 1, 1])
    pts = np.random.default_rng(0).normal(size=(20, 3))
    assert np.allclose(knn_density(pts * 3.0, k=4), knn_density(pts, k=4) / 3.0)
    dup = np.array([[0.0, 0, 0], [0, 0, 0], [5, 0, 0]])
    assert knn_density(dup, k=1, rho_max=1e3)[0] == 1e3
    with pytest.raises(InsufficientPointsError):
        knn_density(np.zeros((3, 3)), k=3)


def test_minmax_constant_is_zero():
    assert np.all(minmax(np.full(4, 2.5)) == 0)
    assert np.allclose(minmax([1.0, 3.0, 2.0]), [0, 1, 0.5])


def test_survival_examples():
    rng = np.random.default_rng(1)
    depth, dens = rng.uniform(1, 5, 50), rng.uniform(0, 3, 50)
    p, m = survival_and_mask(depth, dens, 0.0, rng_seed=0)
    assert np.all(p == 1) and m.all()
    p = survival_probability(depth, dens, 0.8)
    assert p[np.argmin(combined_score(depth, dens))] == 1.0
    # nearest and densest primitive with full depth weight saturates at zero survival
    depth = np.array([0.0001, 5.0, 6.0, 7.0])
    dens = np.array([10.0, 1.0, 0.5, 0.0])
    p = survival_probability(depth, dens, 1.0, d_max=7.0)
    assert np.isclose(p[0], 0.0, atol=1e-4)
    _, m = survival_and_mask(np.full(10_000, 1.0), np.zeros(10_000), 0.0, rng_seed=3)
    assert m.all()


def test_survival_input_errors():
    with pytest.raises(InvalidInputError):
        survival_probability(np.array([1.0, np.nan]), np.ones(2), 0.5)
    with pytest.raises(InvalidInputError):
        survival_probability(np.ones(2), np.ones(3), 0.5)
    with pytest.raises(InvalidInputError):
        survival_probability(np.ones(2), np.ones(2), 1.5)


def test_bernoulli_rate_at_p07():
    n = 10_000
    # probes sit at depth ~0 with top density (w = s = 1); one deep sparse anchor fixes the normalisation
    p, m = survival_and_mask(np.r_[np.full(n, 1e-9), 10.0], np.r_[np.full(n, 1.0), 0.0], 0.3, rng_seed=11,
                             d_max=1.0)
    assert np.allclose(p[:n], 0.7, atol=1e-8)
    assert 0.68 <= m[:n].mean() <= 0.72


@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
def test_pressure_is_monotone(seed, e1, e2):
    rng = np.random.default_rng(seed)
    depth, dens = rng.uniform(0.5, 5, 30), rng.uniform(0, 2, 30)
    lo, hi = sorted((e1, e2))
    assert np.all(survival_probability(depth, dens, hi) <= survival_probability(depth, dens, lo) + 1e-12)


@given(st.integers(0, 10_000), st.floats(0.05, 1.0))
def test_shallower_and_denser_are_pruned_harder(seed, eta):
    rng = np.random.default_rng(seed)
    depth, dens = rng.uniform(0.5, 5, 30), rng.uniform(0, 2, 30)
    depth[1], dens[1] = depth[0] + 0.5, dens[0]
    dens[3], depth[3] = dens[2] + 0.5, depth[2]
    p = survival_probability(depth, dens, eta)
    assert p[0] <= p[1] + 1e-12
    assert p[3] <= p[2] + 1e-12


def test_depth_weight_is_linear_decay():
    w = depth_weight(np.array([0.0, 1.0, 2.0, 4.0, -1.0]), d_max=2.0)
    # non-positive depth is behind the camera and carries no weight
    assert np.allclose(w, [0.0, 0.5, 0.0, 0.0, 0.0])
    assert np.allclose(depth_weight(np.array([0.5, 1.0, 2.0]), d_max=2.0), [0.75, 0.5, 0.0])


def test_dropout_streak_rule():
    s = np.zeros(4, dtype=np.int64)
    s = update_dropout_streak(s, np.array([False, True, False, True]), np.array([0.5, 0.5, 1.0, 1.0]))
    assert list(s) == [1, 0, 1, 0]
    s = update_dropout_streak(s, np.array([False, True, True, True]), np.array([0.5, 0.5, 1.0, 0.9]))
    # a keep at p = 1 leaves the streak alone; a keep under pressure resets it
    assert list(s) == [2, 0, 1, 0]


def test_schedules():
    ps = PruneSchedule(0.0, 1.0, 100)
    assert ps.eta(0) == 0 and ps.eta(50) == 0.5 and ps.eta(500) == 1.0
    an = AnnealSchedule(0.3, 0.0, 100)
    assert an.sigma(0) == 0.3 and an.sigma(100) == 0.0
    with pytest.raises(PurificationError):
        PruneSchedule(0.0, 2.0, 10)


def test_annealing_examples():
    a = np.random.default_rng(0).uniform(0, 1, 50)
    assert np.array_equal(anneal_opacity(a, 0.0, 5), a)
    assert np.all(anneal_opacity(np.zeros(20), 0.5, 1) == 0)
    n = opacity_noise(10_000, 0.1, 7)
    assert abs(np.mean(n * 0.5 / 0.5) - 1.0) <= 0.01
    out = anneal_opacity(np.full(1000, 0.9), 0.5, 3)
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(PurificationError):
        opacity_noise(3, -0.1)


def test_annealing_variance_grows_with_sigma():
    rng = np.random.default_rng(1)
    gs = random_gaussians(rng, 1)
    gs.means[:] = 0.0
    gs.opacity_logits[:] = -1.5
    view = small_view()
    var = []
    for sigma in (0.05, 0.2, 0.5):
        noise = np.random.default_rng(2)
        samples = [render(gs, view, opacity_multiplier=opacity_noise(1, sigma, noise), retain=False).color[16, 16]
                   for _ in range(1000)]
        var.append(np.var(np.array(samples)[:, 0]))
    assert var[0] < var[1] < var[2]


def test_clean_mask_components():
    img = np.zeros((20, 20))
    img[1, 1:3] = 1.0
    img[5:15, 5:15] = 1.0
    m = clean_mask(img, 0.5, 5)
    assert m[1, 1] == 0 and m[1, 2] == 0
    assert m[5:15, 5:15].all() and m.sum() == 100
    diag = np.eye(4)
    assert clean_mask(diag, 0.5, 2).sum() == 0  # diagonal pixels are not 4-connected


def test_extract_mask_examples():
    rng = np.random.default_rng(3)
    view = small_view()
    static = SceneModel.from_static(random_gaussians(rng, 3), (0.0, 1.0))
    assert extract_dynamic_mask(static, 0.0, view).mask.sum() == 0
    big = random_gaussians(rng, 1, scale=(0.3, 0.3), first_id=5)
    big.means[:] = 0.0
    big.opacity_logits[:] = 10.0
    scene = SceneModel(random_gaussians(rng, 2), AnchorTrack.from_static([0.0, 1.0], big), (0.0, 1.0))
    m = extract_dynamic_mask(scene, 0.5, view).mask
    from scipy import ndimage
    assert m.sum() > 20 and ndimage.label(m)[1] == 1


def test_stage1_loss_examples():
    rng = np.random.default_rng(4)
    gt = rng.uniform(0, 1, (16, 16, 3))
    loss, grad = stage1_loss(gt.copy(), gt, np.ones((16, 16)))
    assert abs(loss) < 1e-12
    pred = np.clip(gt + rng.normal(0, 0.1, gt.shape), 0, 1)
    base, _ = stage1_loss(pred, gt, None)
    zero, _ = stage1_loss(pred, gt, DynamicMask(np.zeros((16, 16), dtype=np.uint8), 0.5, 4))
    assert zero == base
    full, _ = stage1_loss(pred, gt, np.ones((16, 16)), lambda_dy=0.2)
    assert np.isclose(full - base, 0.2 * np.mean(np.abs(pred - gt)))
    with pytest.raises(MetricShapeError):
        stage1_loss(pred, gt[:8], None)
    with pytest.raises(MetricShapeError):
        stage1_loss(pred, gt, np.ones((8, 8)))


def test_stage1_loss_gradient():
    rng = np.random.default_rng(5)
    gt = rng.uniform(0, 1, (12, 12, 3))
    pred = rng.uniform(0, 1, (12, 12, 3))
    mask = (rng.uniform(size=(12, 12)) > 0.5).astype(np.uint8)
    _, g = stage1_loss(pred, gt, mask)
    h = 1e-6
    for idx in [(0, 0, 0), (5, 7, 1), (11, 3, 2), (6, 6, 0)]:
        p1, p2 = pred.copy(), pred.copy()
        p1[idx] += h
        p2[idx] -= h
        fd = (stage1_loss(p1, gt, mask)[0] - stage1_loss(p2, gt, mask)[0]) / (2 * h)
        assert abs(fd - g[idx]) < 1e-6
