import numpy as np
import pytest

from cpit.fourier import DimensionMismatch, fourier_mix
from cpit.model import (
    CheckpointError, CpitConfig, NonFiniteLoss, PreparedPatches, StylePool, build_views, combine, draw_styles,
    features, forward, grad_check, init_classifier, load_checkpoint, loss, loss_and_grad, mixed_logits,
    mixed_scores, predict, predict_batch, render_views, save_checkpoint, softmax, train, view_features,
)
from cpit.stain import reinhard_normalize

SIDE = 12


def make_pool(rng, n=8, side=SIDE):
    doms = np.array(["a"] * (n // 2) + ["b"] * (n - n // 2))
    return StylePool(rng.random((n, side, side, 3)), doms)


def random_clf(rng, hidden=0, k=3, input_side=4):
    clf = init_classifier(input_side, k, hidden, rng)
    for key in clf.params:
        clf.params[key] = rng.normal(0, 0.5, clf.params[key].shape)
    return clf


# --- views ------------------------------------------------------------------


def test_rendered_views_match_reference_transforms():
    rng = np.random.default_rng(0)
    pool = make_pool(rng)
    xs = rng.random((3, SIDE, SIDE, 3))
    cfg = CpitConfig(n_styles=2)
    idx, lam = draw_styles(pool, cfg, np.random.default_rng(1), 3)
    fourier, stain = render_views(PreparedPatches(xs), pool, idx, lam)
    for b in range(3):
        for i in range(2):
            entry = pool.entry(idx[b, i])
            # training views use single-precision spectra
            np.testing.assert_allclose(fourier[b, i], fourier_mix(xs[b], entry.image, lam[b, i]), atol=1e-5)
            np.testing.assert_allclose(stain[b, i], reinhard_normalize(xs[b], entry.stats), atol=1e-10)


def test_view_features_match_full_render():
    rng = np.random.default_rng(2)
    pool = make_pool(rng, side=20)
    xs = PreparedPatches(rng.random((2, 20, 20, 3)))
    clf = init_classifier(5, 2)
    idx, lam = draw_styles(pool, CpitConfig(n_styles=3), np.random.default_rng(3), 2)
    fast_f, fast_s = view_features(clf, xs, pool, idx, lam)
    full_f, full_s = render_views(xs, pool, idx, lam)
    np.testing.assert_allclose(fast_f, features(clf, full_f), atol=1e-12)
    np.testing.assert_allclose(fast_s, features(clf, full_s), atol=1e-12)


def test_pool_size_mismatch():
    rng = np.random.default_rng(4)
    pool = make_pool(rng)
    with pytest.raises(DimensionMismatch):
        mixed_logits(init_classifier(4, 2), rng.random((SIDE + 1, SIDE, 3)), pool, CpitConfig(), rng)
    resized = StylePool(pool.patches.images, pool.patches.domains, size=(SIDE + 1, SIDE))
    assert mixed_logits(init_classifier(4, 2), rng.random((SIDE + 1, SIDE, 3)), resized, CpitConfig(), rng).shape == (2,)


def test_style_pool_is_uniform_over_domains():
    rng = np.random.default_rng(5)
    pool = StylePool(rng.random((10, 4, 4, 3)), np.array(["small"] + ["big"] * 9))
    draws = pool.sample(np.random.default_rng(6), 20_000)
    assert abs(np.mean(draws == 0) - 0.5) < 0.02


# --- mixed prediction -------------------------------------------------------


@pytest.mark.parametrize("hidden", [0, 6])
def test_mixed_logits_match_explicit_formula(hidden):
    rng = np.random.default_rng(7)
    pool = make_pool(rng)
    clf = random_clf(rng, hidden)
    x = rng.random((SIDE, SIDE, 3))
    cfg = CpitConfig(n_styles=3, gamma=0.3, beta=0.25)
    z = mixed_logits(clf, x, pool, cfg, np.random.default_rng(8))
    idx, lam = draw_styles(pool, cfg, np.random.default_rng(8), 1)
    fourier, stain = render_views(PreparedPatches(x[None]), pool, idx, lam)
    expected = cfg.beta * forward(clf, x)
    for i in range(cfg.n_styles):
        expected = expected + (1 - cfg.beta) / cfg.n_styles * (
            cfg.gamma * forward(clf, fourier[0, i]) + (1 - cfg.gamma) * forward(clf, stain[0, i]))
    np.testing.assert_allclose(z, expected, atol=1e-9)


@pytest.mark.parametrize("mix_space", ["logits", "probs"])
def test_mixed_score_is_within_view_bounds(mix_space):
    rng = np.random.default_rng(9)
    pool = make_pool(rng)
    clf = random_clf(rng)
    cfg = CpitConfig(n_styles=4, mix_space=mix_space)
    xs = PreparedPatches(rng.random((5, SIDE, SIDE, 3)))
    views = build_views(clf, xs, pool, cfg, np.random.default_rng(10))
    logits, _, _, _ = combine(clf.params, views)
    per_view = softmax(logits) if mix_space == "probs" else logits
    mixed = mixed_scores(clf.params, views)
    assert np.all(mixed >= per_view.min(axis=1) - 1e-12)
    assert np.all(mixed <= per_view.max(axis=1) + 1e-12)


def test_view_weights_sum_to_one():
    for cfg in (CpitConfig(), CpitConfig(beta=0.0, gamma=1.0, n_styles=7)):
        w0, wf, ws = cfg.view_weights()
        assert w0 + cfg.n_styles * (wf + ws) == pytest.approx(1.0, abs=1e-15)


def test_tie_breaks_to_lowest_class():
    clf = init_classifier(4, 2)
    label, probs = predict(clf, np.full((8, 8, 3), 0.5))
    assert label == 0 and np.allclose(probs, 0.5)


def test_beta_near_one_is_plain_prediction():
    rng = np.random.default_rng(11)
    pool, clf = make_pool(rng), random_clf(rng)
    x = rng.random((SIDE, SIDE, 3))
    _, p_mixed = predict(clf, x, pool, CpitConfig(beta=1 - 1e-12), rng)
    _, p_plain = predict(clf, x, marginalize=False)
    np.testing.assert_allclose(p_mixed, p_plain, atol=1e-9)


def test_predict_is_reproducible():
    rng = np.random.default_rng(12)
    pool, clf = make_pool(rng), random_clf(rng)
    x = rng.random((SIDE, SIDE, 3))
    a = predict(clf, x, pool, CpitConfig(), np.random.default_rng(3))
    b = predict(clf, x, pool, CpitConfig(), np.random.default_rng(3))
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_variance_shrinks_like_one_over_n():
    rng = np.random.default_rng(13)
    pool, clf = make_pool(rng, n=40), random_clf(rng, k=2)
    x = rng.random((SIDE, SIDE, 3))
    var = {}
    for n in (1, 4, 16):
        cfg = CpitConfig(n_styles=n)
        zs = np.array([mixed_logits(clf, x, pool, cfg, np.random.default_rng(s)) for s in range(600)])
        var[n] = zs[:, 0].var()
    # each fourfold increase in N should cut the variance by about four
    assert 2.5 < var[1] / var[4] < 6.5
    assert 2.5 < var[4] / var[16] < 6.5


# --- loss and gradients -----------------------------------------------------


@pytest.mark.parametrize("k", [2, 3, 5])
def test_initial_loss_is_log_k(k):
    rng = np.random.default_rng(14)
    value, _ = loss(init_classifier(4, k), rng.random((SIDE, SIDE, 3)), 1, make_pool(rng), CpitConfig(), rng)
    assert value == pytest.approx(np.log(k), abs=1e-12)


@pytest.mark.parametrize("hidden", [0, 5])
@pytest.mark.parametrize("mix_space", ["logits", "probs"])
def test_grad_check_full_objective(hidden, mix_space):
    rng = np.random.default_rng(15)
    pool, clf = make_pool(rng), random_clf(rng, hidden)
    xs, ys = rng.random((3, SIDE, SIDE, 3)), np.array([0, 2, 1])
    err = grad_check(clf, xs, ys, pool, CpitConfig(n_styles=2, mix_space=mix_space), seed=1)
    assert err < 1e-4


@pytest.mark.parametrize("hidden", [0, 5])
def test_grad_check_detects_corrupted_gradient(hidden):
    rng = np.random.default_rng(16)
    pool, clf = make_pool(rng), random_clf(rng, hidden)
    xs, ys = rng.random((2, SIDE, SIDE, 3)), np.array([0, 1])

    def corrupted(params, views, labels):
        value, grads = loss_and_grad(params, views, labels)
        return value, {k: g * 1.1 for k, g in grads.items()}

    err = grad_check(clf, xs, ys, pool, CpitConfig(n_styles=2), seed=1, grad_fn=corrupted)
    assert err > 1e-2


# --- training ---------------------------------------------------------------


def toy_problem(rng, n=60):
    labels = rng.integers(2, size=n)
    imgs = 0.3 + 0.1 * rng.random((n, SIDE, SIDE, 3))
    imgs[labels == 1, : SIDE // 2] += 0.4
    return PreparedPatches(imgs, np.where(np.arange(n) % 2, "a", "b")), labels


def test_zero_learning_rate_leaves_parameters():
    rng = np.random.default_rng(17)
    samples, labels = toy_problem(rng)
    clf = random_clf(rng, 4, k=2)
    pool = StylePool.from_prepared(samples)
    out = train(clf, samples, labels, pool, CpitConfig(n_styles=2), epochs=2, lr=0.0, rng=rng).classifier
    for key in clf.params:
        assert np.array_equal(out.params[key], clf.params[key])


def test_training_reduces_loss_and_is_deterministic():
    rng = np.random.default_rng(18)
    samples, labels = toy_problem(rng)
    pool = StylePool.from_prepared(samples)
    clf = init_classifier(4, 2)
    runs = [train(clf, samples, labels, pool, CpitConfig(n_styles=2), epochs=8, lr=0.5,
                  rng=np.random.default_rng(5)) for _ in range(2)]
    assert runs[0].losses[-1] < 0.5 * runs[0].losses[0]
    assert runs[0].losses == runs[1].losses
    assert np.array_equal(runs[0].classifier.param_vector(), runs[1].classifier.param_vector())
    preds, _ = predict_batch(runs[0].classifier, samples)
    assert np.mean(preds == labels) > 0.9


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_training_raises():
    rng = np.random.default_rng(19)
    samples, labels = toy_problem(rng)
    with pytest.raises(NonFiniteLoss):
        train(random_clf(rng, k=2), samples, labels, None, None, epochs=3, lr=np.inf, rng=rng)


def test_config_validation():
    for bad in (dict(eta=1.5), dict(gamma=-0.1), dict(beta=1.0), dict(n_styles=0), dict(mix_space="x")):
        with pytest.raises(ValueError):
            CpitConfig(**bad)


# --- checkpoints ------------------------------------------------------------


def test_checkpoint_round_trip_and_bytes(tmp_path):
    rng = np.random.default_rng(20)
    clf, cfg = random_clf(rng, 3), CpitConfig(gamma=0.4)
    save_checkpoint(clf, tmp_path / "a.ckpt", cfg, {"note": 1})
    save_checkpoint(clf, tmp_path / "b.ckpt", cfg, {"note": 1})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    back, back_cfg, header = load_checkpoint(tmp_path / "a.ckpt")
    assert back_cfg == cfg and header["extra"] == {"note": 1}
    assert np.array_equal(back.param_vector(), clf.param_vector())
    assert (back.input_side, back.num_classes, back.hidden_dim) == (clf.input_side, clf.num_classes, 3)


def test_checkpoint_version_mismatch(tmp_path, monkeypatch):
    import cpit.model as model
    monkeypatch.setattr(model, "CHECKPOINT_VERSION", 99)
    save_checkpoint(init_classifier(2, 2), tmp_path / "new.ckpt")
    monkeypatch.setattr(model, "CHECKPOINT_VERSION", 1)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "new.ckpt")


def test_pool_of_copies_reproduces_plain_logits():
    # every transform of x with x itself as the style returns x (up to clamping)
    rng = np.random.default_rng(21)
    x = rng.random((SIDE, SIDE, 3))
    pool = StylePool(np.stack([x] * 4), np.array(["a", "a", "b", "b"]))
    clf = random_clf(rng, 4)
    for cfg in (CpitConfig(), CpitConfig(gamma=1.0, n_styles=1, beta=0.6)):
        z = mixed_logits(clf, x, pool, cfg, rng)
        np.testing.assert_allclose(z, forward(clf, x), atol=1e-4)
