import math

import numpy as np
import pytest

from tido import nn
from tido.exceptions import TrainingDiverged
from tido.foresight import SourceModel
from tido.incremental import (
    AutoEncoder,
    ClassRegistry,
    ConfidentSet,
    GuideSet,
    IncrementConfig,
    IncrementState,
    TargetModel,
    accumulate_losses,
    init_guides,
    joint_predict,
    load_increment_checkpoint,
    loss_c,
    loss_d,
    loss_r1,
    loss_r2,
    make_optimizers,
    new_state,
    pretrain_autoencoder,
    pseudo_label,
    pseudo_label_batch,
    run_increment,
    save_increment_checkpoint,
    select_confident,
    update_gradients,
)
from tido.prototypes import GaussianPrototype, PrototypeSet

from gradcheck import check_loss_grads


def tiny_state(seed=0, n_shared=3, latent=2, n_private=0, ae_hidden=(), in_dim=2):
    """Small random state with prototypes for every registered class."""
    rng = np.random.default_rng(seed)
    model = SourceModel(
        feature=nn.Mlp([in_dim, 5, latent], seed=seed),
        classifier=nn.Mlp([latent, 6, n_shared + 1], seed=seed + 1),
    )
    protos = {}
    for cid in range(n_shared + n_private):
        protos[cid] = GaussianPrototype(
            cid, rng.normal(scale=2.0, size=latent), rng.uniform(0.05, 0.3, size=latent), 40
        )
    ps = PrototypeSet(latent_dim=latent, prototypes=protos)
    cfg = IncrementConfig(seed=seed, ae_hidden=ae_hidden)
    state = new_state(model, ps, list(range(n_shared)), cfg)
    if n_private:
        state.target.classifier.widen_output(n_private, rng)
        state.registry.private = list(range(n_shared, n_shared + n_private))
    return state, cfg


def make_guides(vects):
    return GuideSet(
        guides={c: np.asarray(v, float) for c, v in vects.items()},
        prototype_backed=sorted(vects),
        one_shot=[],
    )


# ---------------------------------------------------------------------------
# autoencoder pretraining


def test_pretrain_autoencoder_reaches_low_reconstruction():
    state, cfg = tiny_state(ae_hidden=(8,))
    ae = state.autoencoder
    pretrain_autoencoder(state.prototypes, ae, 200, 32, seed=1, learning_rate=1e-2)
    u, _ = __import__("tido.prototypes", fromlist=["sample_proxy_all"]).sample_proxy_all(
        state.prototypes, 64, 5
    )
    rec = ae.decoder.forward(ae.encoder.forward(u))
    assert nn.mse(rec, u) < 1e-3


def test_pretrain_zero_epochs_is_noop():
    state, cfg = tiny_state(ae_hidden=(8,))
    before = [w.copy() for w in state.autoencoder.encoder.weights]
    pretrain_autoencoder(state.prototypes, state.autoencoder, 0, 32, seed=1)
    for w0, w1 in zip(before, state.autoencoder.encoder.weights):
        np.testing.assert_array_equal(w0, w1)


def test_pretrain_deterministic():
    s1, _ = tiny_state(ae_hidden=(8,))
    s2, _ = tiny_state(ae_hidden=(8,))
    pretrain_autoencoder(s1.prototypes, s1.autoencoder, 50, 32, seed=3)
    pretrain_autoencoder(s2.prototypes, s2.autoencoder, 50, 32, seed=3)
    for w1, w2 in zip(s1.autoencoder.encoder.weights, s2.autoencoder.encoder.weights):
        np.testing.assert_array_equal(w1, w2)


def test_identity_autoencoder_starts_perfect():
    state, _ = tiny_state(ae_hidden=())
    u = np.random.default_rng(0).normal(size=(10, 2))
    np.testing.assert_array_equal(state.autoencoder.decoder.forward(
        state.autoencoder.encoder.forward(u)), u)


# ---------------------------------------------------------------------------
# guides


def test_init_guides_without_private_uses_encoded_means():
    state, _ = tiny_state()
    guides = init_guides(state, {})
    assert sorted(guides.guides) == [0, 1, 2]
    for cid in guides.guides:
        np.testing.assert_allclose(
            guides.guides[cid],
            state.autoencoder.encoder.forward(state.prototypes.get(cid).mean),
        )
    assert guides.one_shot == []


def test_init_guides_identity_encoder_equals_means():
    state, _ = tiny_state(ae_hidden=())
    guides = init_guides(state, {})
    for cid in guides.guides:
        np.testing.assert_array_equal(guides.guides[cid], state.prototypes.get(cid).mean)


def test_init_guides_recomputed_after_encoder_step():
    state, _ = tiny_state(ae_hidden=(8,))
    g1 = init_guides(state, {})
    opt = nn.AdamState.for_params(state.autoencoder.encoder.params(), learning_rate=0.05)
    grads = [(np.ones_like(w), np.ones_like(b)) for w, b in
             zip(state.autoencoder.encoder.weights, state.autoencoder.encoder.biases)]
    state.autoencoder.encoder.apply_adam(grads, opt)
    g2 = init_guides(state, {})
    assert any(
        not np.array_equal(g1.guides[c], g2.guides[c]) for c in g1.guides
    )


def test_init_guides_one_shot_overrides():
    state, _ = tiny_state()
    x_shot = np.array([0.3, -0.2])
    state.target.classifier.widen_output(1, np.random.default_rng(0))
    state.registry.private = [3]
    guides = init_guides(state, {3: x_shot})
    np.testing.assert_allclose(guides.guides[3], state.target.feature.forward(x_shot))
    assert guides.one_shot == [3]
    assert sorted(guides.prototype_backed) == [0, 1, 2]


def test_init_guides_missing_class_named():
    state, _ = tiny_state()
    state.registry.private = [9]  # registered but no prototype, no one-shot
    with pytest.raises(ValueError, match="9"):
        init_guides(state, {})


# ---------------------------------------------------------------------------
# pseudo labels and confident selection


def test_pseudo_label_exact_guide_match():
    guides = make_guides({7: [1.0, 2.0], 3: [-1.0, 0.0]})
    k, d = pseudo_label(np.array([1.0, 2.0]), guides)
    assert (k, d) == (7, 0.0)


def test_pseudo_label_nearest_and_distance():
    guides = make_guides({0: [0.0, 0.0], 1: [10.0, 0.0]})
    k, d = pseudo_label(np.array([1.0, 0.0]), guides)
    assert k == 0
    assert d == pytest.approx(1.0)


def test_pseudo_label_tie_breaks_to_lowest_class():
    guides = make_guides({5: [1.0, 0.0], 2: [-1.0, 0.0]})
    k, _ = pseudo_label(np.array([0.0, 0.0]), guides)
    assert k == 2


def test_pseudo_label_matches_brute_force():
    rng = np.random.default_rng(0)
    guides = make_guides({c: rng.normal(size=3) for c in range(50)})
    pts = rng.normal(size=(500, 3))
    ids, dists = pseudo_label_batch(pts, guides)
    order = guides.class_order()
    mat = guides.matrix()
    for i in range(500):
        best = min(
            range(50), key=lambda j: (np.linalg.norm(pts[i] - mat[j]), order[j])
        )
        assert ids[i] == order[best]
        assert dists[i] == pytest.approx(np.linalg.norm(pts[i] - mat[best]))


def test_select_confident_keeps_everything_at_one():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(30, 2))
    v = rng.normal(size=(30, 2))
    ids = rng.integers(0, 3, size=30)
    dists = rng.uniform(size=30)
    conf = select_confident(x, v, ids, dists, 1.0)
    assert len(conf) == 30


def test_select_confident_keeps_two_nearest_of_twenty():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(20, 2))
    dists = rng.permutation(20).astype(float)
    conf = select_confident(x, x, np.zeros(20, dtype=int), dists, 0.1)
    kept_x, _, kept_d = conf.per_class[0]
    assert kept_x.shape[0] == 2
    np.testing.assert_array_equal(kept_d, np.sort(dists)[:2])


def test_select_confident_absent_class_absent():
    x = np.zeros((4, 2))
    conf = select_confident(x, x, np.array([1, 1, 3, 3]), np.arange(4.0), 0.5)
    assert sorted(conf.per_class) == [1, 3]


def test_select_confident_matches_sort_oracle():
    rng = np.random.default_rng(3)
    n = 200
    x = rng.normal(size=(n, 2))
    ids = rng.integers(0, 5, size=n)
    dists = rng.uniform(size=n)
    frac = 0.3
    conf = select_confident(x, x, ids, dists, frac)
    for cid in range(5):
        rows = np.flatnonzero(ids == cid)
        expect = rows[np.argsort(dists[rows], kind="stable")][: math.ceil(frac * rows.size)]
        kept_x, _, _ = conf.per_class[cid]
        np.testing.assert_array_equal(kept_x, x[expect])


def test_select_confident_rejects_bad_fraction():
    with pytest.raises(ValueError):
        select_confident(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros(1, int), np.zeros(1), 0.0)


# ---------------------------------------------------------------------------
# joint prediction


def test_joint_predict_shape_and_normalization():
    state, _ = tiny_state(n_private=2)
    x = np.random.default_rng(4).normal(size=(6, 2))
    probs, preds = joint_predict(state, x)
    assert probs.shape == (6, 5)
    np.testing.assert_allclose(probs.sum(axis=1), np.ones(6), atol=1e-9)
    assert set(preds) <= set(range(5))


def test_joint_predict_no_private_reduces_to_source_head():
    state, _ = tiny_state(n_private=0)
    x = np.random.default_rng(5).normal(size=(8, 2))
    probs, preds = joint_predict(state, x)
    assert probs.shape == (8, 3)
    v = state.target.feature.forward(x)
    u_hat = state.autoencoder.decoder.forward(v)
    manual = state.source.classifier.forward(u_hat)[:, :3].argmax(axis=1)
    np.testing.assert_array_equal(preds, manual)


def test_joint_predict_matches_manual_composition():
    state, _ = tiny_state(seed=9, n_private=1)
    x = np.random.default_rng(6).normal(size=(4, 2))
    v = state.target.feature.forward(x)
    u_hat = state.autoencoder.decoder.forward(v)
    s_logits = state.source.classifier.forward(u_hat)[:, :3]
    t_logits = state.target.classifier.forward(v)
    joint = np.concatenate([s_logits, t_logits], axis=1)
    expected = nn.softmax_temp(joint, 1.0)
    probs, preds = joint_predict(state, x)
    np.testing.assert_allclose(probs, expected, atol=1e-12)
    single_probs, single_pred = joint_predict(state, x[0])
    np.testing.assert_allclose(single_probs, probs[0], atol=1e-12)


# ---------------------------------------------------------------------------
# losses


def proxy_batch(state, rng, per_class=4):
    from tido.prototypes import sample_proxy_all

    return sample_proxy_all(state.prototypes, per_class, int(rng.integers(1 << 31)))


def test_loss_r1_uniform_logits_ln_k():
    state, _ = tiny_state(n_private=1)
    for net in (state.source.classifier, state.target.classifier):
        for w in net.weights:
            w[:] = 0.0
        for b in net.biases:
            b[:] = 0.0
    u, cls = proxy_batch(state, np.random.default_rng(7))
    val, _ = loss_r1(state, u, cls)
    assert val == pytest.approx(math.log(4), abs=1e-12)  # 3 shared + 1 private


def test_loss_r1_confident_correct_is_tiny():
    # identity everything, then hand-wire the source head to nail each class
    model = SourceModel(
        feature=nn.Mlp([2, 2], identity_init=True),
        classifier=nn.Mlp([2, 3], seed=0),
    )
    # logit_c = 100 * <u, e_c> with prototype means on the axes
    model.classifier.weights[0] = np.array([[100.0, 0.0, 0.0], [0.0, 100.0, 0.0]])
    model.classifier.biases[0] = np.zeros(3)
    protos = {
        0: GaussianPrototype(0, np.array([1.0, 0.0]), np.full(2, 1e-6), 10),
        1: GaussianPrototype(1, np.array([0.0, 1.0]), np.full(2, 1e-6), 10),
    }
    cfg = IncrementConfig(seed=0)
    state = new_state(model, PrototypeSet(latent_dim=2, prototypes=protos), [0, 1], cfg)
    u = np.array([[1.0, 0.0], [0.0, 1.0]])
    val, _ = loss_r1(state, u, [0, 1])
    assert val < 1e-6  # pre-temperature gap is 100 >> 40


def test_loss_r1_unregistered_class_rejected():
    state, _ = tiny_state()
    with pytest.raises(ValueError):
        loss_r1(state, np.zeros((1, 2)), [77])


def test_loss_r1_gradients_match_finite_differences():
    state, _ = tiny_state(seed=3, n_private=2)
    rng = np.random.default_rng(8)
    u, cls = proxy_batch(state, rng, per_class=2)
    check_loss_grads(
        lambda: loss_r1(state, u, cls),
        {
            "f_e": state.autoencoder.encoder,
            "f_d": state.autoencoder.decoder,
            "g_t": state.target.classifier,
        },
        label="loss_r1",
    )


def test_loss_r2_identity_autoencoder_is_zero():
    state, _ = tiny_state(ae_hidden=())
    rng = np.random.default_rng(9)
    u, _ = proxy_batch(state, rng)
    x = rng.normal(size=(5, 2))
    val, _ = loss_r2(state, u, x)
    assert val == pytest.approx(0.0, abs=1e-24)


def test_loss_r2_proxy_term_matches_manual():
    state, _ = tiny_state(seed=11, ae_hidden=(6,))
    rng = np.random.default_rng(10)
    u, _ = proxy_batch(state, rng)
    val, _ = loss_r2(state, u, np.zeros((0, 2)))
    rec = state.autoencoder.decoder.forward(state.autoencoder.encoder.forward(u))
    assert val == pytest.approx(nn.mse(rec, u), abs=1e-15)


def test_loss_r2_gradients_match_finite_differences():
    state, _ = tiny_state(seed=5, ae_hidden=(5,))
    rng = np.random.default_rng(11)
    u, _ = proxy_batch(state, rng, per_class=2)
    x = rng.normal(size=(4, 2))
    check_loss_grads(
        lambda: loss_r2(state, u, x),
        {
            "f_e": state.autoencoder.encoder,
            "f_d": state.autoencoder.decoder,
            "f_t": state.target.feature,
        },
        label="loss_r2",
    )


def test_loss_c_empty_set_is_zero_with_flag():
    state, _ = tiny_state()
    val, grads, empty = loss_c(state, ConfidentSet(per_class={}, fraction=0.5))
    assert val == 0.0
    assert empty


def test_loss_c_perfect_pseudo_labels_small():
    state, _ = tiny_state()
    # make the source head certain about class 0 everywhere
    state.source.classifier.weights[-1][:] = 0.0
    state.source.classifier.biases[-1][:] = np.array([50.0, 0.0, 0.0, 0.0])
    x = np.random.default_rng(12).normal(size=(6, 2))
    conf = ConfidentSet(
        per_class={0: (x, state.target.feature.forward(x), np.zeros(6))}, fraction=1.0
    )
    val, _, empty = loss_c(state, conf)
    assert not empty
    assert val < 1e-6


def test_loss_c_gradients_match_finite_differences():
    state, _ = tiny_state(seed=7, n_private=1)
    rng = np.random.default_rng(13)
    x = rng.normal(size=(5, 2))
    v = state.target.feature.forward(x)
    conf = ConfidentSet(
        per_class={
            0: (x[:2], v[:2], np.zeros(2)),
            3: (x[2:], v[2:], np.zeros(3)),
        },
        fraction=1.0,
    )
    check_loss_grads(
        lambda: loss_c(state, conf)[:2],
        {"f_t": state.target.feature, "g_t": state.target.classifier},
        label="loss_c",
    )


def test_loss_d_uniform_discriminator_ln2():
    state, _ = tiny_state()
    for w in state.discriminator.weights:
        w[:] = 0.0
    for b in state.discriminator.biases:
        b[:] = 0.0
    rng = np.random.default_rng(14)
    u, _ = proxy_batch(state, rng)
    x = rng.normal(size=(7, 2))
    disc, conf, _ = loss_d(state, u, x)
    assert disc == pytest.approx(math.log(2), abs=1e-12)
    assert conf == pytest.approx(-math.log(2), abs=1e-12)


def test_loss_d_perfect_separation_small():
    state, _ = tiny_state(ae_hidden=())
    # proxy latents live far left, targets far right; wire d to the x axis
    state.discriminator = nn.Mlp([2, 2], seed=0)
    state.discriminator.weights[0] = np.array([[-80.0, 80.0], [0.0, 0.0]])
    state.discriminator.biases[0] = np.zeros(2)
    u = np.full((5, 2), -1.0)
    x_lat_target = np.full((5, 2), 1.0)
    # identity f_t on inputs equal to wanted latents
    state.target.feature = nn.Mlp([2, 2], identity_init=True)
    disc, conf, _ = loss_d(state, u, x_lat_target)
    assert disc < 1e-6
    assert conf == pytest.approx(-disc)


def test_loss_d_gradients_match_finite_differences():
    state, _ = tiny_state(seed=15, ae_hidden=(4,))
    rng = np.random.default_rng(15)
    u, _ = proxy_batch(state, rng, per_class=2)
    x = rng.normal(size=(5, 2))

    def disc_loss():
        d, c, grads = loss_d(state, u, x)
        return d, grads

    check_loss_grads(
        disc_loss,
        {
            "d": state.discriminator,
            "f_e": state.autoencoder.encoder,
            "f_t": state.target.feature,
        },
        label="loss_d",
    )


def test_loss_d_empty_batch_rejected():
    state, _ = tiny_state()
    with pytest.raises(ValueError):
        loss_d(state, np.zeros((0, 2)), np.zeros((3, 2)))


# ---------------------------------------------------------------------------
# update schedule


def zeroed_acc(state):
    from tido.incremental import AccumulatedLosses

    return AccumulatedLosses(
        l_c=0.0,
        lc_grads={
            "f_t": nn.zero_layer_grads(state.target.feature),
            "g_t": nn.zero_layer_grads(state.target.classifier),
        },
        disc=0.0,
        confusion=0.0,
        d_grads={
            "d": nn.zero_layer_grads(state.discriminator),
            "f_t": nn.zero_layer_grads(state.target.feature),
            "f_e": nn.zero_layer_grads(state.autoencoder.encoder),
        },
        l_r1=0.0,
        r1_grads={
            "f_e": nn.zero_layer_grads(state.autoencoder.encoder),
            "f_d": nn.zero_layer_grads(state.autoencoder.decoder),
            "g_t": nn.zero_layer_grads(state.target.classifier),
        },
        l_r2=0.0,
        r2_grads={
            "f_e": nn.zero_layer_grads(state.autoencoder.encoder),
            "f_d": nn.zero_layer_grads(state.autoencoder.decoder),
            "f_t": nn.zero_layer_grads(state.target.feature),
        },
    )


def snapshot_weights(state):
    nets = [
        state.target.feature,
        state.target.classifier,
        state.autoencoder.encoder,
        state.autoencoder.decoder,
        state.discriminator,
        state.source.feature,
        state.source.classifier,
    ]
    return [[w.copy() for w in net.weights] for net in nets], nets


def test_update_zero_gradients_keeps_weights_counts_steps():
    state, cfg = tiny_state(n_private=1)
    opts = make_optimizers(state, 0.01)
    before, nets = snapshot_weights(state)
    skipped = update_gradients(state, zeroed_acc(state), opts)
    assert skipped == []
    after, _ = snapshot_weights(state)
    for b_net, a_net in zip(before, after):
        for b_w, a_w in zip(b_net, a_net):
            np.testing.assert_array_equal(b_w, a_w)
    assert all(opt.step_count == 1 for opt in opts.values())


def test_update_nonfinite_gradients_skipped_and_flagged():
    state, cfg = tiny_state(n_private=1)
    opts = make_optimizers(state, 0.01)
    acc = zeroed_acc(state)
    acc.lc_grads["f_t"][0] = (
        np.full_like(state.target.feature.weights[0], np.nan),
        acc.lc_grads["f_t"][0][1],
    )
    skipped = update_gradients(state, acc, opts)
    assert skipped == ["lc"]


def test_adversarial_reversal_increases_frozen_discriminator_loss():
    state, cfg = tiny_state(seed=21, ae_hidden=(6,))
    rng = np.random.default_rng(16)
    u, _ = proxy_batch(state, rng, per_class=8)
    x = rng.normal(size=(12, 2)) + 2.0
    # train d alone a little so it actually separates
    opts = make_optimizers(state, 0.02)
    for _ in range(60):
        disc, confu, grads = loss_d(state, u, x)
        update_gradients(
            state,
            _acc_disc_only(state, grads),
            opts,
        )
    disc_before, _, grads = loss_d(state, u, x)
    # apply only the reversal step: hand update_gradients an acc whose other
    # gradients are zero
    acc = zeroed_acc(state)
    acc.d_grads = {"d": nn.zero_layer_grads(state.discriminator), "f_t": grads["f_t"], "f_e": grads["f_e"]}
    update_gradients(state, acc, make_optimizers(state, 0.01))
    disc_after, _, _ = loss_d(state, u, x)
    assert disc_after > disc_before


def _acc_disc_only(state, grads):
    acc = zeroed_acc(state)
    acc.d_grads = {
        "d": grads["d"],
        "f_t": nn.zero_layer_grads(state.target.feature),
        "f_e": nn.zero_layer_grads(state.autoencoder.encoder),
    }
    return acc


def test_update_deterministic():
    def run():
        state, cfg = tiny_state(seed=33, n_private=1)
        rng = np.random.default_rng(17)
        u, cls = proxy_batch(state, rng, per_class=4)
        x = rng.normal(size=(9, 2))
        guides = init_guides(state, {})
        v = state.target.feature.forward(x)
        ids, dists = pseudo_label_batch(v, guides)
        conf = select_confident(x, v, ids, dists, 0.5)
        acc = accumulate_losses(state, u, cls, x, conf)
        update_gradients(state, acc, make_optimizers(state, 0.01))
        return state.target.feature.weights[0].copy()

    np.testing.assert_array_equal(run(), run())


# ---------------------------------------------------------------------------
# run_increment


def blob_source_state(seed=0):
    """Foresight on two separable blobs, wrapped into an increment state."""
    from tido.foresight import ForesightConfig, train_foresight

    rng = np.random.default_rng(seed)
    n = 120
    a = rng.normal(loc=[0.0, 0.0], scale=0.3, size=(n, 2))
    b = rng.normal(loc=[5.0, 0.0], scale=0.3, size=(n, 2))
    x = np.concatenate([a, b])
    y = np.concatenate([np.zeros(n, dtype=int), np.ones(n, dtype=int)])
    cfg = ForesightConfig(
        latent_dim=2, hidden=(32,), classifier_hidden=(32,), epochs=60,
        learning_rate=1e-2, feature_lr_scale=0.1, seed=seed,
    )
    model, ps, _, ids = train_foresight(x, y, cfg)
    icfg = IncrementConfig(seed=seed, epochs=15, ae_pretrain_epochs=10, proxy_per_class=32)
    return new_state(model, ps, ids, icfg), icfg, (x, y)


def test_run_increment_bookkeeping_and_isolation():
    state, icfg, (x, y) = blob_source_state()
    rng = np.random.default_rng(30)
    tgt = x + 0.1  # mild shift
    one_shot = {2: np.array([0.0, 5.0])}
    tgt_priv = rng.normal(loc=[0.0, 5.0], scale=0.3, size=(40, 2))
    before_step = state.step
    before_w = state.target.feature.weights[0].copy()
    new, report = run_increment(state, np.concatenate([tgt, tgt_priv]), one_shot, icfg)
    # caller's state untouched
    assert state.step == before_step
    np.testing.assert_array_equal(state.target.feature.weights[0], before_w)
    assert new.step == before_step + 1
    assert new.registry.private == [2]
    assert new.target.classifier.out_dim == 1
    assert 2 in new.prototypes
    assert len(report.epochs) == icfg.epochs
    # prototype set still covers exactly the registry
    assert sorted(new.prototypes.class_ids) == sorted(new.registry.joint_classes())


def test_run_increment_rejects_known_one_shot():
    state, icfg, _ = blob_source_state()
    with pytest.raises(ValueError):
        run_increment(state, np.zeros((4, 2)), {0: np.zeros(2)}, icfg)


def test_run_increment_rejects_empty():
    state, icfg, _ = blob_source_state()
    with pytest.raises(ValueError):
        run_increment(state, np.zeros((0, 2)), {}, icfg)


def test_run_increment_no_private_classes_stays_stable():
    state, icfg, (x, y) = blob_source_state()
    probs, before_preds = joint_predict(state, x)
    new, _ = run_increment(state, x.copy(), {}, icfg)  # target == source distribution
    _, after_preds = joint_predict(new, x)
    before_acc = (before_preds == y).mean()
    after_acc = (after_preds == y).mean()
    assert after_acc >= before_acc - 0.02
    assert new.registry.private == []


def test_run_increment_divergence_rolls_back():
    state, icfg, (x, y) = blob_source_state()
    # poison the encoder so the first accumulated loss is non-finite
    state.autoencoder.encoder.weights[0][:] = 1e200
    import dataclasses

    bad_cfg = dataclasses.replace(icfg, ae_pretrain_epochs=0)
    with pytest.raises(TrainingDiverged) as err:
        run_increment(state, x, {2: np.array([0.0, 5.0])}, bad_cfg)
    assert err.value.last_state is state


def test_widening_is_monotone_across_increments():
    state, icfg, (x, y) = blob_source_state()
    s1, _ = run_increment(state, x + 0.05, {2: np.array([0.0, 5.0])}, icfg)
    w1 = s1.target.classifier.out_dim
    s2, _ = run_increment(s1, x + 0.1, {3: np.array([5.0, 5.0])}, icfg)
    assert s2.target.classifier.out_dim == w1 + 1 == 2
    assert s2.registry.private == [2, 3]


def test_checkpoint_round_trip(tmp_path):
    state, icfg, (x, y) = blob_source_state()
    new, _ = run_increment(state, x + 0.05, {2: np.array([0.0, 5.0])}, icfg)
    save_increment_checkpoint(tmp_path, new)
    back = load_increment_checkpoint(tmp_path)
    assert back.registry.private == [2]
    assert back.step == new.step
    np.testing.assert_array_equal(
        back.target.feature.weights[0], new.target.feature.weights[0]
    )
    px, _ = joint_predict(new, x[:5])
    px2, _ = joint_predict(back, x[:5])
    np.testing.assert_allclose(px, px2, atol=1e-12)
