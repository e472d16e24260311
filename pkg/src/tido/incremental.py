"""Stage 2: source-free incremental updates from unlabeled target streams.

Each increment sees an unlabeled target pool, one labeled sample per
new private class, and optionally a fresh labeled source set. Raw past
data never appears: replay comes from proxy draws out of the prototype
set. Per epoch the loop recomputes class guides, pseudo-labels the
target pool against them, selects the most confident samples per
class, accumulates four losses (joint-classifier distillation on proxy
samples, autoencoder reconstruction, confident-sample cross entropy,
and a domain discriminator with its adversarial reversal), applies the
per-group Adam updates, and refreshes the prototype replay memory from
the decoded confident latents.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .exceptions import TrainingDiverged
from .foresight import (
    ForesightConfig,
    SourceModel,
    load_model_weights,
    refresh_foresight,
    save_model_weights,
)
from .prototypes import (
    GaussianPrototype,
    PrototypeSet,
    VAR_FLOOR,
    merge_prototype_sets,
    sample_proxy_all,
)
from .rng import child_seed, generator

log = logging.getLogger(__name__)

REGISTRY_FORMAT = "class-registry/v1"


@dataclass
class TargetModel:
    """Target feature extractor and the private-class classifier head."""

    feature: nn.Mlp
    classifier: nn.Mlp  # widens as private classes arrive; width 0 before any

    def __post_init__(self):
        if self.feature.out_dim != self.classifier.in_dim:
            raise ValueError("target feature width must match classifier input width")


@dataclass
class AutoEncoder:
    """Domain projection between the replay space and the target latent space."""

    encoder: nn.Mlp
    decoder: nn.Mlp

    def __post_init__(self):
        if self.encoder.out_dim != self.decoder.in_dim:
            raise ValueError("encoder output must feed the decoder")
        if self.decoder.out_dim != self.encoder.in_dim:
            raise ValueError("decoder must map back to the encoder's input space")


@dataclass
class GuideSet:
    """Per-class anchor vectors in the target latent space."""

    guides: dict
    prototype_backed: list
    one_shot: list

    def __post_init__(self):
        overlap = set(self.prototype_backed) & set(self.one_shot)
        if overlap:
            raise ValueError(f"classes {sorted(overlap)} appear in both partitions")

    def __len__(self) -> int:
        return len(self.guides)

    def class_order(self) -> list:
        return sorted(self.guides)

    def matrix(self) -> np.ndarray:
        return np.stack([self.guides[c] for c in self.class_order()])


@dataclass
class ConfidentSet:
    """Per pseudo-class, the nearest-to-guide slice of the target pool."""

    per_class: dict  # class_id -> (inputs, latents, distances), ascending distance
    fraction: float

    def __len__(self) -> int:
        return sum(x.shape[0] for x, _, _ in self.per_class.values())

    def class_ids(self) -> list:
        return sorted(self.per_class)


@dataclass
class ClassRegistry:
    """Which global class ids live on which classifier head.

    ``shared`` follows the source classifier's logit order, ``private``
    the target head's. Joint predictions concatenate the two blocks.
    """

    shared: list = field(default_factory=list)
    private: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    def __post_init__(self):
        dup = set(self.shared) & set(self.private)
        if dup:
            raise ValueError(f"classes {sorted(dup)} registered on both heads")

    def joint_classes(self) -> list:
        return list(self.shared) + list(self.private)

    def joint_index(self, class_id: int) -> int:
        cid = int(class_id)
        if cid in self.shared:
            return self.shared.index(cid)
        if cid in self.private:
            return len(self.shared) + self.private.index(cid)
        raise ValueError(f"class {cid} is not registered")

    def __contains__(self, class_id) -> bool:
        cid = int(class_id)
        return cid in self.shared or cid in self.private

    def copy(self) -> "ClassRegistry":
        return ClassRegistry(
            shared=list(self.shared),
            private=list(self.private),
            steps=[dict(s) for s in self.steps],
        )

    def to_json_dict(self) -> dict:
        return {
            "format": REGISTRY_FORMAT,
            "shared": [int(c) for c in self.shared],
            "private": [int(c) for c in self.private],
            "steps": self.steps,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ClassRegistry":
        if doc.get("format") != REGISTRY_FORMAT:
            raise ValueError(f"unsupported registry format {doc.get('format')!r}")
        return cls(
            shared=[int(c) for c in doc["shared"]],
            private=[int(c) for c in doc["private"]],
            steps=list(doc["steps"]),
        )


@dataclass
class IncrementConfig:
    epochs: int = 60
    learning_rate: float = 5e-3
    confident_fraction: float = 0.5
    proxy_per_class: int = 64
    ae_hidden: tuple = ()
    ae_pretrain_epochs: int = 40
    ae_learning_rate: float = 1e-2
    disc_hidden: tuple = (16,)
    gt_hidden: tuple = ()
    seed: int = 0
    refresh: ForesightConfig | None = None  # used when a step brings new source data

    def __post_init__(self):
        if self.epochs <= 0 or self.proxy_per_class <= 0:
            raise ValueError("epochs and proxy_per_class must be positive")
        if not 0 < self.confident_fraction <= 1:
            raise ValueError("confident_fraction must lie in (0, 1]")
        if self.learning_rate <= 0 or self.ae_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        self.ae_hidden = tuple(int(h) for h in self.ae_hidden)
        self.disc_hidden = tuple(int(h) for h in self.disc_hidden)
        self.gt_hidden = tuple(int(h) for h in self.gt_hidden)


@dataclass
class EpochLossLog:
    epoch: int
    l_r1: float
    l_r2: float
    l_c: float
    l_d_disc: float
    l_d_conf: float


@dataclass
class IncrementReport:
    step: int
    epochs: list = field(default_factory=list)
    skipped_updates: list = field(default_factory=list)
    empty_confident_epochs: list = field(default_factory=list)
    new_private: list = field(default_factory=list)
    new_shared: list = field(default_factory=list)


@dataclass
class IncrementState:
    """Everything an increment needs and everything one leaves behind."""

    source: SourceModel
    target: TargetModel
    autoencoder: AutoEncoder
    discriminator: nn.Mlp
    prototypes: PrototypeSet
    registry: ClassRegistry
    step: int = 0

    @property
    def latent_dim(self) -> int:
        return self.source.latent_dim

    def copy(self) -> "IncrementState":
        return IncrementState(
            source=self.source.copy(),
            target=TargetModel(
                feature=self.target.feature.copy(), classifier=self.target.classifier.copy()
            ),
            autoencoder=AutoEncoder(
                encoder=self.autoencoder.encoder.copy(),
                decoder=self.autoencoder.decoder.copy(),
            ),
            discriminator=self.discriminator.copy(),
            prototypes=PrototypeSet.from_json_dict(self.prototypes.to_json_dict()),
            registry=self.registry.copy(),
            step=self.step,
        )

    def n_params(self) -> int:
        """Trainable parameters on the prediction path (the VC surrogate)."""
        return (
            self.target.feature.n_params()
            + self.target.classifier.n_params()
            + self.autoencoder.decoder.n_params()
            + self.source.classifier.n_params()
        )

    def source_latents(self, per_class: int, seed: int) -> np.ndarray:
        """Proxy draws pushed through the encoder: the source side in v-space."""
        u, _ = sample_proxy_all(self.prototypes, per_class, seed)
        return self.autoencoder.encoder.forward(u)

    def target_latents(self, x) -> np.ndarray:
        return self.target.feature.forward(np.asarray(x, dtype=np.float64))


def new_state(model: SourceModel, ps: PrototypeSet, shared_ids, cfg: IncrementConfig) -> IncrementState:
    """Build the initial increment state from a stage-1 checkpoint.

    The target feature net starts as a copy of the source one; the
    autoencoder starts at the exact identity when configured without
    hidden layers, so guides and target latents share a frame from the
    first epoch.
    """
    d = model.latent_dim
    if cfg.ae_hidden:
        enc = nn.Mlp([d, *cfg.ae_hidden, d], seed=child_seed(cfg.seed, "f_e"))
        dec = nn.Mlp([d, *cfg.ae_hidden, d], seed=child_seed(cfg.seed, "f_d"))
        cloud, _ = sample_proxy_all(ps, 32, child_seed(cfg.seed, "ae-init"))
        mean = cloud.mean(axis=0)
        std = np.maximum(cloud.std(axis=0), 1e-3)
        if len(cfg.ae_hidden) == 1 and cfg.ae_hidden[0] >= d:
            # start as a near no-op so guides and target latents share a frame
            nn.near_identity_init(enc, mean, std, seed=child_seed(cfg.seed, "f_e"))
            nn.near_identity_init(dec, mean, std, seed=child_seed(cfg.seed, "f_d"))
        else:
            nn.standardize_first_layer(enc, mean, std)
            enc_cloud = enc.forward(cloud)
            nn.standardize_first_layer(
                dec, enc_cloud.mean(axis=0), np.maximum(enc_cloud.std(axis=0), 1e-3)
            )
    else:
        enc = nn.Mlp([d, d], identity_init=True)
        dec = nn.Mlp([d, d], identity_init=True)
    return IncrementState(
        source=model,
        target=TargetModel(
            feature=model.feature.copy(),
            classifier=nn.Mlp([d, *cfg.gt_hidden, 0], seed=child_seed(cfg.seed, "g_t"))
            if cfg.gt_hidden
            else nn.Mlp([d, 0], seed=child_seed(cfg.seed, "g_t")),
        ),
        autoencoder=AutoEncoder(encoder=enc, decoder=dec),
        discriminator=nn.Mlp([d, *cfg.disc_hidden, 2], seed=child_seed(cfg.seed, "disc")),
        prototypes=ps,
        registry=ClassRegistry(shared=list(shared_ids), private=[]),
        step=0,
    )


def pretrain_autoencoder(
    ps: PrototypeSet,
    ae: AutoEncoder,
    epochs: int,
    per_class: int,
    seed: int,
    learning_rate: float = 1e-2,
) -> AutoEncoder:
    """Fit the round trip decoder(encoder(u)) ~= u on proxy samples."""
    if ps.latent_dim != ae.encoder.in_dim:
        raise ValueError("prototype latent dim does not match the encoder input")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    opt = nn.AdamState.for_params(
        ae.encoder.params() + ae.decoder.params(), learning_rate=learning_rate
    )
    for epoch in range(epochs):
        u, _ = sample_proxy_all(ps, per_class, child_seed(seed, "ae", epoch))
        v, cache_e = ae.encoder.forward_cached(u)
        rec, cache_d = ae.decoder.forward_cached(v)
        value, drec = nn.mse_grad(rec, u)
        if not np.isfinite(value):
            raise TrainingDiverged(f"autoencoder loss non-finite at epoch {epoch}")
        g_dec, dv = ae.decoder.backward(cache_d, drec)
        g_enc, _ = ae.encoder.backward(cache_e, dv)
        flat = [a for pair in g_enc for a in pair] + [a for pair in g_dec for a in pair]
        nn.adam_step(ae.encoder.params() + ae.decoder.params(), flat, opt)
        ae.encoder.version += 1
        ae.decoder.version += 1
    return ae


def init_guides(state: IncrementState, one_shot: dict) -> GuideSet:
    """Anchors for every registered class, in the target latent space.

    Classes carried by ``one_shot`` (this step's private classes) anchor
    at the target encoding of their single labeled sample; every other
    registered class anchors at the encoder image of its prototype mean.
    """
    guides = {}
    backed, shot = [], []
    for cid in state.registry.joint_classes():
        if cid in one_shot:
            guides[cid] = state.target.feature.forward(
                np.asarray(one_shot[cid], dtype=np.float64)
            )
            shot.append(cid)
        elif cid in state.prototypes:
            guides[cid] = state.autoencoder.encoder.forward(state.prototypes.get(cid).mean)
            backed.append(cid)
        else:
            raise ValueError(f"class {cid} has no prototype and no one-shot sample")
    return GuideSet(guides=guides, prototype_backed=backed, one_shot=shot)


def pseudo_label(v, guides: GuideSet) -> tuple[int, float]:
    """Nearest guide by Euclidean distance; ties go to the lowest class id."""
    v = np.asarray(v, dtype=np.float64)
    ids, dists = pseudo_label_batch(v[None, :], guides)
    return int(ids[0]), float(dists[0])


def pseudo_label_batch(v: np.ndarray, guides: GuideSet):
    if len(guides) == 0:
        raise RuntimeError("empty guide set")
    v = np.asarray(v, dtype=np.float64)
    order = guides.class_order()
    g = guides.matrix()
    d = np.sqrt(((v[:, None, :] - g[None, :, :]) ** 2).sum(axis=2))
    idx = d.argmin(axis=1)  # first minimum = lowest class id, order is ascending
    ids = np.array([order[i] for i in idx], dtype=np.int64)
    return ids, d[np.arange(v.shape[0]), idx]


def select_confident(inputs, latents, labels, dists, fraction: float) -> ConfidentSet:
    """Keep the ceil(fraction * N_c) nearest samples per pseudo-class."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    inputs = np.asarray(inputs, dtype=np.float64)
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    dists = np.asarray(dists, dtype=np.float64)
    per_class = {}
    for cid in sorted(set(int(c) for c in labels)):
        rows = np.flatnonzero(labels == cid)
        order = rows[np.argsort(dists[rows], kind="stable")]
        keep = order[: math.ceil(fraction * rows.size)]
        per_class[cid] = (inputs[keep], latents[keep], dists[keep])
    return ConfidentSet(per_class=per_class, fraction=fraction)


def _joint_forward(state: IncrementState, x: np.ndarray):
    """Shared forward plumbing for prediction and the confident-sample loss."""
    v, cache_t = state.target.feature.forward_cached(x)
    u_hat, cache_d = state.autoencoder.decoder.forward_cached(v)
    s_logits, cache_s = state.source.classifier.forward_cached(u_hat)
    t_logits, cache_g = state.target.classifier.forward_cached(v)
    n_shared = len(state.registry.shared)
    joint = np.concatenate([s_logits[:, :n_shared], t_logits], axis=1)
    caches = {"f_t": cache_t, "f_d": cache_d, "g_s": cache_s, "g_t": cache_g}
    return joint, s_logits, caches


def joint_predict(state: IncrementState, x):
    """Class probabilities over all registered classes plus the argmax.

    The path is target-encode, decode into the replay space, score the
    shared classes there (rejection logit dropped), score private
    classes directly, then one softmax over the concatenation.
    """
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    joint, _, _ = _joint_forward(state, arr)
    probs = nn.softmax_temp(joint, 1.0)
    order = state.registry.joint_classes()
    preds = np.array([order[i] for i in probs.argmax(axis=1)], dtype=np.int64)
    if single:
        return probs[0], int(preds[0])
    return probs, preds


def loss_r1(state: IncrementState, proxy_u, proxy_classes, tau: float = 2.0):
    """Soft-label distillation of proxy samples through the joint head.

    Proxy latents ride encoder -> decoder -> source classifier for the
    shared block and encoder -> target classifier for the private block;
    the temperature-softened joint must still name their class.
    """
    u = np.asarray(proxy_u, dtype=np.float64)
    targets = np.array(
        [state.registry.joint_index(int(c)) for c in proxy_classes], dtype=np.int64
    )
    v, cache_e = state.autoencoder.encoder.forward_cached(u)
    u_hat, cache_d = state.autoencoder.decoder.forward_cached(v)
    s_logits, cache_s = state.source.classifier.forward_cached(u_hat)
    t_logits, cache_g = state.target.classifier.forward_cached(v)
    n_shared = len(state.registry.shared)
    joint = np.concatenate([s_logits[:, :n_shared], t_logits], axis=1)
    loss, djoint = nn.softmax_ce_grad(joint, targets, tau=tau)
    ds = np.zeros_like(s_logits)
    ds[:, :n_shared] = djoint[:, :n_shared]
    dt = djoint[:, n_shared:]
    _, du_hat = state.source.classifier.backward(cache_s, ds)  # g_s frozen, jacobian only
    g_gt, dv_t = state.target.classifier.backward(cache_g, dt)
    g_fd, dv_d = state.autoencoder.decoder.backward(cache_d, du_hat)
    g_fe, _ = state.autoencoder.encoder.backward(cache_e, dv_t + dv_d)
    return loss, {"f_e": g_fe, "f_d": g_fd, "g_t": g_gt}


def loss_r2(state: IncrementState, proxy_u, target_x):
    """Reconstruction: proxy round trip plus the target latent cycle.

    decode(encode(u)) must return to u for proxy samples, and
    encode(decode(v)) must return to v for target latents, which keeps
    the projection invertible where the data lives.
    """
    u = np.asarray(proxy_u, dtype=np.float64)
    x = np.asarray(target_x, dtype=np.float64)
    total = 0.0
    g_fe, g_fd, g_ft = None, None, None
    if u.shape[0]:
        v, cache_e = state.autoencoder.encoder.forward_cached(u)
        rec, cache_d = state.autoencoder.decoder.forward_cached(v)
        val, drec = nn.mse_grad(rec, u)
        total += val
        gd, dv = state.autoencoder.decoder.backward(cache_d, drec)
        ge, _ = state.autoencoder.encoder.backward(cache_e, dv)
        g_fe = nn.sum_layer_grads(g_fe, ge)
        g_fd = nn.sum_layer_grads(g_fd, gd)
    if x.shape[0]:
        vt, cache_t = state.target.feature.forward_cached(x)
        u_hat, cache_d2 = state.autoencoder.decoder.forward_cached(vt)
        v_rec, cache_e2 = state.autoencoder.encoder.forward_cached(u_hat)
        val2, drec2 = nn.mse_grad(v_rec, vt)
        total += val2
        ge, du_hat = state.autoencoder.encoder.backward(cache_e2, drec2)
        gd, dv_path = state.autoencoder.decoder.backward(cache_d2, du_hat)
        dv_total = dv_path - drec2  # vt also appears as the reconstruction target
        gt, _ = state.target.feature.backward(cache_t, dv_total)
        g_fe = nn.sum_layer_grads(g_fe, ge)
        g_fd = nn.sum_layer_grads(g_fd, gd)
        g_ft = nn.sum_layer_grads(g_ft, gt)
    if g_fe is None:
        g_fe = nn.zero_layer_grads(state.autoencoder.encoder)
    if g_fd is None:
        g_fd = nn.zero_layer_grads(state.autoencoder.decoder)
    if g_ft is None:
        g_ft = nn.zero_layer_grads(state.target.feature)
    return total, {"f_e": g_fe, "f_d": g_fd, "f_t": g_ft}


def loss_c(state: IncrementState, confident: ConfidentSet):
    """Cross entropy of joint predictions against pseudo-labels.

    An empty confident set is defined as loss 0 with a warning flag so
    early epochs cannot crash before pseudo-labeling finds anything.
    """
    n_total = len(confident)
    if n_total == 0:
        return (
            0.0,
            {
                "f_t": nn.zero_layer_grads(state.target.feature),
                "g_t": nn.zero_layer_grads(state.target.classifier),
            },
            True,
        )
    xs, ys = [], []
    for cid in confident.class_ids():
        x_c, _, _ = confident.per_class[cid]
        xs.append(x_c)
        ys.extend([state.registry.joint_index(cid)] * x_c.shape[0])
    x = np.concatenate(xs, axis=0)
    targets = np.array(ys, dtype=np.int64)
    joint, s_logits, caches = _joint_forward(state, x)
    loss, djoint = nn.softmax_ce_grad(joint, targets, tau=1.0)
    n_shared = len(state.registry.shared)
    ds = np.zeros_like(s_logits)
    ds[:, :n_shared] = djoint[:, :n_shared]
    dt = djoint[:, n_shared:]
    _, du_hat = state.source.classifier.backward(caches["g_s"], ds)
    g_gt, dv_g = state.target.classifier.backward(caches["g_t"], dt)
    _, dv_d = state.autoencoder.decoder.backward(caches["f_d"], du_hat)
    g_ft, _ = state.target.feature.backward(caches["f_t"], dv_g + dv_d)
    return loss, {"f_t": g_ft, "g_t": g_gt}, False


def loss_d(state: IncrementState, proxy_u, target_x):
    """Domain discriminator loss and its adversarial mirror.

    The discriminator reads encoded proxy samples as domain 0 and target
    encodings as domain 1, averaged over the combined batch. The
    confusion value is the same quantity negated; its gradients (for the
    feature nets) are the negated discriminator-loss gradients, realized
    at update time as gradient reversal with coefficient 1.
    """
    u = np.asarray(proxy_u, dtype=np.float64)
    x = np.asarray(target_x, dtype=np.float64)
    if u.shape[0] == 0 or x.shape[0] == 0:
        raise ValueError("loss_d needs non-empty proxy and target batches")
    w = 1.0 / (u.shape[0] + x.shape[0])
    ve, cache_e = state.autoencoder.encoder.forward_cached(u)
    ls, cache_ds = state.discriminator.forward_cached(ve)
    vt, cache_t = state.target.feature.forward_cached(x)
    lt, cache_dt = state.discriminator.forward_cached(vt)
    l_src, dls = nn.softmax_ce_grad(ls, np.zeros(u.shape[0], dtype=np.int64), tau=1.0, total_weight=w)
    l_tgt, dlt = nn.softmax_ce_grad(lt, np.ones(x.shape[0], dtype=np.int64), tau=1.0, total_weight=w)
    disc = l_src + l_tgt
    g_d1, dve = state.discriminator.backward(cache_ds, dls)
    g_d2, dvt = state.discriminator.backward(cache_dt, dlt)
    g_fe, _ = state.autoencoder.encoder.backward(cache_e, dve)
    g_ft, _ = state.target.feature.backward(cache_t, dvt)
    return disc, -disc, {"d": nn.sum_layer_grads(g_d1, g_d2), "f_e": g_fe, "f_t": g_ft}


@dataclass
class AccumulatedLosses:
    """One epoch's loss values and gradients, ready for the update schedule."""

    l_c: float
    lc_grads: dict
    disc: float
    confusion: float
    d_grads: dict
    l_r1: float
    r1_grads: dict
    l_r2: float
    r2_grads: dict
    empty_confident: bool = False

    def values_finite(self) -> bool:
        return all(
            np.isfinite(v) for v in (self.l_c, self.disc, self.l_r1, self.l_r2)
        )


def make_optimizers(state: IncrementState, learning_rate: float) -> dict:
    """One Adam state per update group, matching the five-step schedule."""
    t = state.target
    ae = state.autoencoder
    return {
        "lc": nn.AdamState.for_params(
            t.feature.params() + t.classifier.params(), learning_rate=learning_rate
        ),
        "disc": nn.AdamState.for_params(
            state.discriminator.params(), learning_rate=learning_rate
        ),
        "confusion": nn.AdamState.for_params(
            t.feature.params() + ae.encoder.params(), learning_rate=learning_rate
        ),
        "r1": nn.AdamState.for_params(
            ae.encoder.params() + ae.decoder.params() + t.classifier.params(),
            learning_rate=learning_rate,
        ),
        "r2": nn.AdamState.for_params(
            ae.encoder.params() + ae.decoder.params() + t.feature.params(),
            learning_rate=learning_rate,
        ),
    }


def _flat(*layer_grads_lists):
    out = []
    for grads in layer_grads_lists:
        for dw, db in grads:
            out.append(dw)
            out.append(db)
    return out


def update_gradients(state: IncrementState, acc: AccumulatedLosses, optimizers: dict) -> list:
    """Apply the five per-group Adam steps in their fixed order.

    Order: confident-sample descent on (f_t, g_t); discriminator descent
    on d; gradient-reversed ascent of the discriminator loss on
    (f_t, f_e); distillation descent on (f_e, f_d, g_t); reconstruction
    descent on (f_e, f_d, f_t). Groups whose gradients are non-finite
    are skipped and reported.
    """
    t = state.target
    ae = state.autoencoder
    skipped = []

    def apply(name, nets, flat_grads):
        if not all(np.isfinite(g).all() for g in flat_grads):
            skipped.append(name)
            log.warning("update %s skipped: non-finite gradient", name)
            return
        params = []
        for net in nets:
            params.extend(net.params())
        nn.adam_step(params, flat_grads, optimizers[name])
        for net in nets:
            net.version += 1

    apply("lc", [t.feature, t.classifier], _flat(acc.lc_grads["f_t"], acc.lc_grads["g_t"]))
    apply("disc", [state.discriminator], _flat(acc.d_grads["d"]))
    apply(
        "confusion",
        [t.feature, ae.encoder],
        [
            -g
            for g in _flat(acc.d_grads["f_t"], acc.d_grads["f_e"])
        ],
    )
    apply(
        "r1",
        [ae.encoder, ae.decoder, t.classifier],
        _flat(acc.r1_grads["f_e"], acc.r1_grads["f_d"], acc.r1_grads["g_t"]),
    )
    apply(
        "r2",
        [ae.encoder, ae.decoder, t.feature],
        _flat(acc.r2_grads["f_e"], acc.r2_grads["f_d"], acc.r2_grads["f_t"]),
    )
    return skipped


def accumulate_losses(
    state: IncrementState, proxy_u, proxy_classes, target_x, confident: ConfidentSet
) -> AccumulatedLosses:
    l_c, lc_grads, empty = loss_c(state, confident)
    disc, confusion, d_grads = loss_d(state, proxy_u, target_x)
    r1, r1_grads = loss_r1(state, proxy_u, proxy_classes)
    r2, r2_grads = loss_r2(state, proxy_u, target_x)
    return AccumulatedLosses(
        l_c=l_c,
        lc_grads=lc_grads,
        disc=disc,
        confusion=confusion,
        d_grads=d_grads,
        l_r1=r1,
        r1_grads=r1_grads,
        l_r2=r2,
        r2_grads=r2_grads,
        empty_confident=empty,
    )


def _fit_gaussian(cid: int, rows: np.ndarray) -> GaussianPrototype:
    mean = rows.mean(axis=0)
    var = np.maximum(rows.var(axis=0), VAR_FLOOR)
    return GaussianPrototype(class_id=cid, mean=mean, var=var, count=rows.shape[0])


def refresh_prototypes(
    state: IncrementState, base: PrototypeSet, confident: ConfidentSet, one_shot: dict
) -> PrototypeSet:
    """Replay-memory update: decode confident latents and merge into base.

    Confident target samples are mapped through the decoder so the
    replay space stays fixed across increments; per class they form a
    Gaussian that merges count-weighted with the pre-increment
    prototypes. Private classes that attracted no confident samples yet
    fall back to their decoded one-shot anchor so every registered class
    keeps a prototype.
    """
    protos = {}
    for cid, (_, v_c, _) in confident.per_class.items():
        u_c = state.autoencoder.decoder.forward(v_c)
        protos[cid] = _fit_gaussian(cid, np.atleast_2d(u_c))
    for cid in one_shot:
        if cid not in protos and cid not in base.prototypes:
            v = state.target.feature.forward(np.asarray(one_shot[cid], dtype=np.float64))
            u = state.autoencoder.decoder.forward(v)
            protos[cid] = _fit_gaussian(cid, u[None, :])
    target_fit = PrototypeSet(latent_dim=state.latent_dim, prototypes=protos)
    return merge_prototype_sets(base, target_fit)


def run_increment(
    state: IncrementState,
    target_x,
    one_shot: dict | None,
    cfg: IncrementConfig,
    new_source=None,
) -> tuple[IncrementState, IncrementReport]:
    """One full task increment; returns the updated state and its report.

    The caller's state is left untouched: work happens on a copy, and a
    divergence raises TrainingDiverged carrying the pre-increment state,
    so a failed increment can never leak a corrupted model.
    """
    x = np.asarray(target_x, dtype=np.float64)
    one_shot = {int(c): np.asarray(v, dtype=np.float64) for c, v in (one_shot or {}).items()}
    if x.shape[0] == 0 and not one_shot:
        raise ValueError("increment needs target data or at least one private class")
    if x.ndim != 2 or (x.shape[0] and x.shape[1] != state.target.feature.in_dim):
        raise ValueError("target features do not match the model input width")
    for cid in one_shot:
        if cid in state.registry:
            raise ValueError(f"one-shot class {cid} is already registered")

    original = state
    work = state.copy()
    report = IncrementReport(step=work.step)

    # (1) fold new labeled source data into the source model and replay memory
    if new_source is not None and len(new_source):
        refresh_cfg = cfg.refresh if cfg.refresh is not None else ForesightConfig(
            latent_dim=work.latent_dim, seed=cfg.seed
        )
        before = set(work.registry.shared)
        model, merged, shared_after, _hist = refresh_foresight(
            work.source,
            work.prototypes,
            work.registry.shared,
            new_source.features,
            new_source.labels,
            refresh_cfg,
        )
        work.source = model
        work.prototypes = merged
        work.registry.shared = shared_after
        report.new_shared = [c for c in shared_after if c not in before]

    # (2) register this step's private classes and widen the target head
    new_private = sorted(one_shot)
    if new_private:
        work.target.classifier.widen_output(
            len(new_private), generator(cfg.seed, "gt-widen", work.step)
        )
        work.registry.private = list(work.registry.private) + new_private
    report.new_private = new_private

    # (3) autoencoder pretraining on proxy samples
    pretrain_autoencoder(
        work.prototypes,
        work.autoencoder,
        cfg.ae_pretrain_epochs,
        cfg.proxy_per_class,
        child_seed(cfg.seed, "ae-pre", work.step),
        learning_rate=cfg.ae_learning_rate,
    )

    base_ps = PrototypeSet.from_json_dict(work.prototypes.to_json_dict())
    optimizers = make_optimizers(work, cfg.learning_rate)

    for epoch in range(cfg.epochs):
        guides = init_guides(work, one_shot)
        if x.shape[0] == 0:
            break  # nothing to adapt to; registration alone was the increment
        v = work.target.feature.forward(x)
        ids, dists = pseudo_label_batch(v, guides)
        confident = select_confident(x, v, ids, dists, cfg.confident_fraction)
        proxy_u, proxy_cls = sample_proxy_all(
            work.prototypes, cfg.proxy_per_class, child_seed(cfg.seed, "proxy", work.step, epoch)
        )
        with np.errstate(over="ignore", invalid="ignore"):
            acc = accumulate_losses(work, proxy_u, proxy_cls, x, confident)
        if not acc.values_finite():
            raise TrainingDiverged(
                f"increment diverged at epoch {epoch}",
                last_state=original,
                log=report,
            )
        skipped = update_gradients(work, acc, optimizers)
        if skipped:
            report.skipped_updates.append((epoch, skipped))
        if acc.empty_confident:
            report.empty_confident_epochs.append(epoch)

        guides_post = init_guides(work, one_shot)
        v_post = work.target.feature.forward(x)
        ids_post, dists_post = pseudo_label_batch(v_post, guides_post)
        conf_post = select_confident(x, v_post, ids_post, dists_post, cfg.confident_fraction)
        work.prototypes = refresh_prototypes(work, base_ps, conf_post, one_shot)

        report.epochs.append(
            EpochLossLog(
                epoch=epoch,
                l_r1=acc.l_r1,
                l_r2=acc.l_r2,
                l_c=acc.l_c,
                l_d_disc=acc.disc,
                l_d_conf=acc.confusion,
            )
        )

    if x.shape[0] == 0:
        # still guarantee replay coverage for the newly registered classes
        work.prototypes = refresh_prototypes(
            work, base_ps, ConfidentSet(per_class={}, fraction=1.0), one_shot
        )

    work.registry.steps.append(
        {
            "step": work.step,
            "source_classes": report.new_shared,
            "private_classes": report.new_private,
        }
    )
    work.step += 1
    return work, report


# ---------------------------------------------------------------------------
# checkpointing


def save_increment_checkpoint(out_dir, state: IncrementState) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_model_weights(
        os.path.join(out_dir, "weights.json"),
        {
            "f_s": state.source.feature,
            "g_s": state.source.classifier,
            "f_t": state.target.feature,
            "g_t": state.target.classifier,
            "f_e": state.autoencoder.encoder,
            "f_d": state.autoencoder.decoder,
            "d": state.discriminator,
        },
    )
    state.prototypes.save(os.path.join(out_dir, "prototypes.json"))
    doc = state.registry.to_json_dict()
    doc["step"] = state.step
    with open(os.path.join(out_dir, "registry.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_increment_checkpoint(out_dir) -> IncrementState:
    nets = load_model_weights(os.path.join(out_dir, "weights.json"))
    with open(os.path.join(out_dir, "registry.json")) as fh:
        doc = json.load(fh)
    registry = ClassRegistry.from_json_dict(doc)
    return IncrementState(
        source=SourceModel(feature=nets["f_s"], classifier=nets["g_s"]),
        target=TargetModel(feature=nets["f_t"], classifier=nets["g_t"]),
        autoencoder=AutoEncoder(encoder=nets["f_e"], decoder=nets["f_d"]),
        discriminator=nets["d"],
        prototypes=PrototypeSet.load(os.path.join(out_dir, "prototypes.json")),
        registry=registry,
        step=int(doc.get("step", 0)),
    )


def write_epoch_log(path, rows: list) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,l_r1,l_r2,l_c,l_d_disc,l_d_conf\n")
        for r in rows:
            fh.write(
                f"{r.epoch},{r.l_r1!r},{r.l_r2!r},{r.l_c!r},{r.l_d_disc!r},{r.l_d_conf!r}\n"
            )
