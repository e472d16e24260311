"""Stage 1: source training that prepares for source-free increments.

The source model is a feature extractor plus a classifier with one
extra output unit reserved for a synthetic "none of the known classes"
category. Training alternates four moves per epoch: a cross-entropy /
soft-label step on model parameters, a prototype refit on the current
latents, a class-separability pull of latents toward their own
prototype, and regeneration of negative samples just outside the
prototypes' k-sigma envelopes. The checkpoint that survives into stage
2 is only the weights plus the fitted prototype set.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import nn
from .exceptions import GenerationError, TrainingDiverged
from .prototypes import (
    GaussianPrototype,
    PrototypeSet,
    fit_prototypes,
    is_ood_batch,
    sample_proxy_all,
    separability_loss_batch,
)
from .rng import child_seed, generator

log = logging.getLogger(__name__)

NEGATIVE_SHELL_LO = 0.5  # shell starts this many sigmas beyond the gate
NEGATIVE_SHELL_HI = 2.0  # and ends this many sigmas beyond the gate


@dataclass
class SourceModel:
    """Feature extractor (inputs -> latents) and classifier (latents -> logits).

    The classifier emits one logit per known class plus a final reserved
    logit for the rejection category, always kept in the last position.
    """

    feature: nn.Mlp
    classifier: nn.Mlp

    def __post_init__(self):
        if self.feature.out_dim != self.classifier.in_dim:
            raise ValueError("feature output width must match classifier input width")
        if self.classifier.out_dim < 2:
            raise ValueError("classifier needs at least one class plus the rejection unit")

    @property
    def latent_dim(self) -> int:
        return self.feature.out_dim

    @property
    def n_classes(self) -> int:
        """Known classes, excluding the rejection unit."""
        return self.classifier.out_dim - 1

    @property
    def negative_index(self) -> int:
        return self.classifier.out_dim - 1

    def latents(self, x) -> np.ndarray:
        return self.feature.forward(x)

    def logits(self, x) -> np.ndarray:
        return self.classifier.forward(self.feature.forward(x))

    def copy(self) -> "SourceModel":
        return SourceModel(feature=self.feature.copy(), classifier=self.classifier.copy())


@dataclass
class NegativeBatch:
    """Latent-space samples assigned to the reserved rejection class.

    ``label`` is the classifier output position of the rejection unit,
    i.e. the index right after the known classes.
    """

    samples: np.ndarray
    label: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass
class ForesightConfig:
    latent_dim: int = 2
    hidden: tuple = (32,)
    classifier_hidden: tuple = (32,)
    epochs: int = 120
    batch_size: int = 64
    learning_rate: float = 5e-3
    feature_lr_scale: float = 0.2  # slower feature net keeps the latent space stable
    neg_ratio: float = 1.0  # negatives drawn per source sample
    seed: int = 0
    k_sigma: float = 3.0
    separability_loss: bool = True
    plateau_tol: float = 1e-5
    plateau_patience: int = 10

    def __post_init__(self):
        if self.latent_dim <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("latent_dim, epochs and batch_size must be positive")
        if self.learning_rate <= 0 or self.neg_ratio <= 0 or self.k_sigma <= 0:
            raise ValueError("learning_rate, neg_ratio and k_sigma must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.classifier_hidden = tuple(int(h) for h in self.classifier_hidden)


@dataclass
class EpochLog:
    epoch: int
    l_ce: float
    l_s1: float
    l_s2: float
    total: float


def generate_negatives(
    ps: PrototypeSet, n: int, seed: int, k_sigma: float = 3.0, label: int | None = None
) -> NegativeBatch:
    """Sample rejection-class latents in a shell just outside the gate.

    Each draw picks a prototype uniformly, a direction uniformly on the
    unit sphere, and a radius r in [k_sigma + 0.5, k_sigma + 2.0]; the
    point lands at mean + r * sigma * direction (sigma per dimension).
    Draws that still fall inside some class's k-sigma envelope are
    rejected and retried up to 100 times; exhausting the budget means
    the prototypes overlap too much to carve an outside region.
    """
    if len(ps) == 0:
        raise ValueError("cannot generate negatives from an empty prototype set")
    if n < 0:
        raise ValueError("n must be >= 0")
    if label is None:
        label = len(ps)
    if n == 0:
        return NegativeBatch(samples=np.zeros((0, ps.latent_dim)), label=label)
    rng = generator(seed, "negatives")
    lo, hi = k_sigma + NEGATIVE_SHELL_LO, k_sigma + NEGATIVE_SHELL_HI
    class_ids = ps.class_ids
    out = np.empty((n, ps.latent_dim), dtype=np.float64)
    for i in range(n):
        for _attempt in range(100):
            p = ps.prototypes[class_ids[rng.integers(len(class_ids))]]
            direction = rng.standard_normal(ps.latent_dim)
            norm = np.linalg.norm(direction)
            if norm < 1e-12:
                continue
            direction /= norm
            r = rng.uniform(lo, hi)
            cand = p.mean + r * p.sigma * direction
            if is_ood_batch(ps, cand[None, :], k_sigma)[0]:
                out[i] = cand
                break
        else:
            raise GenerationError(
                f"negative sampling exhausted 100 retries at draw {i}; "
                "prototypes overlap pathologically"
            )
    return NegativeBatch(samples=out, label=label)


def vanilla_ce_loss(model: SourceModel, x, labels):
    """Plain cross-entropy through the full model; returns loss and grads."""
    z, cache_f = model.feature.forward_cached(np.asarray(x, dtype=np.float64))
    logits, cache_g = model.classifier.forward_cached(z)
    loss, dlogits = nn.softmax_ce_grad(logits, labels, tau=1.0)
    g_cls, dz = model.classifier.backward(cache_g, dlogits)
    g_feat, _ = model.feature.backward(cache_f, dz)
    return loss, {"feature": g_feat, "classifier": g_cls}


def loss_s2(model: SourceModel, src_x, src_labels, neg: NegativeBatch, tau: float = 1.0):
    """Soft-label loss on real source data plus the rejection class.

    Source inputs go through the full model; negative samples are latent
    vectors and feed the classifier directly. Each term is averaged over
    its own batch and the two are summed.
    """
    src_x = np.asarray(src_x, dtype=np.float64)
    src_labels = np.asarray(src_labels, dtype=np.int64)
    if src_x.shape[0] == 0 and len(neg) == 0:
        raise ValueError("loss_s2 needs at least one source or negative sample")
    if src_labels.size and src_labels.max() >= model.classifier.out_dim:
        raise ValueError("source label outside the classifier's label space")
    if neg.label >= model.classifier.out_dim:
        raise ValueError("negative label outside the classifier's label space")
    total = 0.0
    g_feat = None
    g_cls = None
    if src_x.shape[0]:
        z, cache_f = model.feature.forward_cached(src_x)
        logits, cache_g = model.classifier.forward_cached(z)
        l_src, dlogits = nn.softmax_ce_grad(logits, src_labels, tau=tau)
        gc, dz = model.classifier.backward(cache_g, dlogits)
        gf, _ = model.feature.backward(cache_f, dz)
        total += l_src
        g_feat = nn.sum_layer_grads(g_feat, gf)
        g_cls = nn.sum_layer_grads(g_cls, gc)
    if len(neg):
        logits_n, cache_n = model.classifier.forward_cached(neg.samples)
        neg_labels = np.full(len(neg), neg.label, dtype=np.int64)
        l_neg, dlogits_n = nn.softmax_ce_grad(logits_n, neg_labels, tau=tau)
        gc, _ = model.classifier.backward(cache_n, dlogits_n)
        total += l_neg
        g_cls = nn.sum_layer_grads(g_cls, gc)
    if g_feat is None:
        g_feat = nn.zero_layer_grads(model.feature)
    if g_cls is None:
        g_cls = nn.zero_layer_grads(model.classifier)
    return total, {"feature": g_feat, "classifier": g_cls}


def separability_step(model: SourceModel, ps: PrototypeSet, x, labels):
    """Loss value and feature-net gradients for the prototype pull.

    Prototypes are treated as constants; the gradient flows through the
    latents into the feature extractor only.
    """
    z, cache_f = model.feature.forward_cached(np.asarray(x, dtype=np.float64))
    loss, dz = separability_loss_batch(ps, z, labels)
    g_feat, _ = model.feature.backward(cache_f, dz)
    return loss, g_feat


def train_foresight(features, labels, cfg: ForesightConfig):
    """Train the source model and emit its prototype checkpoint.

    Labels are arbitrary non-negative ints; classifier logit i maps to
    the i-th smallest label and the rejection unit sits last. Returns
    (model, prototype set keyed by real class ids, per-epoch log,
    ordered class id list). Training stops at the epoch budget or once
    the total loss has improved by less than ``plateau_tol`` for
    ``plateau_patience`` consecutive epochs. A non-finite loss aborts
    with the last finite model attached to the exception.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("need a non-empty (n, d) feature matrix")
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ValueError("need at least two classes")
    if counts.min() < 2:
        raise ValueError("need at least two samples per class")
    class_ids = [int(c) for c in classes]
    pos = {c: i for i, c in enumerate(class_ids)}
    y_pos = np.array([pos[int(c)] for c in y], dtype=np.int64)

    model = SourceModel(
        feature=nn.Mlp(
            [x.shape[1], *cfg.hidden, cfg.latent_dim], seed=child_seed(cfg.seed, "f_s")
        ),
        classifier=nn.Mlp(
            [cfg.latent_dim, *cfg.classifier_hidden, len(class_ids) + 1],
            seed=child_seed(cfg.seed, "g_s"),
        ),
    )
    nn.standardize_first_layer(
        model.feature, x.mean(axis=0), np.maximum(x.std(axis=0), 1e-3)
    )
    z0 = model.feature.forward(x)
    nn.standardize_first_layer(
        model.classifier, z0.mean(axis=0), np.maximum(z0.std(axis=0), 1e-3)
    )
    opt_feat = nn.AdamState.for_params(
        model.feature.params(), learning_rate=cfg.learning_rate * cfg.feature_lr_scale
    )
    opt_cls = nn.AdamState.for_params(
        model.classifier.params(), learning_rate=cfg.learning_rate
    )
    opt_sep = nn.AdamState.for_params(
        model.feature.params(), learning_rate=cfg.learning_rate * cfg.feature_lr_scale
    )

    ps = fit_prototypes(model.feature.forward(x), y)
    n_neg = max(1, int(round(cfg.neg_ratio * x.shape[0])))
    neg = generate_negatives(ps, n_neg, child_seed(cfg.seed, "neg", -1), cfg.k_sigma)

    rng = generator(cfg.seed, "epochs")
    history: list[EpochLog] = []
    best_total = np.inf
    stall = 0
    last_finite = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(x.shape[0])
        neg_order = rng.permutation(len(neg))
        neg_per_batch = max(1, int(round(cfg.batch_size * cfg.neg_ratio)))
        n_batches = max(1, int(np.ceil(x.shape[0] / cfg.batch_size)))
        for bi in range(n_batches):
            rows = order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            nrows = neg_order[np.arange(bi * neg_per_batch, (bi + 1) * neg_per_batch) % len(neg)]
            nb = NegativeBatch(samples=neg.samples[nrows], label=neg.label)
            l_ce, g_ce = vanilla_ce_loss(model, x[rows], y_pos[rows])
            l_s2, g_s2 = loss_s2(model, x[rows], y_pos[rows], nb)
            if not np.isfinite(l_ce + l_s2):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}", last_state=last_finite, log=history
                )
            model.feature.apply_adam(
                nn.sum_layer_grads(g_ce["feature"], g_s2["feature"]), opt_feat
            )
            model.classifier.apply_adam(
                nn.sum_layer_grads(g_ce["classifier"], g_s2["classifier"]), opt_cls
            )
        ps = fit_prototypes(model.feature.forward(x), y)
        if cfg.separability_loss:
            _, g_sep = separability_step(model, ps, x, y)
            model.feature.apply_adam(g_sep, opt_sep)
            ps = fit_prototypes(model.feature.forward(x), y)
        neg = generate_negatives(ps, n_neg, child_seed(cfg.seed, "neg", epoch), cfg.k_sigma)
        # fixed-seed eval negatives: the plateau detector should see model
        # movement, not per-epoch sampling noise
        eval_neg = generate_negatives(
            ps, n_neg, child_seed(cfg.seed, "neg-eval"), cfg.k_sigma
        )
        l_ce, _ = vanilla_ce_loss(model, x, y_pos)
        l_s2, _ = loss_s2(model, x, y_pos, eval_neg)
        l_s1, _ = separability_loss_batch(ps, model.feature.forward(x), y)
        total = l_ce + l_s1 + l_s2
        history.append(EpochLog(epoch=epoch, l_ce=l_ce, l_s1=l_s1, l_s2=l_s2, total=total))
        if not np.isfinite(total):
            raise TrainingDiverged(
                f"non-finite loss at epoch {epoch}", last_state=last_finite, log=history
            )
        last_finite = model.copy()
        if best_total - total < cfg.plateau_tol:
            stall += 1
            if stall >= cfg.plateau_patience:
                log.info("foresight converged after %d epochs", epoch + 1)
                break
        else:
            stall = 0
        best_total = min(best_total, total)
    return model, ps, history, class_ids


def refresh_foresight(
    model: SourceModel,
    ps: PrototypeSet,
    shared_ids: list,
    new_features,
    new_labels,
    cfg: ForesightConfig,
):
    """Fold a newly arrived labeled source set into an existing model.

    Past classes are represented only by proxy draws from their
    prototypes (fed to the classifier directly, with their class as the
    target); raw data exists only for the incoming classes. The
    classifier widens to make room for new classes while the rejection
    unit stays last. Returns the updated model, the merged prototype
    set, the extended shared id list and the training log.
    """
    x = np.asarray(new_features, dtype=np.float64)
    y = np.asarray(new_labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("refresh needs a non-empty labeled set")
    counts = {int(c): int(n) for c, n in zip(*np.unique(y, return_counts=True))}
    if min(counts.values()) < 2:
        raise ValueError("need at least two samples per new class")
    new_ids = [c for c in sorted(counts) if c not in shared_ids]
    shared_after = list(shared_ids) + new_ids
    if new_ids:
        model.classifier.widen_output(
            len(new_ids),
            generator(cfg.seed, "widen", len(shared_after)),
            keep_last_column_last=True,
        )
    pos = {c: i for i, c in enumerate(shared_after)}
    y_pos = np.array([pos[int(c)] for c in y], dtype=np.int64)

    opt_model = nn.AdamState.for_params(
        model.feature.params() + model.classifier.params(), learning_rate=cfg.learning_rate
    )
    opt_sep = nn.AdamState.for_params(model.feature.params(), learning_rate=cfg.learning_rate)
    proxy_per_class = max(8, int(round(np.mean(list(counts.values())))))
    n_neg = max(1, int(round(cfg.neg_ratio * x.shape[0])))

    # the incoming set may also hold private-class prototypes; they stay in
    # the replay memory but only shared classes can anchor the classifier
    retained = {
        cid: GaussianPrototype(cid, p.mean.copy(), p.var.copy(), p.count)
        for cid, p in ps.prototypes.items()
    }
    anchor_protos = {cid: retained[cid] for cid in shared_ids if cid in retained}
    if not anchor_protos:
        raise ValueError("no shared-class prototypes to anchor the refresh")
    anchor_set = PrototypeSet(latent_dim=ps.latent_dim, prototypes=anchor_protos)
    merged = PrototypeSet(latent_dim=ps.latent_dim, prototypes=retained)
    neg_label = model.negative_index

    history: list[EpochLog] = []
    best_total = np.inf
    stall = 0
    neg = generate_negatives(
        merged, n_neg, child_seed(cfg.seed, "rneg", -1), cfg.k_sigma, label=neg_label
    )
    for epoch in range(cfg.epochs):
        proxy_u, proxy_cls = sample_proxy_all(
            anchor_set, proxy_per_class, child_seed(cfg.seed, "rproxy", epoch)
        )
        proxy_pos = np.array([pos[int(c)] for c in proxy_cls], dtype=np.int64)
        l_ce, g_ce = vanilla_ce_loss(model, x, y_pos)
        l_s2, g_s2 = loss_s2(model, x, y_pos, neg)
        logits_p, cache_p = model.classifier.forward_cached(proxy_u)
        l_proxy, dlp = nn.softmax_ce_grad(logits_p, proxy_pos, tau=1.0)
        g_proxy, _ = model.classifier.backward(cache_p, dlp)
        if not np.isfinite(l_ce + l_s2 + l_proxy):
            raise TrainingDiverged(f"non-finite loss at refresh epoch {epoch}", log=history)
        g_feat = nn.sum_layer_grads(g_ce["feature"], g_s2["feature"])
        g_cls = nn.sum_layer_grads(
            nn.sum_layer_grads(g_ce["classifier"], g_s2["classifier"]), g_proxy
        )
        flat = [a for pair in g_feat for a in pair] + [a for pair in g_cls for a in pair]
        nn.adam_step(model.feature.params() + model.classifier.params(), flat, opt_model)
        model.feature.version += 1
        model.classifier.version += 1

        new_fit = fit_prototypes(model.feature.forward(x), y)
        merged = PrototypeSet(
            latent_dim=ps.latent_dim, prototypes={**retained, **new_fit.prototypes}
        )
        l_s1 = 0.0
        if cfg.separability_loss:
            l_s1, g_sep = separability_step(model, merged, x, y)
            model.feature.apply_adam(g_sep, opt_sep)
            new_fit = fit_prototypes(model.feature.forward(x), y)
            merged = PrototypeSet(
                latent_dim=ps.latent_dim, prototypes={**retained, **new_fit.prototypes}
            )
        neg = generate_negatives(
            merged, n_neg, child_seed(cfg.seed, "rneg", epoch), cfg.k_sigma, label=neg_label
        )
        history.append(
            EpochLog(epoch=epoch, l_ce=l_ce, l_s1=l_s1, l_s2=l_s2, total=l_ce + l_s1 + l_s2)
        )
        if best_total - history[-1].total < cfg.plateau_tol:
            stall += 1
            if stall >= cfg.plateau_patience:
                break
        else:
            stall = 0
        best_total = min(best_total, history[-1].total)
    return model, merged, shared_after, history


# ---------------------------------------------------------------------------
# checkpoint files


def save_model_weights(path, networks: dict) -> None:
    doc = {"format": "mlp-weights/v1", "networks": {}}
    for name, net in networks.items():
        doc["networks"][name] = {
            "layer_dims": list(net.dims),
            "weights": [w.tolist() for w in net.weights],
            "biases": [b.tolist() for b in net.biases],
        }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_model_weights(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "mlp-weights/v1":
        raise ValueError(f"unsupported weights format {doc.get('format')!r}")
    nets = {}
    for name, spec in doc["networks"].items():
        net = nn.Mlp(spec["layer_dims"], seed=0)
        net.weights = [np.array(w, dtype=np.float64) for w in spec["weights"]]
        net.biases = [np.array(b, dtype=np.float64) for b in spec["biases"]]
        nets[name] = net
    return nets


def write_training_log(path, history: list) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,l_ce,l_s1,l_s2,total\n")
        for row in history:
            fh.write(f"{row.epoch},{row.l_ce!r},{row.l_s1!r},{row.l_s2!r},{row.total!r}\n")


def save_foresight_checkpoint(out_dir, model: SourceModel, ps: PrototypeSet, history, class_ids):
    os.makedirs(out_dir, exist_ok=True)
    save_model_weights(
        os.path.join(out_dir, "weights.json"),
        {"f_s": model.feature, "g_s": model.classifier},
    )
    ps.save(os.path.join(out_dir, "prototypes.json"))
    write_training_log(os.path.join(out_dir, "training_log.csv"), history)
    with open(os.path.join(out_dir, "classes.json"), "w") as fh:
        json.dump(
            {"format": "class-list/v1", "shared": [int(c) for c in class_ids]},
            fh,
            sort_keys=True,
        )
        fh.write("\n")


def load_foresight_checkpoint(out_dir):
    nets = load_model_weights(os.path.join(out_dir, "weights.json"))
    model = SourceModel(feature=nets["f_s"], classifier=nets["g_s"])
    ps = PrototypeSet.load(os.path.join(out_dir, "prototypes.json"))
    with open(os.path.join(out_dir, "classes.json")) as fh:
        doc = json.load(fh)
    return model, ps, [int(c) for c in doc["shared"]]
