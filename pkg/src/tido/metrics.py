"""Evaluation metrics and generalization-bound diagnostics.

Accuracy reporting (all-class, private-class, per-class, forgetting),
a domain-discrepancy proxy built from a small seeded probe classifier,
and assembled right-hand sides for the three incremental risk bounds.
True risks are unobservable, so empirical risks stand in everywhere;
the reports are diagnostics, not certificates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .incremental import IncrementState, joint_predict
from .prototypes import sample_proxy_all
from .rng import child_seed, generator


@dataclass
class EvalReport:
    step: int
    n_samples: int
    all_acc: float
    priv_acc: float | None
    shared_acc: float | None
    per_class_acc: dict
    per_class_counts: dict
    forgetting: dict = field(default_factory=dict)
    unknown_labels: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "step": self.step,
            "n_samples": self.n_samples,
            "all_acc": self.all_acc,
            "priv_acc": self.priv_acc,
            "shared_acc": self.shared_acc,
            "per_class_acc": {str(k): v for k, v in self.per_class_acc.items()},
            "per_class_counts": {str(k): v for k, v in self.per_class_counts.items()},
            "forgetting": {str(k): v for k, v in self.forgetting.items()},
            "unknown_labels": self.unknown_labels,
        }


class History:
    """Per-class accuracy across steps, for forgetting computations."""

    def __init__(self):
        self.records: dict = {}  # class_id -> list of (step, acc)

    def add(self, report: EvalReport) -> None:
        for cid, acc in report.per_class_acc.items():
            self.records.setdefault(int(cid), []).append((report.step, acc))

    def forgetting_for(self, class_id: int, current_acc: float) -> float | None:
        past = self.records.get(int(class_id), [])
        if not past:
            return None
        return max(0.0, max(acc for _, acc in past) - current_acc)


def evaluate(state: IncrementState, features, labels, step: int | None = None, history: History | None = None) -> EvalReport:
    """Score joint predictions against hidden labels.

    Labels outside the registry can never be predicted; they count as
    errors and are flagged. With a ``history``, per-class forgetting
    (peak past accuracy minus current) is filled in and the report is
    appended to the history.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("evaluation set is empty")
    if y.shape != (x.shape[0],):
        raise ValueError("labels must align with feature rows")
    _, preds = joint_predict(state, x)
    correct = preds == y
    registry = state.registry
    unknown = sorted(set(int(c) for c in np.unique(y)) - set(registry.joint_classes()))
    per_class_acc, per_class_counts = {}, {}
    for cid in sorted(int(c) for c in np.unique(y)):
        rows = y == cid
        per_class_acc[cid] = float(correct[rows].mean())
        per_class_counts[cid] = int(rows.sum())
    priv_rows = np.isin(y, list(registry.private))
    shared_rows = np.isin(y, list(registry.shared))
    report = EvalReport(
        step=state.step if step is None else step,
        n_samples=int(x.shape[0]),
        all_acc=float(correct.mean()),
        priv_acc=float(correct[priv_rows].mean()) if priv_rows.any() else None,
        shared_acc=float(correct[shared_rows].mean()) if shared_rows.any() else None,
        per_class_acc=per_class_acc,
        per_class_counts=per_class_counts,
        unknown_labels=unknown,
    )
    if history is not None:
        report.forgetting = {
            cid: f
            for cid in per_class_acc
            if (f := history.forgetting_for(cid, per_class_acc[cid])) is not None
        }
        history.add(report)
    return report


def forgetting(history: History) -> tuple[dict, float | None]:
    """Per-class and mean forgetting over a full history.

    A class needs at least two evaluations; the score is the largest
    past-minus-latest accuracy drop, floored at zero.
    """
    per_class = {}
    for cid, recs in history.records.items():
        if len(recs) < 2:
            continue
        accs = [a for _, a in recs]
        per_class[cid] = max(0.0, max(accs[:-1]) - accs[-1])
    mean = float(np.mean(list(per_class.values()))) if per_class else None
    return per_class, mean


def source_only_accuracy(state: IncrementState, features, labels) -> float:
    """Accuracy of the frozen source path g_s(f_s(x)) over shared classes.

    The trivial no-adaptation baseline: private classes are invisible to
    it, so score it on shared-class samples only.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    shared = list(state.registry.shared)
    logits = state.source.logits(x)[:, : len(shared)]
    preds = np.array([shared[i] for i in logits.argmax(axis=1)], dtype=np.int64)
    rows = np.isin(y, shared)
    if not rows.any():
        raise ValueError("no shared-class samples to score")
    return float((preds[rows] == y[rows]).mean())


# ---------------------------------------------------------------------------
# domain discrepancy proxy


@dataclass
class ProbeConfig:
    hidden: int = 8
    epochs: int = 40
    learning_rate: float = 5e-3
    holdout_fraction: float = 0.3
    seed: int = 0


def h_distance_proxy(src_latents, tgt_latents, cfg: ProbeConfig | None = None) -> float:
    """Estimate the domain discrepancy from a fresh probe classifier.

    A small fixed-seed two-layer net is trained to tell the two latent
    sets apart on a 70/30 split per side; with holdout error e the
    estimate is 2 * (1 - 2e), clamped into [0, 2]. Indistinguishable
    sets land near 0, perfectly separable ones near 2.
    """
    cfg = cfg or ProbeConfig()
    a = np.asarray(src_latents, dtype=np.float64)
    b = np.asarray(tgt_latents, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("need two non-empty latent matrices")
    if a.shape[1] != b.shape[1]:
        raise ValueError("latent dims differ")

    def split(m, tag):
        rng = generator(cfg.seed, "probe-split", tag)
        order = rng.permutation(m.shape[0])
        n_train = int(round((1.0 - cfg.holdout_fraction) * m.shape[0]))
        if n_train < 1 or m.shape[0] - n_train < 1:
            raise ValueError("degenerate split: need at least one train and one holdout row per side")
        return m[order[:n_train]], m[order[n_train:]]

    a_tr, a_ho = split(a, 0)
    b_tr, b_ho = split(b, 1)
    x_tr = np.concatenate([a_tr, b_tr], axis=0)
    y_tr = np.concatenate(
        [np.zeros(a_tr.shape[0], dtype=np.int64), np.ones(b_tr.shape[0], dtype=np.int64)]
    )
    probe = nn.Mlp([a.shape[1], cfg.hidden, 2], seed=child_seed(cfg.seed, "probe"))
    opt = nn.AdamState.for_params(probe.params(), learning_rate=cfg.learning_rate)
    for _ in range(cfg.epochs):
        logits, cache = probe.forward_cached(x_tr)
        _, dlogits = nn.softmax_ce_grad(logits, y_tr, tau=1.0)
        grads, _ = probe.backward(cache, dlogits)
        probe.apply_adam(grads, opt)
    x_ho = np.concatenate([a_ho, b_ho], axis=0)
    y_ho = np.concatenate(
        [np.zeros(a_ho.shape[0], dtype=np.int64), np.ones(b_ho.shape[0], dtype=np.int64)]
    )
    err = float((probe.forward(x_ho).argmax(axis=1) != y_ho).mean())
    return float(np.clip(2.0 * (1.0 - 2.0 * err), 0.0, 2.0))


# ---------------------------------------------------------------------------
# risk bound assembly


def vc_bound_term(d: int, m: int, delta: float) -> float:
    """Sample-complexity term 4 * sqrt((2d log(2m) + log(4/delta)) / m)."""
    if m < 1:
        raise ValueError("sample size must be >= 1")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if d < 0:
        raise ValueError("capacity must be >= 0")
    return 4.0 * math.sqrt((2.0 * d * math.log(2.0 * m) + math.log(4.0 / delta)) / m)


def source_proxy_risk(state: IncrementState, per_class: int, seed: int) -> float:
    """Source-free source risk: misclassification rate of proxy draws.

    Proxy latents ride the replay pathway (encode, decode, joint heads)
    and are scored against their own class, standing in for held-out
    source data once the raw set is gone.
    """
    u, cls = sample_proxy_all(state.prototypes, per_class, seed)
    v = state.autoencoder.encoder.forward(u)
    u_hat = state.autoencoder.decoder.forward(v)
    n_shared = len(state.registry.shared)
    s_logits = state.source.classifier.forward(u_hat)[:, :n_shared]
    t_logits = state.target.classifier.forward(v)
    joint = np.concatenate([s_logits, t_logits], axis=1)
    order = state.registry.joint_classes()
    preds = np.array([order[i] for i in joint.argmax(axis=1)], dtype=np.int64)
    return float((preds != cls).mean())


def target_risk(state: IncrementState, features, labels) -> float:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    _, preds = joint_predict(state, x)
    return float((preds != y).mean())


@dataclass
class IncrementRecord:
    """Per-step quantities the bound assembly consumes.

    ``pre_*`` risks are measured with the previous hypothesis on this
    step's data (before the increment ran); ``post_*`` with the updated
    hypothesis. ``m_prime`` is the smaller of the two unlabeled pools
    that fed the discrepancy estimate.
    """

    step: int
    pre_eps_s: float
    pre_eps_t: float
    post_eps_s: float
    post_eps_t: float
    d_hat: float
    m_prime: int
    n_params: int

    def __post_init__(self):
        for name in ("pre_eps_s", "pre_eps_t", "post_eps_s", "post_eps_t"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not 0.0 <= self.d_hat <= 2.0:
            raise ValueError(f"d_hat={self.d_hat} outside [0, 2]")
        if self.m_prime < 1:
            raise ValueError("m_prime must be >= 1")


@dataclass
class BoundRow:
    step: int
    lhs: float
    thm1_rhs: float
    thm2_rhs: float
    thm3_rhs: float
    lambda_prev_hyp: float
    lambda_curr_hyp: float
    d_hat: float
    vc_term: float
    bound_holds: dict

    def to_json_dict(self) -> dict:
        return {
            "step": self.step,
            "lhs": self.lhs,
            "thm1_rhs": self.thm1_rhs,
            "thm2_rhs": self.thm2_rhs,
            "thm3_rhs": self.thm3_rhs,
            "lambda_prev_hyp": self.lambda_prev_hyp,
            "lambda_curr_hyp": self.lambda_curr_hyp,
            "d_hat": self.d_hat,
            "vc_term": self.vc_term,
            "bound_holds": self.bound_holds,
        }


@dataclass
class BoundReport:
    delta: float
    rows: list

    def to_json_dict(self) -> dict:
        return {
            "format": "bound-report/v1",
            "delta": self.delta,
            "rows": [r.to_json_dict() for r in self.rows],
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def bound_report(records: list, delta: float = 0.05) -> BoundReport:
    """Assemble the three incremental risk bounds from stored records.

    For each completed step t the row aggregates steps 1..t. The
    combined optimal-hypothesis term comes in two index conventions
    because the statements disagree: ``lambda_prev_hyp`` averages the
    previous-hypothesis risks, ``lambda_curr_hyp`` uses the current
    hypothesis's risks. The first two bounds use the previous-hypothesis
    form, the third its own current-hypothesis form.
    """
    if not records:
        raise ValueError("need at least one completed increment")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    recs = sorted(records, key=lambda r: r.step)
    rows = []
    for t in range(1, len(recs) + 1):
        window = recs[:t]
        cur = window[-1]
        lam_prev = float(np.mean([r.pre_eps_t + r.pre_eps_s for r in window]))
        lam_curr = cur.post_eps_t + cur.post_eps_s
        mean_src = float(np.mean([r.post_eps_s for r in window]))
        mean_pre_tgt = float(np.mean([r.pre_eps_t for r in window]))
        mean_half_d = float(np.mean([0.5 * r.d_hat for r in window]))
        vc_terms = [vc_bound_term(r.n_params, r.m_prime, delta) for r in window]
        mean_vc = float(np.mean(vc_terms))
        lhs = cur.post_eps_t
        thm1 = mean_src + mean_half_d + lam_prev
        thm2 = mean_pre_tgt + mean_half_d + lam_prev
        thm3 = mean_src + mean_half_d + mean_vc + lam_curr
        rows.append(
            BoundRow(
                step=cur.step,
                lhs=lhs,
                thm1_rhs=thm1,
                thm2_rhs=thm2,
                thm3_rhs=thm3,
                lambda_prev_hyp=lam_prev,
                lambda_curr_hyp=lam_curr,
                d_hat=cur.d_hat,
                vc_term=vc_terms[-1],
                bound_holds={
                    "thm1": thm1 >= lhs,
                    "thm2": thm2 >= lhs,
                    "thm3": thm3 >= lhs,
                },
            )
        )
    return BoundReport(delta=delta, rows=rows)


# ---------------------------------------------------------------------------
# flat per-step CSV for external plotting


def write_metrics_csv(path, eval_reports: list, bound: BoundReport | None, mean_forgetting: dict) -> None:
    """One row per step: accuracy, forgetting, discrepancy, bound terms."""
    by_step = {r.step: r for r in (bound.rows if bound else [])}
    with open(path, "w") as fh:
        fh.write("step,all_acc,priv_acc,forgetting,d_hat,thm1_rhs,thm2_rhs,thm3_rhs,lhs\n")
        for rep in eval_reports:
            row = by_step.get(rep.step)
            priv = "" if rep.priv_acc is None else repr(rep.priv_acc)
            forg = mean_forgetting.get(rep.step)
            forg_s = "" if forg is None else repr(forg)
            if row is None:
                fh.write(f"{rep.step},{rep.all_acc!r},{priv},{forg_s},,,,,\n")
            else:
                fh.write(
                    f"{rep.step},{rep.all_acc!r},{priv},{forg_s},{row.d_hat!r},"
                    f"{row.thm1_rhs!r},{row.thm2_rhs!r},{row.thm3_rhs!r},{row.lhs!r}\n"
                )
